"""Report emission: recall, ATE and PSNR tables as CSV plus pose-error and recall figures.

Outputs are deterministic bytes for a given report: numbers are formatted with fixed
precision and the SVG writer gets a fixed hash salt and no timestamp.
"""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport, format_recall_row  # noqa: E402

ERROR_FLOOR = (1e-3, 1e-4)  # deg, m; zero errors are drawn at the floor on log axes
REPORT_FILES = ("recall.csv", "ate.csv", "psnr.csv", "pose_errors.svg", "recall.svg")


class ReportError(OSError):
    pass


def _fmt(v: float, digits: int) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.{digits}f}"


def recall_csv(report: EvalReport) -> str:
    lines = ["method," + ",".join(report.thresholds.labels())]
    for name, row in report.recall_rows():
        lines.append(name + "," + format_recall_row(row).replace(" ", ","))
    return "\n".join(lines) + "\n"


def ate_csv(report: EvalReport) -> str:
    lines = ["trajectory,rmse_m,max_m"]
    for name in sorted(report.ate):
        rmse, mx = report.ate[name]
        lines.append(f"{name},{_fmt(rmse, 6)},{_fmt(mx, 6)}")
    return "\n".join(lines) + "\n"


def psnr_csv(report: EvalReport) -> str:
    lines = ["config,psnr_db"]
    for name in sorted(report.psnr):
        lines.append(f"{name},{_fmt(report.psnr[name], 2)}")
    return "\n".join(lines) + "\n"


def _deterministic_svg(fig, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "splatloc", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def pose_error_figure(report: EvalReport):
    """Rotation versus translation error per successful query, one series per method."""
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for m in report.methods:
        ok = [e for e in m.errors if e is not None]
        if not ok:
            continue
        rot = [max(e[0], ERROR_FLOOR[0]) for e in ok]
        trans = [max(e[1], ERROR_FLOOR[1]) for e in ok]
        ax.scatter(trans, rot, s=12, label=m.name)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("translation error [m]")
    ax.set_ylabel("rotation error [deg]")
    for d, t in report.thresholds.pairs:
        ax.plot([ERROR_FLOOR[1], t, t], [d, d, ERROR_FLOOR[0]], color="0.8", linewidth=0.6, zorder=0)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def recall_figure(report: EvalReport):
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    labels = report.thresholds.labels()
    for name, row in report.recall_rows():
        ax.plot(range(len(row)), row, marker="o", label=name)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylim(0, 100)
    ax.set_ylabel("queries localized [%]")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write the CSV tables and SVG figures into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"{out}: cannot create report directory: {exc.strerror or exc}") from exc
    for name, text in (("recall.csv", recall_csv(report)), ("ate.csv", ate_csv(report)),
                       ("psnr.csv", psnr_csv(report))):
        path = out / name
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ReportError(f"{path}: {exc.strerror or exc}") from exc
        written.append(path)
    for name, make in (("pose_errors.svg", pose_error_figure), ("recall.svg", recall_figure)):
        path = out / name
        try:
            _deterministic_svg(make(report), path)
        except OSError as exc:
            raise ReportError(f"{path}: {exc.strerror or exc}") from exc
        written.append(path)
    return written
