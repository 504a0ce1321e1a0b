"""Experiment graph: dataset -> optimize -> augment -> hgvl / scr -> eval -> report.

The configuration is an INI file (sections of ``key = value`` lines with ``#``
comments). Each stage writes into its own directory under the output root and is
skipped on re-runs when the content hash of its configuration, its upstream stages
and the code version is unchanged.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .augment import KEYFRAME, SamplingConfig, generate_reference_set, read_reference_set, write_reference_set
from .evaluation import (EvalReport, MethodResult, ThresholdSpec, compute_ate, compute_psnr, pose_error)
from .gaussians import load_map, save_map
from .geometry import DegenerateConfiguration
from .io import DatasetError, Sequence, ingest_dataset, write_sequence
from .localization.hgvl import HgvlConfig, ReferenceDatabase, ViewFeatures, extract, load_features, \
    localize_hgvl, save_features
from .localization.result import read_results_csv, write_results_csv
from .localization.scr import ScrConfig, build_training_set, localize_scr, save_forest, train_forest
from .optimize import OptimConfig, init_from_views, optimize_map
from .render import RenderConfig, render
from .report import emit_report

log = logging.getLogger(__name__)

VARIANTS = ("keyframes", "augmented")
METHODS = tuple(f"{m}_{v}" for m in ("hgvl", "scr") for v in VARIANTS)


class ConfigError(ValueError):
    """Invalid configuration; raised before any stage runs."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration -----------------------------------------------------------------

SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "pipeline": {"seed": (int, 0), "output": (str, "out"), "threads": (int, 0)},
    "dataset": {
        "source": (str, "synthetic"), "path": (str, ""),
        "width": (int, 320), "height": (int, 240),
        "keyframe_step": (int, 12), "query_step": (int, 12), "query_offset": (float, 1.0),
        "ablation_train_views": (int, 50), "ablation_heldout_views": (int, 10),
        "ablation_width": (int, 160), "ablation_height": (int, 120),
        "texture_frequency": (float, 2.0), "grain": (float, 0.25), "gaussians_per_m2": (float, 150.0),
    },
    "optimize": {"configs": (str, "a,b,c"), "iterations": (int, 600),
                 "position_sigma": (float, 0.01), "color_sigma": (float, 0.03)},
    "augment": {"map_config": (str, "c"), "samples": (int, 25), "long": (float, 0.5), "lat": (float, 2.0),
                "vert": (float, 0.0), "yaw": (float, 180.0), "min_coverage": (float, 0.2)},
    "hgvl": {"top_k": (int, 10), "max_features": (int, 1500), "ratio": (float, 0.8),
             "threshold_px": (float, 3.0), "max_iters": (int, 2000), "min_inliers": (int, 12)},
    "scr": {"trees": (int, 5), "max_depth": (int, 16), "candidates": (int, 256), "min_leaf": (int, 10),
            "samples_keyframe": (int, 2000), "samples_rendered": (int, 300), "augment": (bool, True),
            "stride": (int, 4), "hypotheses": (int, 256), "threshold_px": (float, 10.0)},
    "eval": {"thresholds": (str, "0.5/0.02, 1.5/0.05, 3/0.1, 5/0.5, 10/1.0")},
}

# Which config sections and upstream stages each stage depends on, in run order.
STAGES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "dataset": (("dataset",), ()),
    "optimize": (("optimize",), ("dataset",)),
    "augment": (("augment",), ("dataset", "optimize")),
    "hgvl": (("hgvl",), ("dataset", "augment")),
    "scr": (("scr",), ("dataset", "augment")),
    "eval": (("eval",), ("dataset", "optimize", "hgvl", "scr")),
    "report": ((), ("eval",)),
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_thresholds(text: str) -> ThresholdSpec:
    pairs = []
    for item in text.split(","):
        deg, m = item.strip().split("/")
        pairs.append((float(deg), float(m)))
    return ThresholdSpec(tuple(pairs))


@dataclass(frozen=True)
class PipelineConfig:
    values: dict          # section -> key -> typed value
    base_dir: Path        # relative paths resolve against the config file's directory

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["pipeline"]["seed"]

    @property
    def output(self) -> Path:
        return (self.base_dir / self.values["pipeline"]["output"]).resolve()

    @property
    def threads(self) -> int | None:
        return self.values["pipeline"]["threads"] or None

    def section_dict(self, section: str) -> dict:
        return dict(self.values[section])

    @classmethod
    def from_text(cls, text: str, base_dir=".", overrides: dict | None = None) -> PipelineConfig:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        problems = []
        values: dict = {}
        for name in parser.sections():
            if name not in SCHEMA:
                problems.append(f"unknown section [{name}]")
        for section, keys in SCHEMA.items():
            values[section] = {}
            given = parser[section] if parser.has_section(section) else {}
            for key in given:
                if key not in keys:
                    problems.append(f"[{section}] unknown key {key!r}")
            for key, (typ, default) in keys.items():
                raw = (overrides or {}).get(section, {}).get(key, given.get(key) if given else None)
                if raw is None:
                    values[section][key] = default
                    continue
                try:
                    values[section][key] = _parse_bool(str(raw)) if typ is bool else typ(str(raw).strip())
                except ValueError:
                    problems.append(f"[{section}] {key} = {raw!r} is not a valid {typ.__name__}")
        cfg = cls(values, Path(base_dir).resolve())
        if not problems:
            problems = cfg._semantic_problems()
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> PipelineConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        return cls.from_text(path.read_text(encoding="utf-8"), path.parent, overrides)

    def _semantic_problems(self) -> list[str]:
        p = []
        d = self.values["dataset"]
        if d["source"] not in ("synthetic", "directory"):
            p.append("[dataset] source must be 'synthetic' or 'directory'")
        if d["source"] == "directory":
            root = self.base_dir / d["path"] if d["path"] else None
            if root is None or not root.is_dir():
                p.append(f"[dataset] path {d['path']!r} does not exist")
            else:
                for sub in ("mapping", "queries"):
                    if not (root / sub).is_dir():
                        p.append(f"[dataset] {root / sub} does not exist")
        for key in ("width", "height", "keyframe_step", "query_step", "ablation_width", "ablation_height"):
            if d[key] < 1:
                p.append(f"[dataset] {key} must be >= 1")
        if d["width"] % 4 or d["height"] % 4:
            p.append("[dataset] width and height must be multiples of 4 (working scale 0.25)")
        configs = [c.strip() for c in self.values["optimize"]["configs"].split(",") if c.strip()]
        if not configs or any(c not in ("a", "b", "c") for c in configs):
            p.append("[optimize] configs must be a comma-separated subset of a, b, c")
        if self.values["augment"]["map_config"] not in configs:
            p.append("[augment] map_config must be one of the optimized configs")
        if self.values["optimize"]["iterations"] < 1:
            p.append("[optimize] iterations must be >= 1")
        try:
            parse_thresholds(self.values["eval"]["thresholds"])
        except (ValueError, IndexError) as exc:
            p.append(f"[eval] thresholds: {exc}")
        if self.values["pipeline"]["threads"] < 0:
            p.append("[pipeline] threads must be >= 0")
        return p

    @property
    def opt_configs(self) -> list[str]:
        return [c.strip() for c in self.values["optimize"]["configs"].split(",") if c.strip()]


def default_config_text() -> str:
    lines = ["# splatloc pipeline configuration", ""]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (typ, default) in keys.items():
            val = ("on" if default else "off") if typ is bool else default
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


# -- seeds and hashing -------------------------------------------------------------

def derive_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def stage_keys(cfg: PipelineConfig) -> dict[str, str]:
    """Content hash per stage over its config sections, seed, upstream keys and code version."""
    keys: dict[str, str] = {}
    for stage, (sections, upstream) in STAGES.items():
        payload = {
            "stage": stage, "version": __version__, "seed": derive_seed(cfg.seed, stage),
            "config": {s: cfg.section_dict(s) for s in sections},
            "upstream": [keys[u] for u in upstream],
        }
        if stage == "dataset" and cfg["dataset"]["source"] == "directory":
            payload["dataset_path"] = str((cfg.base_dir / cfg["dataset"]["path"]).resolve())
        blob = json.dumps(payload, sort_keys=True).encode()
        keys[stage] = hashlib.sha256(blob).hexdigest()
    return keys


# -- stages ------------------------------------------------------------------------

@dataclass
class Context:
    cfg: PipelineConfig
    out: Path
    threads: int | None

    def dir(self, name: str) -> Path:
        return self.out / name

    @property
    def dataset_root(self) -> Path:
        d = self.cfg["dataset"]
        if d["source"] == "directory":
            return (self.cfg.base_dir / d["path"]).resolve()
        return self.out / "dataset"

    def seed(self, stage: str) -> int:
        return derive_seed(self.cfg.seed, stage)


def validate_dataset(cfg: PipelineConfig) -> None:
    """Ingest both sequences of a directory dataset, raising one itemized DatasetError."""
    if cfg["dataset"]["source"] != "directory":
        return
    root = (cfg.base_dir / cfg["dataset"]["path"]).resolve()
    issues = []
    for sub in ("mapping", "queries"):
        try:
            ingest_dataset(root / sub)
        except DatasetError as exc:
            issues.extend(exc.issues)
    if issues:
        raise DatasetError(issues)


def run_dataset(ctx: Context) -> None:
    d = ctx.cfg["dataset"]
    if d["source"] == "directory":
        validate_dataset(ctx.cfg)
        ctx.dir("dataset").mkdir(parents=True, exist_ok=True)
        (ctx.dir("dataset") / "SOURCE").write_text(str(ctx.dataset_root) + "\n", encoding="utf-8")
        return
    synthesize_dataset(ctx.dir("dataset"), d, ctx.cfg.seed, ctx.threads)


def synthesize_dataset(root: Path, d: dict, seed: int, threads: int | None = None) -> None:
    """Mapping keyframes, reversed laterally offset queries, and mixed-distance ablation views.

    ``seed`` selects the scene; exposure draws and ablation poses use seeds derived from it.
    """
    from .synth import (Perturbations, SceneSpec, TrajectorySpec, default_intrinsics,
                        default_mapping_waypoints, generate_scene, generate_trajectory, render_dataset,
                        sample_room_poses)

    scene = SceneSpec(seed=seed, texture_frequency=d["texture_frequency"], grain=d["grain"],
                      gaussians_per_m2=d["gaussians_per_m2"])
    gt = generate_scene(scene)
    root.mkdir(parents=True, exist_ok=True)
    save_map(gt, root / "gt_map.ply")
    K = default_intrinsics(d["width"], d["height"])
    mapping = generate_trajectory(TrajectorySpec(default_mapping_waypoints()), scene)[::d["keyframe_step"]]
    queries = generate_trajectory(TrajectorySpec(default_mapping_waypoints(), reverse=True,
                                                 lateral_offset=d["query_offset"]), scene)[::d["query_step"]]
    sensor = dict(supersample=2)
    write_sequence(root / "mapping", render_dataset(gt, mapping, K, Perturbations(**sensor), threads=threads),
                   [t for t, _ in mapping])
    write_sequence(root / "queries",
                   render_dataset(gt, queries, K, Perturbations(exposure=True, seed=derive_seed(seed, "queries"), **sensor),
                                  threads=threads),
                   [t for t, _ in queries])
    # ablation views: pixel integration over a 4x4 grid plus optical blur, so the total
    # per-pixel blur variance equals the renderer's dilation constant
    Ka = default_intrinsics(d["ablation_width"], d["ablation_height"])
    abl = dict(supersample=4, psf_variance=0.3 - 1.0 / 12.0)
    n_train, n_held = d["ablation_train_views"], d["ablation_heldout_views"]
    poses = sample_room_poses(scene, n_train + n_held, derive_seed(seed, "ablation_poses"))
    write_sequence(root / "ablation_train",
                   render_dataset(gt, poses[:n_train], Ka, Perturbations(exposure=True, seed=derive_seed(seed, "ablation_exposure"), **abl),
                                  threads=threads))
    write_sequence(root / "ablation_heldout",
                   render_dataset(gt, poses[n_train:], Ka, Perturbations(**abl), threads=threads))


def _ablation_views(ctx: Context):
    root = ctx.dataset_root
    if (root / "ablation_train").is_dir() and (root / "ablation_heldout").is_dir():
        return (Sequence.open(root / "ablation_train", require_depth=True).views(),
                Sequence.open(root / "ablation_heldout", require_depth=True).views())
    views = Sequence.open(root / "mapping", require_depth=True).views()
    held = views[2::5]
    train = [v for i, v in enumerate(views) if i % 5 != 2]
    return train, held


def run_optimize(ctx: Context) -> None:
    o = ctx.cfg["optimize"]
    train, _ = _ablation_views(ctx)
    gt_path = ctx.dataset_root / "gt_map.ply"
    seed = ctx.seed("optimize")
    if gt_path.exists():
        from .synth import perturb_map
        init = perturb_map(load_map(gt_path), o["position_sigma"], o["color_sigma"], seed)
    else:
        init = init_from_views(train)
    out = ctx.dir("maps")
    out.mkdir(parents=True, exist_ok=True)
    save_map(init, out / "init.ply")
    for name in ctx.cfg.opt_configs:
        res = optimize_map(init, train, OptimConfig.preset(name, iterations=o["iterations"], seed=seed),
                           ctx.threads)
        save_map(res.gmap, out / f"{name}.ply")
        res.write_history_csv(out / f"{name}_losses.csv")


def run_augment(ctx: Context) -> None:
    a = ctx.cfg["augment"]
    gmap = load_map(ctx.dir("maps") / f"{a['map_config']}.ply")
    keyframes = Sequence.open(ctx.dataset_root / "mapping", require_depth=True).views()
    sampling = SamplingConfig(a["samples"], a["long"], a["lat"], a["yaw"], a["vert"], ctx.seed("augment"))
    rcfg = RenderConfig(antialias_enabled=a["map_config"] == "c")
    refs = generate_reference_set(gmap, keyframes, sampling, rcfg, a["min_coverage"], ctx.threads)
    write_reference_set(ctx.dir("refs"), refs)


def hgvl_config(h: dict, seed: int = 0) -> HgvlConfig:
    return HgvlConfig(top_k=h["top_k"], max_features=h["max_features"], ratio=h["ratio"],
                      threshold_px=h["threshold_px"], max_iters=h["max_iters"], min_inliers=h["min_inliers"],
                      seed=seed)


def cached_features(refs, cache_dir: Path, cfg: HgvlConfig) -> None:
    """Attach HGVL features to every reference view, reading or writing the per-view cache."""
    cache_dir.mkdir(parents=True, exist_ok=True)
    for r in refs:
        path = cache_dir / f"{r.name}.slfc"
        feats: ViewFeatures | None = None
        if path.exists():
            try:
                feats = load_features(path)
            except ValueError as exc:
                log.warning("%s; re-extracting", exc)
        if feats is None:
            feats = extract(r.image, cfg)
            save_features(path, feats)
        r.features["hgvl"] = feats


def select_variant(refs, variant: str):
    return [r for r in refs if r.provenance == KEYFRAME] if variant == "keyframes" else list(refs)


def run_hgvl(ctx: Context) -> None:
    cfg = hgvl_config(ctx.cfg["hgvl"], ctx.seed("hgvl"))
    refs = read_reference_set(ctx.dir("refs"))
    cached_features(refs, ctx.dir("hgvl") / "features", cfg)
    queries = Sequence.open(ctx.dataset_root / "queries")
    for variant in VARIANTS:
        db = ReferenceDatabase.from_views(select_variant(refs, variant), cfg)
        rows = []
        for i in range(len(queries)):
            rows.append((queries.query_id(i), localize_hgvl(queries.image(i), db, queries.intrinsics, cfg)))
        write_results_csv(ctx.dir("hgvl") / f"results_{variant}.csv", rows)


def run_scr(ctx: Context) -> None:
    s = ctx.cfg["scr"]
    seed = ctx.seed("scr")
    refs = read_reference_set(ctx.dir("refs"))
    queries = Sequence.open(ctx.dataset_root / "queries")
    out = ctx.dir("scr")
    out.mkdir(parents=True, exist_ok=True)
    loc_cfg = ScrConfig(stride=s["stride"], threshold_px=s["threshold_px"], hypotheses=s["hypotheses"], seed=seed)
    for variant in VARIANTS:
        ts = build_training_set(select_variant(refs, variant), s["samples_keyframe"], s["augment"], seed,
                                samples_per_rendered_view=s["samples_rendered"])
        forest = train_forest(ts, s["trees"], s["max_depth"], s["candidates"], s["min_leaf"], seed,
                              threads=ctx.threads)
        save_forest(forest, out / f"forest_{variant}.bin")
        rows = [(queries.query_id(i), localize_scr(forest, queries.image(i), queries.intrinsics, loc_cfg))
                for i in range(len(queries))]
        write_results_csv(out / f"results_{variant}.csv", rows)


ERRORS_HEADER = "method,query_id,status,rot_deg,trans_m"


def evaluate_results(results_paths: dict[str, Path], queries: Sequence) -> list[MethodResult]:
    gt = {queries.query_id(i): queries.entries[i][1] for i in range(len(queries))}
    methods = []
    for name, path in results_paths.items():
        errors, statuses = [], []
        rows = dict(read_results_csv(path))
        for qid in sorted(gt):
            r = rows.get(qid)
            if r is None:
                errors.append(None)
                statuses.append("missing")
                continue
            statuses.append(r.status)
            errors.append(pose_error(r.pose, gt[qid]) if r.ok else None)
        methods.append(MethodResult(name, errors, statuses))
    return methods


def heldout_psnr(maps: dict[str, Path], heldout) -> dict[str, float]:
    out = {}
    for name, path in maps.items():
        gmap = load_map(path)
        rcfg = RenderConfig(antialias_enabled=name == "c")
        vals = [compute_psnr(np.clip(render(gmap, v.pose, v.intrinsics, rcfg).color, 0, 1), v.image)
                for v in heldout]
        out[name] = float(np.mean(vals))
    return out


def trajectory_ate(method: MethodResult, queries: Sequence, results_path: Path):
    gt = {queries.query_id(i): queries.entries[i][1] for i in range(len(queries))}
    est, ref = [], []
    for qid, r in read_results_csv(results_path):
        if r.ok and qid in gt:
            est.append(r.pose)
            ref.append(gt[qid])
    if len(est) < 3:
        return None
    try:
        res = compute_ate(est, ref, with_scale=True)
    except DegenerateConfiguration:
        return None
    return res.rmse, res.max


def write_eval(out: Path, methods: list[MethodResult], psnr: dict[str, float], ate: dict, queries_ids) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [ERRORS_HEADER]
    for m in methods:
        for qid, status, e in zip(queries_ids, m.statuses, m.errors):
            rot, trans = ("", "") if e is None else (repr(e[0]), repr(e[1]))
            lines.append(f"{m.name},{qid},{status},{rot},{trans}")
    (out / "errors.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "psnr.csv").write_text("config,psnr_db\n" + "".join(f"{k},{v!r}\n" for k, v in sorted(psnr.items())),
                                  encoding="utf-8")
    (out / "ate.csv").write_text("trajectory,rmse_m,max_m\n" + "".join(
        f"{k},{v[0]!r},{v[1]!r}\n" for k, v in sorted(ate.items())), encoding="utf-8")


def read_eval(root: Path, thresholds: ThresholdSpec) -> EvalReport:
    root = Path(root)
    methods: dict[str, MethodResult] = {}
    lines = (root / "errors.csv").read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ERRORS_HEADER:
        raise ValueError(f"{root / 'errors.csv'}: unexpected header")
    for line in lines[1:]:
        if not line:
            continue
        name, _, status, rot, trans = line.split(",")
        m = methods.setdefault(name, MethodResult(name, [], []))
        m.statuses.append(status)
        m.errors.append(None if rot == "" else (float(rot), float(trans)))

    def table(name):
        out = {}
        for line in (root / name).read_text(encoding="utf-8").splitlines()[1:]:
            if line:
                f = line.split(",")
                out[f[0]] = tuple(float(x) for x in f[1:])
        return out

    psnr = {k: v[0] for k, v in table("psnr.csv").items()}
    ate = table("ate.csv")
    return EvalReport(thresholds, list(methods.values()), ate, psnr)


def run_eval(ctx: Context) -> None:
    queries = Sequence.open(ctx.dataset_root / "queries")
    paths = {f"{m}_{v}": ctx.dir(m) / f"results_{v}.csv" for m in ("hgvl", "scr") for v in VARIANTS}
    methods = evaluate_results(paths, queries)
    ate = {}
    for m in methods:
        r = trajectory_ate(m, queries, paths[m.name])
        if r is not None:
            ate[m.name] = r
    _, held = _ablation_views(ctx)
    psnr = heldout_psnr({c: ctx.dir("maps") / f"{c}.ply" for c in ctx.cfg.opt_configs}, held)
    ids = sorted(queries.query_id(i) for i in range(len(queries)))
    write_eval(ctx.dir("eval"), methods, psnr, ate, ids)


def run_report(ctx: Context) -> None:
    report = read_eval(ctx.dir("eval"), parse_thresholds(ctx.cfg["eval"]["thresholds"]))
    emit_report(report, ctx.dir("report"))


RUNNERS = {"dataset": run_dataset, "optimize": run_optimize, "augment": run_augment, "hgvl": run_hgvl,
           "scr": run_scr, "eval": run_eval, "report": run_report}
STAGE_DIRS = {"dataset": ("dataset",), "optimize": ("maps",), "augment": ("refs",), "hgvl": ("hgvl",),
              "scr": ("scr",), "eval": ("eval",), "report": ("report",)}


@dataclass
class StageOutcome:
    name: str
    key: str
    cached: bool
    seconds: float


def run_pipeline(cfg: PipelineConfig, threads: int | None = None, stages: list[str] | None = None,
                 progress=None) -> list[StageOutcome]:
    """Run the stages in dependency order, skipping those whose stamp matches their key.

    Stage failures raise :class:`StageError`; outputs of completed stages are kept.
    A per-stage timing table is written to ``timings.csv`` next to (not inside) the
    report directory, since wall-clock times are not reproducible.
    """
    ctx = Context(cfg, cfg.output, threads or cfg.threads)
    ctx.out.mkdir(parents=True, exist_ok=True)
    stamps = ctx.out / "stages"
    stamps.mkdir(exist_ok=True)
    keys = stage_keys(cfg)
    outcomes = []
    for name in STAGES:
        if stages is not None and name not in stages:
            continue
        stamp = stamps / f"{name}.key"
        done = stamp.exists() and stamp.read_text(encoding="utf-8").strip() == keys[name] and \
            all(ctx.dir(d).exists() for d in STAGE_DIRS[name])
        if done:
            outcomes.append(StageOutcome(name, keys[name], True, 0.0))
            if progress:
                progress(f"{name}: cached")
            continue
        if stamp.exists():
            stamp.unlink()
        t0 = time.perf_counter()
        if progress:
            progress(f"{name}: running")
        try:
            RUNNERS[name](ctx)
        except Exception as exc:  # noqa: BLE001 - every stage failure is reported with its name
            raise StageError(name, exc) from exc
        dt = time.perf_counter() - t0
        stamp.write_text(keys[name] + "\n", encoding="utf-8")
        outcomes.append(StageOutcome(name, keys[name], False, dt))
        if progress:
            progress(f"{name}: done in {dt:.1f}s")
    with open(ctx.out / "timings.csv", "w", encoding="utf-8") as f:
        f.write("stage,cached,seconds\n")
        for o in outcomes:
            f.write(f"{o.name},{int(o.cached)},{o.seconds:.3f}\n")
    return outcomes
