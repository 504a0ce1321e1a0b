"""Command-line interface. Exit codes: 0 success, 1 invalid input, 2 stage failure."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_FAILURE = 0, 1, 2
THREADS_ENV = "SPLATLOC_THREADS"

log = logging.getLogger("splatloc")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _named_path(text: str) -> tuple[str, Path]:
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected NAME=PATH")
    name, path = text.split("=", 1)
    return name, Path(path)


def _threads(args) -> int:
    return args.threads if args.threads else int(os.environ.get(THREADS_ENV, "1") or 1)


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .pipeline import SCHEMA, synthesize_dataset

    if args.scene != "default":
        raise UsageError(f"unknown scene {args.scene!r}; only 'default' is built in")
    d = {k: v[1] for k, v in SCHEMA["dataset"].items()}
    for key in ("width", "height", "keyframe_step", "query_step"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    synthesize_dataset(Path(args.out), d, args.seed, _threads(args))
    print(f"wrote synthetic dataset to {args.out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .gaussians import load_map, save_map
    from .io import Sequence
    from .optimize import OptimConfig, init_from_views, optimize_map

    views = Sequence.open(args.views, require_depth=True).views()
    init = load_map(args.init) if args.init else init_from_views(views)
    cfg = OptimConfig.preset(args.config, iterations=args.iterations, seed=args.seed)
    res = optimize_map(init, views, cfg, _threads(args))
    save_map(res.gmap, args.out)
    if args.log:
        res.write_history_csv(args.log)
    print(f"config {args.config}: {len(res.gmap)} Gaussians, final loss {res.history[-1][3]:.6f}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .gaussians import load_map
    from .io import read_intrinsics, read_trajectory, write_color, write_depth, write_gray
    from .render import RenderConfig, render
    from .synth import default_intrinsics

    gmap = load_map(args.map)
    poses = read_trajectory(args.pose_file)
    if args.intrinsics:
        K = read_intrinsics(args.intrinsics)
    elif (Path(args.pose_file).parent / "intrinsics.txt").exists():
        K = read_intrinsics(Path(args.pose_file).parent / "intrinsics.txt")
    else:
        K = default_intrinsics()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RenderConfig(antialias_enabled=not args.no_antialias)
    for i, (_, pose) in enumerate(poses):
        f = render(gmap, pose, K, cfg, _threads(args))
        write_color(out / f"{i:06d}_color.png", f.color)
        write_depth(out / f"{i:06d}_depth.png", f.depth)
        write_gray(out / f"{i:06d}_alpha.png", f.alpha)
    print(f"rendered {len(poses)} views to {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    from .augment import SamplingConfig, generate_reference_set, write_reference_set
    from .gaussians import load_map
    from .io import Sequence
    from .render import RenderConfig

    gmap = load_map(args.map)
    keyframes = Sequence.open(args.keyframes, require_depth=True).views()
    cfg = SamplingConfig(args.samples, args.long, args.lat, args.yaw, args.vert, args.seed)
    refs = generate_reference_set(gmap, keyframes, cfg, RenderConfig(antialias_enabled=not args.no_antialias),
                                  args.min_coverage, _threads(args))
    write_reference_set(args.out, refs)
    print(f"{len(refs.keyframes)} keyframes, {len(refs) - len(refs.keyframes)} rendered views, "
          f"{refs.dropped} dropped")
    return EXIT_OK


def cmd_loc_hgvl(args) -> int:
    from .augment import read_reference_set
    from .io import Sequence
    from .localization.hgvl import HgvlConfig, ReferenceDatabase, localize_hgvl
    from .localization.result import write_results_csv
    from .pipeline import cached_features, select_variant

    cfg = HgvlConfig(top_k=args.top_k, seed=args.seed)
    refs = read_reference_set(args.refs)
    views = select_variant(refs, "augmented" if args.with_rendered else "keyframes")
    cached_features(views, Path(args.refs) / "features", cfg)
    db = ReferenceDatabase.from_views(views, cfg)
    queries = Sequence.open(args.queries)
    rows = [(queries.query_id(i), localize_hgvl(queries.image(i), db, queries.intrinsics, cfg))
            for i in range(len(queries))]
    write_results_csv(args.out, rows)
    print(f"{sum(r.ok for _, r in rows)}/{len(rows)} queries localized")
    return EXIT_OK


def cmd_scr_train(args) -> int:
    from .augment import read_reference_set
    from .localization.scr import build_training_set, save_forest, train_forest
    from .pipeline import select_variant

    refs = read_reference_set(args.refs)
    views = select_variant(refs, "augmented" if args.with_rendered else "keyframes")
    ts = build_training_set(views, args.samples_keyframe, not args.no_augment, args.seed,
                            samples_per_rendered_view=args.samples_rendered)
    forest = train_forest(ts, args.trees, args.max_depth, args.candidates, args.min_leaf, args.seed,
                          threads=_threads(args))
    save_forest(forest, args.out)
    print(f"trained {forest.num_trees} trees on {len(ts)} samples ({ts.skipped_views} views skipped)")
    return EXIT_OK


def cmd_loc_scr(args) -> int:
    from .io import Sequence
    from .localization.result import write_results_csv
    from .localization.scr import ScrConfig, load_forest, localize_scr

    forest = load_forest(args.forest)
    cfg = ScrConfig(hypotheses=args.hypotheses, seed=args.seed)
    queries = Sequence.open(args.queries)
    rows = [(queries.query_id(i), localize_scr(forest, queries.image(i), queries.intrinsics, cfg))
            for i in range(len(queries))]
    write_results_csv(args.out, rows)
    print(f"{sum(r.ok for _, r in rows)}/{len(rows)} queries localized")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import Sequence
    from .pipeline import evaluate_results, heldout_psnr, trajectory_ate, write_eval

    queries = Sequence.open(args.queries)
    paths = dict(args.results)
    methods = evaluate_results(paths, queries)
    ate = {m.name: r for m in methods if (r := trajectory_ate(m, queries, paths[m.name])) is not None}
    psnr = {}
    if args.maps:
        if not args.heldout:
            raise UsageError("--maps needs --heldout")
        psnr = heldout_psnr(dict(args.maps), Sequence.open(args.heldout, require_depth=True).views())
    ids = sorted(queries.query_id(i) for i in range(len(queries)))
    write_eval(Path(args.out), methods, psnr, ate, ids)
    print(f"evaluated {len(methods)} methods on {len(ids)} queries")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import parse_thresholds, read_eval
    from .report import emit_report

    report = read_eval(Path(args.eval), parse_thresholds(args.thresholds))
    for p in emit_report(report, args.out):
        print(p)
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import STAGES, PipelineConfig, default_config_text, run_pipeline, validate_dataset

    if args.print_default_config:
        print(default_config_text())
        return EXIT_OK
    if not args.config:
        raise UsageError("run: --config is required")
    unknown = sorted(set(args.stages or ()) - set(STAGES))
    if unknown:
        raise UsageError(f"run: unknown stages {', '.join(unknown)}; choose from {', '.join(STAGES)}")
    # a command-line output path is relative to the working directory, not the config file
    overrides = {"pipeline": {"output": str(Path(args.output).resolve())}} if args.output else None
    cfg = PipelineConfig.load(args.config, overrides)
    validate_dataset(cfg)
    outcomes = run_pipeline(cfg, args.threads or None, args.stages, progress=print)
    cached = sum(o.cached for o in outcomes)
    print(f"{len(outcomes)} stages ({cached} cached); report in {cfg.output / 'report'}")
    return EXIT_OK


def cmd_map_info(args) -> int:
    from .gaussians import load_map, map_summary

    print(map_summary(load_map(args.map)))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatloc", description="Gaussian-map rendering for visual localization experiments.")
    p.add_argument("--threads", type=int, default=0,
                   help=f"thread cap (default: ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    s.add_argument("--scene", default="default")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--keyframe-step", type=int)
    s.add_argument("--query-step", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("optimize", help="optimize a Gaussian map against posed RGB-D views")
    s.add_argument("--config", choices=("a", "b", "c"), required=True)
    s.add_argument("--views", required=True)
    s.add_argument("--init", help="initial map PLY (default: from the views' depth)")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--iterations", type=int, default=600)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("render", help="render color, depth and alpha along a trajectory")
    s.add_argument("--map", required=True)
    s.add_argument("--pose-file", required=True)
    s.add_argument("--intrinsics")
    s.add_argument("--out", required=True)
    s.add_argument("--no-antialias", action="store_true")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("augment", help="render reference views around keyframes")
    s.add_argument("--map", required=True)
    s.add_argument("--keyframes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int, default=25)
    s.add_argument("--long", type=float, default=0.5)
    s.add_argument("--lat", type=float, default=2.0)
    s.add_argument("--yaw", type=float, default=180.0)
    s.add_argument("--vert", type=float, default=0.0)
    s.add_argument("--min-coverage", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-antialias", action="store_true")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("loc-hgvl", help="retrieval + triangulation + PnP localization")
    s.add_argument("--refs", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--with-rendered", type=_on_off, default=True)
    s.add_argument("--top-k", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_loc_hgvl)

    s = sub.add_parser("scr-train", help="train the scene coordinate regression forest")
    s.add_argument("--refs", required=True)
    s.add_argument("--with-rendered", type=_on_off, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trees", type=int, default=5)
    s.add_argument("--max-depth", type=int, default=16)
    s.add_argument("--candidates", type=int, default=256)
    s.add_argument("--min-leaf", type=int, default=10)
    s.add_argument("--samples-keyframe", type=int, default=2000)
    s.add_argument("--samples-rendered", type=int, default=300)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_scr_train)

    s = sub.add_parser("loc-scr", help="localize queries with a trained forest")
    s.add_argument("--forest", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--hypotheses", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_loc_scr)

    s = sub.add_parser("eval", help="pose errors, ATE and PSNR from result files")
    s.add_argument("--queries", required=True, help="query sequence with ground-truth trajectory")
    s.add_argument("--results", type=_named_path, action="append", required=True, metavar="NAME=CSV")
    s.add_argument("--maps", type=_named_path, action="append", metavar="CONFIG=PLY")
    s.add_argument("--heldout", help="held-out views for PSNR")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="CSV tables and SVG figures from an eval directory")
    s.add_argument("--eval", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--thresholds", default="0.5/0.02, 1.5/0.05, 3/0.1, 5/0.5, 10/1.0")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="run the full experiment pipeline from a config file")
    s.add_argument("--config")
    s.add_argument("--output", help="override [pipeline] output")
    s.add_argument("--stages", nargs="+", help="run only these stages")
    s.add_argument("--print-default-config", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("map-info", help="summary of a Gaussian map PLY")
    s.add_argument("map")
    s.set_defaults(func=cmd_map_info)
    return p


def main(argv=None) -> int:
    from .gaussians import FormatError, VersionError
    from .io import DatasetError
    from .pipeline import ConfigError, StageError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        os.environ[THREADS_ENV] = str(args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, FormatError, VersionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - surfaced as a stage failure
        print(f"error: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
