"""Command line driver.

Usage:
  python scripts/averager.py synth --n 10 --out meas.txt --gt gt.txt
  python scripts/averager.py check meas.txt --mode scaled
  python scripts/averager.py average meas.txt --out poses.txt --trace trace.csv
  python scripts/averager.py recover meas.txt --out poses.txt
  python scripts/averager.py eval poses.txt gt.txt
  python scripts/averager.py counterexample --seed 3 --out ce.txt
  python scripts/averager.py bench --n 20 --sigma-r 0.02 --sigma-t 0.02 --missing 0.1

Exit codes: 0 success, 1 consistency check failed, 2 usage, 3 validation,
4 incomplete matrix, 5 not converged (poses still written), 6 I/O, 7 other.
"""
import argparse
import dataclasses
import logging
import sys
from typing import List, Optional

import pandas as pd

from averaging.admm import solve
from averaging.config import AppConfig, load_config, set_config, setup_logging
from averaging.cover import ViewingGraph, build_cover
from averaging.errors import AveragingError, NotConvergedError, UsageError
from averaging.nview import (
    MultiviewEssential,
    check_essential_consistency,
    generate_counterexample,
    recover_poses,
)
from averaging.register import align_to_reference, reconstruct
from averaging.storage import (
    format_float,
    read_measurements,
    read_poses,
    write_measurements,
    write_poses,
    write_table,
)
from averaging.synthbench import LAYOUTS, SceneSpec, generate_scene, run_pipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INCONSISTENT = 1
EXIT_IO = 6


def _emit(key: str, value) -> None:
    if isinstance(value, float):
        value = format_float(value)
    elif isinstance(value, bool):
        value = int(value)
    print(f"{key} {value}")


def _measurement_matrix(graph: ViewingGraph, cfg: AppConfig) -> MultiviewEssential:
    return MultiviewEssential(graph.n, {k: M for k, (_, M) in graph.edges.items()},
                              validate=True, tol=cfg.tolerances.essential_tol)


def _scene_spec(args) -> SceneSpec:
    try:
        return SceneSpec(
            n=args.n, layout=args.layout, sigma_R=args.sigma_r, sigma_t=args.sigma_t,
            scale_pairs=args.scale_pairs, outlier_fraction=args.outliers,
            missing_fraction=args.missing, seed=args.seed, sigma_entry=args.sigma_entry,
        )
    except ValueError as e:
        raise UsageError(str(e))


def cmd_synth(args, cfg: AppConfig) -> int:
    scene = generate_scene(_scene_spec(args))
    write_measurements(args.out, scene.graph)
    if args.gt:
        write_poses(args.gt, scene.poses)
    logger.info(f"wrote {len(scene.graph.edges)} measurements to {args.out}")
    return EXIT_OK


def cmd_check(args, cfg: AppConfig) -> int:
    E = _measurement_matrix(read_measurements(args.measurements), cfg)
    report = check_essential_consistency(E, args.mode, cfg.tolerances)
    _emit("mode", report.mode)
    _emit("fundamental_ok", report.fundamental_ok)
    _emit("essential_ok", report.essential_ok)
    _emit("pairing_holds", report.eigenvalue_pairing_residual <= cfg.tolerances.pairing_tol)
    _emit("eigenvalue_pairing_residual", report.eigenvalue_pairing_residual)
    _emit("block_rotation_residual", report.block_rotation_residual)
    _emit("fundamental_rank_residual", report.fundamental.rank_residual)
    _emit("best_sign", ",".join(str(s) for s in report.best_sign.signs))
    return EXIT_OK if report.essential_ok else EXIT_INCONSISTENT


def cmd_average(args, cfg: AppConfig) -> int:
    graph = read_measurements(args.measurements)
    E_hat = graph.to_multiview()
    cover = build_cover(graph, cfg.cover, cfg.threads)
    status = EXIT_OK
    try:
        E, trace = solve(E_hat, cover, cfg.admm, cfg.tolerances, cfg.threads)
    except NotConvergedError as exc:
        logger.warning(str(exc))
        E, trace, status = exc.best, exc.trace, exc.exit_code
    recon = reconstruct(E, cover, tol=cfg.tolerances, threads=cfg.threads)
    write_poses(args.out, recon.poses)
    if args.trace:
        write_table(trace, args.trace)
    worst = max(recon.residuals.values(), default=0.0)
    logger.info(f"posed {len(recon.covered_views)}/{graph.n} views from {len(cover.triplets)} triplets "
                f"(max stitch residual {worst:.2e})")
    return status


def cmd_recover(args, cfg: AppConfig) -> int:
    E = _measurement_matrix(read_measurements(args.measurements), cfg)
    poses = recover_poses(E, args.mode, cfg.tolerances)
    write_poses(args.out, poses)
    return EXIT_OK


def cmd_eval(args, cfg: AppConfig) -> int:
    rotation_tol = cfg.tolerances.rotation_tol
    alignment = align_to_reference(read_poses(args.estimate, rotation_tol),
                                   read_poses(args.reference, rotation_tol))
    for key, value in alignment.summary().items():
        _emit(key, value)
    _emit("scale", alignment.similarity.scale)
    if args.table:
        write_table(alignment.to_frame(), args.table)
    return EXIT_OK


def cmd_counterexample(args, cfg: AppConfig) -> int:
    E, report = generate_counterexample(args.seed, cfg.tolerances)
    write_measurements(args.out, ViewingGraph.from_multiview(E))
    _emit("fundamental_ok", report.fundamental_ok)
    _emit("essential_ok", report.essential_ok)
    _emit("eigenvalue_pairing_residual", report.eigenvalue_pairing_residual)
    _emit("block_rotation_residual", report.block_rotation_residual)
    return EXIT_OK


def cmd_bench(args, cfg: AppConfig) -> int:
    report = run_pipeline(generate_scene(_scene_spec(args)), cfg.cover, cfg.admm, cfg.tolerances,
                          baseline=not args.no_baseline, threads=cfg.threads)
    row = report.to_dict()
    for key, value in row.items():
        _emit(key, value)
    if args.csv:
        write_table(pd.DataFrame([row]), args.csv)
    return EXIT_OK


def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, default=10, help="number of views")
    p.add_argument("--layout", choices=LAYOUTS, default="ring")
    p.add_argument("--sigma-r", type=float, default=0.0, help="relative rotation noise (radians)")
    p.add_argument("--sigma-t", type=float, default=0.0, help="translation direction noise (radians)")
    p.add_argument("--sigma-entry", type=float, default=0.0, help="additive entry noise, relative")
    p.add_argument("--scale-pairs", action="store_true", help="random nonzero pairwise scales")
    p.add_argument("--outliers", type=float, default=0.0, help="outlier pair fraction")
    p.add_argument("--missing", type=float, default=0.0, help="missing pair fraction")
    p.add_argument("--seed", type=int, default=0)


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--collinearity-min", type=float, help="minimum triplet angle (radians)")
    p.add_argument("--rotation-max", type=float, help="maximum rotation loop score")
    p.add_argument("--translation-max", type=float, help="maximum angle-sum deviation (radians)")
    p.add_argument("--trees", type=int, help="disjoint spanning trees")
    p.add_argument("--pair-redundancy", type=int, help="covering triplets kept per measured pair while pruning")
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--max-iters", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="averager", description="Multiview essential matrix averaging")
    parser.add_argument("--config", default="averaging.json", help="JSON or YAML configuration file")
    parser.add_argument("--log-level", help="override the configured log level")
    parser.add_argument("--threads", type=int, help="worker threads for parallel steps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic measurement file")
    _add_scene_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="ground-truth pose file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("check", help="consistency test of a fully observed file")
    p.add_argument("measurements")
    p.add_argument("--mode", choices=("strict", "scaled"), default="scaled")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("average", help="cover, average and register")
    p.add_argument("measurements")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="CSV file for the solver trace")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("recover", help="poses from a consistent, fully observed file")
    p.add_argument("measurements")
    p.add_argument("--mode", choices=("strict", "scaled"), default="scaled")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("eval", help="compare an estimate with a reference")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--table", help="CSV file for per-view errors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("counterexample", help="fundamental-consistent but essential-inconsistent triplet")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("bench", help="synthetic end-to-end run")
    _add_scene_flags(p)
    _add_solver_flags(p)
    p.add_argument("--csv", help="CSV file for the report row")
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def _resolve_config(args) -> AppConfig:
    cfg = load_config(args.config)
    if args.log_level:
        cfg.log_level = args.log_level.upper()
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        cfg.threads = args.threads

    cover_updates = {
        "collinearity_min": getattr(args, "collinearity_min", None),
        "rotation_max": getattr(args, "rotation_max", None),
        "translation_max": getattr(args, "translation_max", None),
        "tree_count": getattr(args, "trees", None),
        "pair_redundancy": getattr(args, "pair_redundancy", None),
    }
    admm_updates = {
        "alpha1": getattr(args, "alpha1", None),
        "alpha2": getattr(args, "alpha2", None),
        "max_outer_iters": getattr(args, "max_iters", None),
    }
    try:
        cfg.cover = dataclasses.replace(cfg.cover, **{k: v for k, v in cover_updates.items() if v is not None})
        cfg.admm = dataclasses.replace(cfg.admm, **{k: v for k, v in admm_updates.items() if v is not None})
    except ValueError as e:
        raise UsageError(str(e))
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        set_config(cfg)
        setup_logging(cfg.log_level, cfg.debug)
        return args.func(args, cfg)
    except AveragingError as exc:
        logger.error(f"{args.command} failed: {exc}")
        return exc.exit_code
    except OSError as exc:
        logger.error(f"{args.command}: I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
