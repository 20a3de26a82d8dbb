"""Command-line interface.

Subcommands: synth, train, refine, eval, bench, gradcheck, heatmap.
Exit codes: 0 success, 1 validation/usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import Config, load_config, save_config
from .correlation import emit_heatmap, write_pgm, to_gray_u8
from .errors import G2SLocError, NumericError
from .geometry import Pose3DoF
from .metrics import compute_metrics, write_metrics_csv
from .model import init_model, load_model
from .optimizer import RefineSchedule, export_trace_csv, refine
from .synthdata import make_dataset, write_manifest
from .tensorcore import io as tensor_io
from .training import estimate_pose, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "deterministic", False):
        from dataclasses import replace

        cfg = replace(cfg, deterministic=True)
    return cfg


def _input_theta(cfg: Config, theta_rad: float) -> float:
    return -theta_rad if cfg.theta_convention == "cw" else theta_rad


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    records = make_dataset(args.count, cfg.noise_spec(), seed=cfg.seed,
                           cfg=cfg.scene_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        write_pgm(out / f"ground_{i:04d}.pgm", to_gray_u8(rec.ground))
        write_pgm(out / f"satellite_{i:04d}.pgm", to_gray_u8(rec.satellite))
    write_manifest(out / "manifest.csv", records)
    save_config(out / "config.txt", cfg)
    print(f"wrote {len(records)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    records = make_dataset(args.count, cfg.noise_spec(), seed=cfg.seed,
                           cfg=cfg.scene_config())
    result = train(records, cfg, out_dir=args.out, log_every=args.log_every)
    print(f"trained {len(result.history)} steps; checkpoint at {result.checkpoint_dir}")
    return 0


def cmd_refine(args) -> int:
    cfg = _load_cfg(args)
    records = make_dataset(1, cfg.noise_spec(), seed=cfg.seed, cfg=cfg.scene_config())
    record = records[0]
    if args.checkpoint:
        model, _ = load_model(args.checkpoint, cfg)
    else:
        model = init_model(cfg)
    schedule = RefineSchedule(levels=tuple(range(1, cfg.levels + 1)),
                              iterations=cfg.iterations)
    result = refine(record.ground, record.satellite, record.prior_pose, schedule,
                    model.synthesis, model.optimizer, record.cam, record.sat_meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_trace_csv(out / "trace.csv", result.trace)
    pose, prob = estimate_pose(record, model, cfg)
    emit_heatmap(prob, out / "heatmap.pgm")
    print(
        f"prior theta {record.prior_pose.theta_deg:.2f} deg -> refined "
        f"{pose.theta_deg:.2f} deg (gt {record.gt_pose.theta_deg:.2f}); "
        f"t = ({pose.t_x:.2f}, {pose.t_z:.2f}) m; trace + heatmap in {out}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    records = make_dataset(args.count, cfg.noise_spec(), seed=cfg.seed,
                           cfg=cfg.scene_config())
    if args.checkpoint:
        model, _ = load_model(args.checkpoint, cfg)
        estimates = [estimate_pose(r, model, cfg)[0] for r in records]
        mode = "learned"
    else:
        estimates = []
        for record in records:
            pose = bench.identity_estimate(record, cfg.noise_theta_deg,
                                           window_m=cfg.search_window_m)
            estimates.append(pose)
        mode = "identity"
    report = compute_metrics(estimates, [r.gt_pose for r in records])
    write_metrics_csv(args.out, report, extra={"mode": mode})
    print(f"[{mode}] azimuth recall @1deg: {report.azimuth_recall[1.0]:.2f}%  "
          f"median location error: {report.median_error_m:.3f} m -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep in ("noise", "all"):
        rows = bench.sweep_rotation_noise(out / "sweep_noise.csv",
                                          n_samples=args.samples, seed=args.seed)
        print(f"noise sweep: {len(rows)} rows -> {out / 'sweep_noise.csv'}")
    if args.sweep in ("range", "all"):
        rows = bench.sweep_search_range(out / "sweep_range.csv",
                                        n_samples=args.samples, seed=args.seed)
        print(f"range sweep: {len(rows)} rows -> {out / 'sweep_range.csv'}")
    if args.sweep in ("iterations", "all"):
        rows = bench.sweep_iterations(out / "sweep_iterations.csv",
                                      n_samples=max(4, args.samples // 2), seed=args.seed)
        print(f"iteration sweep: {len(rows)} rows -> {out / 'sweep_iterations.csv'}")
    if args.sweep in ("ablation", "all"):
        rows = bench.ablation_runs(out / "ablations.csv", seed=args.seed)
        print(f"ablations: {len(rows)} rows -> {out / 'ablations.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(seeds=tuple(range(args.seeds)), verbose=args.verbose)
    failures = [r for r in results if not r.passed]
    print(f"{len(results)} checks, {len(failures)} failures")
    if failures:
        for f in failures:
            print(f"FAILED: {f.name} seed {f.seed}")
        raise NumericError("gradient checks failed")
    return 0


def cmd_heatmap(args) -> int:
    values = tensor_io.load_tensor(args.tensor)
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 2:
        raise G2SLocError(f"heatmap needs a 2-D tensor, got shape {values.shape}")
    emit_heatmap(values, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="g2sloc",
                     description="3-DoF ground-to-satellite pose refinement toolkit")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--deterministic", action="store_true",
                        help="force the deterministic execution mode")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the full pipeline on synthetic pairs")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="refine one synthetic pair; emit trace + heatmap")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="compute localization metrics")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run benchmark sweeps / ablations")
    p.add_argument("--sweep", choices=("noise", "range", "iterations", "ablation", "all"),
                   default="all")
    p.add_argument("--samples", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every op")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", help="render a stored tensor as PGM/PNG")
    p.add_argument("--tensor", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage()
            return 1
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except G2SLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
