"""Command-line entry point.

Subcommands: train, bench-flops, bench-latency, gradcheck, sweep-ratio,
dump-masks. Every run-producing command takes --config/--seed/--out plus
repeatable --set key=value overrides.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, config as config_mod, reports, scenes, tensorio, trainer
from .errors import ConfigError, SceneInfeasible, TrainingDiverged
from .head import BRANCHES, assign_labels
from .masking import dump_mask


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsehead",
        description="Sparse-convolution detection head: training, benchmarks, diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", type=str, default=None, help="override the output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override any config field (repeatable)")

    common(sub.add_parser("train", help="train a head on synthetic scenes"))

    p = sub.add_parser("bench-flops", help="sparse vs dense MAC accounting on eval scenes")
    p.add_argument("--checkpoint", required=True, help="run directory holding params.bin")
    p.add_argument("--scenes", type=int, default=None, help="number of eval scenes")
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("bench-latency", help="sparse vs dense wall-clock per forward")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--parallel", action="store_true",
                   help="allow BLAS threading (default pins one thread)")
    p.add_argument("--image-h", type=int, default=None, help="bench image height override")
    p.add_argument("--image-w", type=int, default=None, help="bench image width override")
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--dtype", choices=["float32", "float64", "both"], default="both")

    p = sub.add_parser("sweep-ratio", help="train at fixed mask ratios and measure")
    common(p)
    p.add_argument("--ratios", type=str, default="0.5,0.7,0.9,0.95",
                   help="comma-separated fixed mask ratios")

    p = sub.add_parser("dump-masks", help="write per-level mask tensors and heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None, help="eval-scene seed")
    return parser


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if args.overrides:
        cfg = config_mod.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = config_mod.apply_overrides(cfg, [f"seed={args.seed}"])
    if args.out is not None:
        cfg = config_mod.apply_overrides(cfg, [f"out_dir={args.out}"])
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    artifacts = trainer.train(cfg)
    scene_batch = bench.eval_scenes(cfg)
    ratios = bench.measured_activation(artifacts.head, scene_batch)
    print(f"checkpoint: {artifacts.checkpoint_path}")
    print(f"loss csv:   {artifacts.csv_path}")
    for lv, r in enumerate(ratios):
        print(f"level {lv}: activation ratio {r:.4f}")
    return 0


def cmd_bench_flops(args) -> int:
    head, cfg = trainer.load_head(args.checkpoint)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint)
    scene_batch = bench.eval_scenes(cfg, count=args.scenes)
    report = bench.bench_flops(
        head, scene_batch,
        csv_path=out_dir / "flops.csv",
        figure_path=(out_dir / "flops.png") if cfg.figures else None,
    )
    print(f"dense reference MACs: {report.total_dense}")
    print(f"sparse MACs (incl. mask+context): {report.total_sparse}")
    print(f"reduction: {report.reduction_pct:.2f}%")
    print(f"report: {out_dir / 'flops.csv'}")
    return 0


def cmd_bench_latency(args) -> int:
    head, cfg = trainer.load_head(args.checkpoint)
    overrides = []
    if args.image_h:
        overrides.append(f"scene.image_h={args.image_h}")
    if args.image_w:
        overrides.append(f"scene.image_w={args.image_w}")
    if overrides:
        cfg = config_mod.apply_overrides(cfg, overrides)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint)
    reps = args.repetitions if args.repetitions else cfg.bench.repetitions
    scene_batch = bench.eval_scenes(cfg, count=min(cfg.bench.eval_scenes, 4))
    report = bench.bench_latency(
        head, scene_batch, repetitions=reps, warmup=cfg.bench.warmup,
        single_thread=not args.parallel,
        csv_path=out_dir / "latency.csv",
        figure_path=(out_dir / "latency.png") if cfg.figures else None,
    )
    print(f"sparse median: {report.sparse_median:.2f} ms  "
          f"(p10 {report.sparse_p10:.2f}, p90 {report.sparse_p90:.2f})")
    print(f"dense median:  {report.dense_median:.2f} ms  "
          f"(p10 {report.dense_p10:.2f}, p90 {report.dense_p90:.2f})")
    print(f"speedup: {report.speedup:.2f}x")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import gradcheck_suite, suite_threshold

    dtypes = ["float32", "float64"] if args.dtype == "both" else [args.dtype]
    failed = False
    for dtype in dtypes:
        threshold = suite_threshold(dtype)
        print(f"[{dtype}] threshold {threshold:g}")
        for name, err in gradcheck_suite(dtype).items():
            ok = err < threshold
            failed |= not ok
            print(f"  {name:24s} {err:.3e}  {'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_sweep_ratio(args) -> int:
    cfg = _load_config(args)
    try:
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError:
        print(f"cannot parse --ratios {args.ratios!r}", file=sys.stderr)
        return 2
    out_dir = Path(cfg.out_dir)
    rows = []
    activations, macs = [], []
    for r in ratios:
        run_cfg = config_mod.apply_overrides(
            cfg, [f"ratio_mode=fixed:{r}", f"out_dir={out_dir / f'fixed_{r:g}'}"])
        artifacts = trainer.train(run_cfg)
        scene_batch = bench.eval_scenes(run_cfg)
        flops = bench.bench_flops(artifacts.head, scene_batch)
        measured = bench.measured_activation(artifacts.head, scene_batch)
        mean_act = float(np.mean(measured))
        activations.append(mean_act)
        macs.append(flops.total_sparse)
        rows.append([r, 1 - r, mean_act] + [float(v) for v in measured]
                    + [flops.total_sparse, flops.reduction_pct])
        print(f"mask ratio {r:g}: activation {mean_act:.4f}, sparse MACs {flops.total_sparse}")
    header = (["mask_ratio", "target_activation", "mean_activation"]
              + [f"act_L{i}" for i in range(cfg.head.levels)]
              + ["sparse_macs", "reduction_pct"])
    reports.write_csv(out_dir / "sweep.csv", header, rows)
    if cfg.figures:
        reports.sweep_figure(ratios, activations, macs, out_dir / "sweep.png")
    print(f"report: {out_dir / 'sweep.csv'}")
    return 0


def cmd_dump_masks(args) -> int:
    head, cfg = trainer.load_head(args.checkpoint)
    if args.seed is not None:
        cfg = config_mod.apply_overrides(cfg, [f"seed={args.seed}"])
    out_dir = Path(args.out) if args.out else Path(args.checkpoint) / "masks"
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_batch = bench.eval_scenes(cfg, count=1)
    feats, _ = scene_batch[0]
    out = head.forward_infer(feats)
    for lv in range(cfg.head.levels):
        for branch in BRANCHES:
            mask = out.masks[lv][branch]
            tensorio.dump_tensor(out_dir / f"mask_L{lv}_{branch}.ct4", dump_mask(mask))
            if cfg.figures:
                reports.mask_figure(mask.decisions, out_dir / f"mask_L{lv}_{branch}.png")
    print(f"masks written to {out_dir}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "bench-flops": cmd_bench_flops,
    "bench-latency": cmd_bench_latency,
    "gradcheck": cmd_gradcheck,
    "sweep-ratio": cmd_sweep_ratio,
    "dump-masks": cmd_dump_masks,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SceneInfeasible, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
