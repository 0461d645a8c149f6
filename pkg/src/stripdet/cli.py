"""Command-line entry point.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analyzer
from .io import (
    ConfigError,
    RunConfig,
    WeightFileError,
    format_detections,
    load_run_config,
    load_weights,
    parse_run_config,
    read_kitti_bin,
    save_weights,
)
from .model import forward, init_params, param_shapes, predict
from .synth import rng_streams, synth_scene

DEFAULT_KS = "3,7,11,21"


def _notice(msg: str) -> None:
    print(msg, file=sys.stderr)


class UsageError(Exception):
    pass


def _config(path, preset: str = "reference") -> RunConfig:
    if path is None:
        _notice(f"notice: no --config given, using the {preset} preset")
        return parse_run_config({"preset": preset}, notice=lambda _: None)
    return load_run_config(path, notice=_notice)


def _k_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# subcommands

def cmd_analyze(args) -> int:
    run = _config(args.config)
    report = analyzer.analyze(run.model, args.bev_h, args.bev_w)
    print(analyzer.format_table(report))
    if args.report:
        Path(args.report).write_text(analyzer.report_csv(report))
    if args.figure:
        from .plotting import plot_layer_costs

        plot_layer_costs(report, args.figure)
    return 0


def cmd_scaling(args) -> int:
    run = _config(args.config)
    rep = analyzer.scaling_study(run.model, args.k)
    print(analyzer.format_scaling(rep))
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "strip_params", "full_params", "strip_macs", "full_macs"])
            w.writerows(rep.rows())
    if args.figure:
        from .plotting import plot_scaling

        plot_scaling(rep, args.figure)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    seeds = [args.seed] if args.seed is not None else list(range(args.seeds))
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    failed = []
    for res in run_suite(seeds):
        worst[res.name] = max(worst.get(res.name, 0.0), res.error)
        if not res.passed:
            failed.append(res)
    for name, err in worst.items():
        print(f"{name:<24} {err:.3e} {'ok' if err <= TOLERANCE else 'FAIL'}")
    elapsed = time.perf_counter() - t0
    print(f"{len(worst)} cases x {len(seeds)} seed(s), max error {max(worst.values()):.3e}, {elapsed:.1f}s")
    if failed:
        for res in failed:
            print(f"error: {res.name} seed {res.seed}: relative error {res.error:.3e} > {TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


def _resolve(flag_value, config_value, flag: str, key: str):
    value = flag_value if flag_value is not None else config_value
    if value is None:
        raise UsageError(f"{flag} is required (or set paths.{key} in the config)")
    return value


def _sample(names: list[str], n: int = 3) -> str:
    if not names:
        return ""
    more = ", ..." if len(names) > n else ""
    return f": {', '.join(names[:n])}{more}"


def _load_params(run: RunConfig, weights: str | None):
    cfg = run.model
    if weights is None:
        _notice(f"notice: no weights given, using seeded random initialisation (seed {run.seed})")
        return init_params(cfg, rng_streams(run.seed)["init"])
    params = load_weights(weights)
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise WeightFileError(
            f"{weights}: tensors do not match the config "
            f"({len(missing)} missing{_sample(missing)}, {len(extra)} unexpected{_sample(extra)})"
        )
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise WeightFileError(f"{weights}: tensor {name!r} has shape {params[name].shape}, expected {shape}")
    return params


def cmd_infer(args) -> int:
    run = _config(args.config)
    points = _resolve(args.points, run.points, "--points", "points")
    out = _resolve(args.out, run.output, "--out", "output")
    params = _load_params(run, args.weights if args.weights is not None else run.weights)
    pc = read_kitti_bin(points)
    dets = predict(pc, run.model, params) if len(pc) else []
    Path(out).write_text(format_detections(dets))
    print(f"{len(dets)} detection(s) written to {out}")
    return 0


def cmd_train_toy(args) -> int:
    from .train import train_toy

    run = _config(args.config, preset="toy")
    settings = run.train
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be positive")
        settings = replace(settings, steps=args.steps)
    seed = run.seed if args.seed is None else args.seed
    every = max(1, args.print_every)
    print("step,total,cls,bbox,dir")

    def report(step, loss, comps):
        if step % every == 0 or step == settings.steps - 1:
            print(f"{step + 1},{loss:.6g},{comps[0]:.6g},{comps[1]:.6g},{comps[2]:.6g}", flush=True)

    result = train_toy(run.model, settings, seed, callback=report)
    first, last = result.losses[0], result.losses[-1]
    print(f"loss: first {first:.6g}, final {last:.6g}, ratio {last / first:.4g}")
    for i, (gt, iou) in enumerate(zip(result.gt_boxes, result.matches())):
        print(f"gt {i}: x={gt.x:.3f} y={gt.y:.3f} yaw={gt.yaw:.3f} best IoU {iou:.4f}")
    print(f"{len(result.detections)} detection(s) after NMS")
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "total", "cls", "bbox", "dir"])
            for i, (loss, comps) in enumerate(zip(result.losses, result.components)):
                w.writerow([i + 1, f"{loss:.9g}", *(f"{c:.9g}" for c in comps)])
    if args.figure:
        from .plotting import plot_loss_curve

        plot_loss_curve(result.losses, args.figure, result.components)
    if args.save_weights:
        save_weights(result.params, args.save_weights)
    return 0


def cmd_bench(args) -> int:
    if args.repeats < 1 or args.warmup < 0:
        raise UsageError("--repeats must be positive and --warmup non-negative")
    run = _config(args.config)
    cfg = run.model
    params = init_params(cfg, rng_streams(run.seed)["init"])
    pc, _ = synth_scene(run.seed, args.boxes, cfg.grid)
    times = []
    for i in range(args.warmup + args.repeats):
        t0 = time.perf_counter()
        forward(pc, cfg, params)
        dt = time.perf_counter() - t0
        if i >= args.warmup:
            times.append(dt)
    arr = np.array(times)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    print(f"grid {cfg.grid.height}x{cfg.grid.width}, {len(pc)} points, {args.repeats} run(s)")
    print(f"forward mean {arr.mean():.4f}s std {std:.4f}s")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stripdet", description="Strip-attention pillar detector toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    a = sub.add_parser("analyze", help="per-layer parameter and MAC table")
    a.add_argument("--config")
    a.add_argument("--bev-h", type=int)
    a.add_argument("--bev-w", type=int)
    a.add_argument("--report", help="write per-layer CSV (name,params,macs)")
    a.add_argument("--figure", help="write a per-stage cost figure")

    s = sub.add_parser("scaling", help="strip pair vs full kernel cost growth")
    s.add_argument("--config")
    s.add_argument("--k", type=_k_list, default=_k_list(DEFAULT_KS), help=f"odd kernel sizes (default {DEFAULT_KS})")
    s.add_argument("--report", help="write the table as CSV")
    s.add_argument("--figure", help="write a log-log scaling figure")

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, help="run a single seed")
    g.add_argument("--seeds", type=int, default=10, help="number of seeds when --seed is absent (default 10)")

    i = sub.add_parser("infer", help="detect objects in a KITTI .bin scan")
    i.add_argument("--config")
    i.add_argument("--weights")
    i.add_argument("--points")
    i.add_argument("--out")

    t = sub.add_parser("train-toy", help="overfit one synthetic scene")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--print-every", type=int, default=25)
    t.add_argument("--loss-csv", help="write the full loss curve as CSV")
    t.add_argument("--figure", help="write a loss-curve figure")
    t.add_argument("--save-weights")

    b = sub.add_parser("bench", help="time forward passes")
    b.add_argument("--config")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--boxes", type=int, default=4, help="cars in the synthetic benchmark scene")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    handlers = {
        "analyze": cmd_analyze,
        "scaling": cmd_scaling,
        "gradcheck": cmd_gradcheck,
        "infer": cmd_infer,
        "train-toy": cmd_train_toy,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stripdet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, WeightFileError, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
