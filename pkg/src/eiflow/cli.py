"""Command-line front end: simulate / train / infer / eval / viz.

Every subcommand exits 0 on success; expected failures (missing files, bad
formats, shape mismatches) print a one-line ``error: ...`` diagnostic to
stderr and exit 1.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .events import event_mask, read_events, voxelize
from .evalviz import (compute_report, flow_to_color, read_flo, read_ppm,
                      write_flo, write_ppm, write_report_csv)
from .losses import LossConfig
from .network import Model, ModelConfig, load_checkpoint
from .simdata import SimConfig, load_dataset, make_dataset, save_dataset
from .train import TrainConfig, train_loop

__all__ = ["cli", "entry"]


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h_txt, w_txt = text.lower().split("x")
        h, w = int(h_txt), int(w_txt)
    except ValueError as exc:
        raise ValueError(f"--size expects HxW, got {text!r}") from exc
    if h < 1 or w < 1:
        raise ValueError("--size dimensions must be positive")
    return h, w


def _parse_dt_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ValueError(f"--dt expects comma-separated floats, got {text!r}") from exc
    if not vals:
        raise ValueError("--dt list is empty")
    return vals


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eiflow",
                                description="Event+image optical flow toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--out", required=True, help="output dataset directory")
    sim.add_argument("--count", type=int, required=True, help="number of scenes")
    sim.add_argument("--size", default="64x64", help="frame size HxW")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--dt", default="1.0",
                     help="comma-separated interval fractions per scene")
    sim.add_argument("--vmax", type=float, default=8.0,
                     help="max speed in px/frame")
    sim.add_argument("--patches", type=int, default=2,
                     help="max foreground patches per scene")

    tr = sub.add_parser("train", help="train on a dataset directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--lr", type=float, default=4e-4)
    tr.add_argument("--lambda", dest="lam", type=float, default=100.0)
    tr.add_argument("--iters", type=int, default=6)
    tr.add_argument("--channels", type=int, default=32)
    tr.add_argument("--fusion", choices=("conv", "add"), default="conv")
    tr.add_argument("--ckpt", required=True, help="checkpoint output path")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--log", default=None,
                    help="loss CSV path (default: CKPT.loss.csv)")

    inf = sub.add_parser("infer", help="predict flow for one sample")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--image1", required=True)
    inf.add_argument("--events", required=True)
    inf.add_argument("--dt", type=float, default=1.0,
                     help="fraction of the event window to consume")
    inf.add_argument("--out", required=True, help=".flo output path")

    ev = sub.add_parser("eval", help="score a prediction against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--events", required=True)
    ev.add_argument("--report", required=True, help="CSV output path")

    vz = sub.add_parser("viz", help="render a .flo file as a color wheel PPM")
    vz.add_argument("--flow", required=True)
    vz.add_argument("--out", required=True)
    return p


def _cmd_simulate(args) -> int:
    h, w = _parse_size(args.size)
    cfg = SimConfig(height=h, width=w, velocity_max=args.vmax,
                    max_patches=args.patches, seed=args.seed)
    samples = make_dataset(args.count, cfg, _parse_dt_list(args.dt))
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    samples = [s.to_train_sample() for s in load_dataset(args.data)]
    mcfg = ModelConfig(feature_channels=args.channels, iterations=args.iters,
                       fusion_variant=args.fusion)
    model = Model(mcfg, seed=args.seed)
    log_path = args.log if args.log is not None else f"{args.ckpt}.loss.csv"
    tcfg = TrainConfig(steps=args.steps, lr=args.lr,
                       loss=LossConfig(lam=args.lam, iterations=args.iters),
                       ckpt_path=args.ckpt, log_path=log_path)
    rows = train_loop(model, samples, tcfg)
    final = rows[-1][1] if rows else float("nan")
    print(f"trained {len(rows)} steps; final loss {final:.6f}; "
          f"checkpoint {args.ckpt}; log {log_path}")
    return 0


def _cmd_infer(args) -> int:
    if not 0.0 <= args.dt <= 1.0:
        raise ValueError("--dt must lie in [0, 1]")
    model = load_checkpoint(args.ckpt)
    image1 = read_ppm(args.image1)
    stream = read_events(args.events)
    span = stream.t_end - stream.t_start
    cut = stream.t_start + int(round(args.dt * span))
    clipped = stream.clip(cut)
    vol = voxelize(clipped, bins=model.cfg.event_bins)
    field = model.predict(image1, vol)
    write_flo(args.out, field)
    print(f"used {len(clipped)}/{len(stream)} events; wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    pred = read_flo(args.pred)
    gt = read_flo(args.gt)
    stream = read_events(args.events)
    if (stream.height, stream.width) != pred.shape:
        raise ValueError("event sensor extent does not match prediction")
    report = compute_report(pred, gt, event_mask(stream))
    write_report_csv(args.report, report)
    print(report.csv_row())
    return 0


def _cmd_viz(args) -> int:
    field = read_flo(args.flow)
    write_ppm(args.out, flow_to_color(field))
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {"simulate": _cmd_simulate, "train": _cmd_train,
             "infer": _cmd_infer, "eval": _cmd_eval, "viz": _cmd_viz}


def cli(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(cli(sys.argv[1:]))
