"""pncc-sr command line.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
Set PNSR_LOG to error, warn, info or debug to control logging on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import plots
from .errors import EmptyInputError, FormatError, NumericError, StateError
from .io_formats import (
    read_checkpoint,
    read_depth16,
    read_intrinsics,
    read_pncc48,
    write_checkpoint,
    write_depth16,
    write_intrinsics,
    write_pncc48,
    write_ply,
)
from .metrics import bench, write_jsonl
from .pipeline import ablate, evaluate, predict
from .pncc import DEFAULT_S, decode_depth, decode_pointcloud, encode
from .resample import SCALES, make_lr_pair
from .srnet import HEAD_MODES, INPUT_MODES, TrainConfig, config_dict, init_model, param_count, train
from .synthdata import build_dataset, from_manifest, manifest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _scale(text: str) -> int:
    try:
        r = int(text)
    except ValueError:
        r = None
    if r not in SCALES:
        raise argparse.ArgumentTypeError(
            f"scale must be one of {', '.join(map(str, SCALES))}; other factors are not supported (see README)")
    return r


def _positive(kind):
    def parse(text):
        try:
            val = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if val <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return val
    return parse


def _seed(text: str) -> int:
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return val


def _existing(text: str) -> Path:
    p = Path(text)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return p


# ----------------------------------------------------------- arguments


def _common(p, out_help="output directory"):
    p.add_argument("--seed", type=_seed, default=0, help="random seed (unsigned 64-bit)")
    p.add_argument("--threads", type=_positive(int), default=None,
                   help="cap on BLAS worker threads; results do not depend on it")
    p.add_argument("--out", required=True, help=out_help)


def _scene_args(p, n_default):
    p.add_argument("--scenes", type=_positive(int), default=n_default, help="number of synthetic scenes")
    p.add_argument("--width", type=_positive(int), default=128, help="HR width in pixels")
    p.add_argument("--height", type=_positive(int), default=96, help="HR height in pixels")
    p.add_argument("--s", type=_positive(float), default=DEFAULT_S, help="global scale factor s in meters")
    p.add_argument("--manifest", type=_existing, default=None,
                   help="regenerate scenes from a synth manifest instead of --seed/--scenes")


def _model_args(p):
    p.add_argument("--head", choices=HEAD_MODES, default="z", help="network output: full XYZ or Z only")
    p.add_argument("--input", choices=INPUT_MODES, default="pncc", help="network input: PNCC or raw depth")
    p.add_argument("--channels", type=_positive(int), default=32, help="hidden feature channels")
    p.add_argument("--layers", type=_positive(int), default=6, help="number of conv layers")


def _train_args(p):
    p.add_argument("--epochs", type=_positive(int), default=20, help="training epochs")
    p.add_argument("--lr", type=_positive(float), default=1e-3, help="Adam learning rate")
    p.add_argument("--batch-size", type=_positive(int), default=8, help="crops per minibatch")
    p.add_argument("--patch", type=_positive(int), default=64, help="LR crop size in pixels (clipped to the image)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pncc-sr", description="Depth super-resolution through PNCC images.",
                     epilog="Set PNSR_LOG=error|warn|info|debug for logging. "
                            "Exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render synthetic HR depth scenes")
    _common(p)
    p.add_argument("--scenes", type=_positive(int), default=8, help="number of scenes")
    p.add_argument("--scale", type=_scale, default=4, help="SR factor recorded in the manifest (4, 8 or 16)")
    p.add_argument("--width", type=_positive(int), default=128, help="HR width in pixels")
    p.add_argument("--height", type=_positive(int), default=96, help="HR height in pixels")
    p.add_argument("--dropout", type=float, default=0.002, help="fraction of pixels invalidated")
    p.add_argument("--s", type=_positive(float), default=DEFAULT_S, help="global scale factor s in meters")

    p = sub.add_parser("make-lr", help="bicubic-downsample a depth map and min-pool its mask")
    _common(p)
    p.add_argument("--depth", type=_existing, required=True, help="HR depth16 PGM")
    p.add_argument("--intrinsics", type=_existing, required=True, help="HR intrinsics JSON")
    p.add_argument("--scale", type=_scale, default=4, help="downsampling factor (4, 8 or 16)")

    p = sub.add_parser("encode", help="depth16 PGM to PNCC48 PPM plus sidecar")
    _common(p, "output PPM path; the sidecar is written next to it")
    p.add_argument("--depth", type=_existing, required=True, help="depth16 PGM")
    p.add_argument("--intrinsics", type=_existing, required=True, help="intrinsics JSON")
    p.add_argument("--s", type=_positive(float), default=DEFAULT_S, help="global scale factor s in meters")

    p = sub.add_parser("decode-depth", help="PNCC48 image back to a depth16 PGM")
    _common(p, "output PGM path")
    p.add_argument("--pncc", type=_existing, required=True, help="PNCC48 PPM with sidecar")

    p = sub.add_parser("decode-cloud", help="PNCC48 image to an ASCII PLY point cloud")
    _common(p, "output PLY path")
    p.add_argument("--pncc", type=_existing, required=True, help="PNCC48 PPM with sidecar")

    p = sub.add_parser("train", help="train the SR network on synthetic pairs")
    _common(p)
    _scene_args(p, 48)
    p.add_argument("--scale", type=_scale, default=4, help="SR factor (4, 8 or 16)")
    _model_args(p)
    _train_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the bicubic baseline")
    _common(p)
    _scene_args(p, 32)
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint", type=_existing, help="trained model checkpoint")
    who.add_argument("--baseline", choices=["bicubic"], help="evaluate a non-learned baseline")
    p.add_argument("--scale", type=_scale, default=None, help="SR factor; defaults to the checkpoint's, else 4")
    p.add_argument("--timing", action="store_true", help="record per-frame wall-clock time (breaks byte equality)")

    p = sub.add_parser("bench", help="time encode, SR and decode per frame")
    _common(p)
    _scene_args(p, 4)
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint", type=_existing, help="trained model checkpoint")
    who.add_argument("--baseline", choices=["bicubic"], help="time a non-learned baseline")
    p.add_argument("--scale", type=_scale, default=None, help="SR factor; defaults to the checkpoint's, else 4")
    p.add_argument("--reps", type=_positive(int), default=5, help="timed repetitions per frame")
    p.add_argument("--warmup", type=int, default=1, help="untimed warmup runs per frame")

    p = sub.add_parser("ablate", help="train and compare {XYZ, Z} x {PNCC, DEPTH}")
    _common(p)
    p.add_argument("--scale", type=_scale, default=4, help="SR factor (4, 8 or 16)")
    p.add_argument("--train-scenes", type=_positive(int), default=16, help="training scenes")
    p.add_argument("--eval-scenes", type=_positive(int), default=8, help="held-out scenes")
    p.add_argument("--width", type=_positive(int), default=64, help="HR width in pixels")
    p.add_argument("--height", type=_positive(int), default=48, help="HR height in pixels")
    p.add_argument("--s", type=_positive(float), default=DEFAULT_S, help="global scale factor s in meters")
    p.add_argument("--channels", type=_positive(int), default=16, help="hidden feature channels")
    p.add_argument("--layers", type=_positive(int), default=4, help="number of conv layers")
    _train_args(p)
    return parser


# ------------------------------------------------------------ commands


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, r):
    if args.manifest is not None:
        doc = json.loads(args.manifest.read_text())
        if int(doc["r"]) != r:
            raise ValueError(f"manifest {args.manifest} was built for x{doc['r']}, not x{r}")
        return from_manifest(doc)
    return build_dataset(args.scenes, r, args.seed, args.width, args.height, args.s)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_synth(args):
    if not 0 <= args.dropout < 1:
        raise UsageError("--dropout must be in [0, 1)")
    out = _outdir(args.out)
    samples = build_dataset(args.scenes, args.scale, args.seed, args.width, args.height, args.s, args.dropout)
    paths = []
    for i, s in enumerate(samples):
        entry = {"depth": f"scene{i:04d}.pgm", "intrinsics": f"scene{i:04d}.json"}
        write_depth16(out / entry["depth"], s.hr_depth)
        write_intrinsics(out / entry["intrinsics"], s.hr_intr)
        paths.append(entry)
    doc = manifest(samples, args.scale, args.seed, args.s, paths)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} scenes to {out}")


def cmd_make_lr(args):
    hr = read_depth16(args.depth)
    intr = read_intrinsics(args.intrinsics)
    lr, lr_intr = make_lr_pair(hr, intr, args.scale)
    out = _outdir(args.out)
    write_depth16(out / "lr.pgm", lr)
    write_intrinsics(out / "lr.json", lr_intr)
    print(f"wrote {lr.width}x{lr.height} depth to {out}")


def cmd_encode(args):
    p = encode(read_depth16(args.depth), read_intrinsics(args.intrinsics), args.s)
    write_pncc48(args.out, p)


def cmd_decode_depth(args):
    write_depth16(args.out, decode_depth(read_pncc48(args.pncc)))


def cmd_decode_cloud(args):
    write_ply(args.out, decode_pointcloud(read_pncc48(args.pncc)))


def cmd_train(args):
    data = _dataset(args, args.scale)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                      r=args.scale, head_mode=args.head, input_mode=args.input, patch=args.patch)
    model = init_model(args.head, args.input, args.scale, args.channels, args.layers, seed=args.seed)
    model, losses = train(model, data, cfg)
    out = _outdir(args.out)
    write_checkpoint(out / "model.ckpt", model, config_dict(cfg))
    _write_csv(out / "loss.csv", ["epoch", "loss"], [(i + 1, repr(v)) for i, v in enumerate(losses)])
    plots.loss_curve(out / "loss.png", losses)
    print(f"final loss {losses[-1]:.6g}; checkpoint {out / 'model.ckpt'}")


def _load_model(args):
    if args.checkpoint is None:
        return None, args.scale or 4
    model, _ = read_checkpoint(args.checkpoint)
    if args.scale is not None and args.scale != model.r:
        raise ValueError(f"checkpoint {args.checkpoint} is x{model.r}, --scale asked for x{args.scale}")
    return model, model.r


def cmd_eval(args):
    model, r = _load_model(args)
    data = _dataset(args, r)
    label = "bicubic" if model is None else "model"
    reports = evaluate(model, data, r, timing=args.timing, label=label)
    out = _outdir(args.out)
    write_jsonl(out / "eval.jsonl", reports)
    plots.eval_frames(out / "eval.png", reports[:-1], f"{label} x{r}")
    agg = reports[-1]
    print(f"{label}: rmse {agg.rmse:.4f} cm, chamfer {agg.chamfer:.6f} m over {agg.n_frames} frames")


def cmd_bench(args):
    model, r = _load_model(args)
    data = _dataset(args, r)
    frames = []
    for i, s in enumerate(data):
        st = bench(lambda s=s: decode_depth(predict(model, s, r)), args.warmup, args.reps)
        frames.append({"frame": i, "median_s": st.median_s, "mean_s": st.mean_s, "cv": st.cv})
    per_frame = sorted(f["median_s"] for f in frames)[len(frames) // 2]
    doc = {
        "param_count": 0 if model is None else param_count(model),
        "time_per_frame_s": per_frame,
        "frames": frames,
        "scale": r,
        "resolution": [data[0].hr.width, data[0].hr.height] if data else None,
    }
    out = _outdir(args.out)
    (out / "bench.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(f"{per_frame:.4f} s per frame, {doc['param_count']} parameters")


def ablation_table(rows) -> str:
    lines = [f"{'head':<5} {'input':<6} {'rmse_cm':>10} {'chamfer':>10} {'bicubic':>10} {'params':>8}"]
    for r in rows:
        lines.append(f"{r.head.upper():<5} {r.input.upper():<6} {r.rmse_cm:>10.4f} {r.chamfer:>10.6f} "
                     f"{r.bicubic_rmse_cm:>10.4f} {r.params:>8d}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                      r=args.scale, patch=args.patch)
    rows = ablate(args.scale, args.train_scenes, args.eval_scenes, cfg, args.width, args.height,
                  args.channels, args.layers, args.s)
    out = _outdir(args.out)
    fields = list(rows[0].to_json())
    _write_csv(out / "ablation.csv", fields,
               [[repr(v) if isinstance(v, float) else v for v in r.to_json().values()] for r in rows])
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    plots.ablation_bars(out / "ablation.png", rows)
    print(table, end="")


COMMANDS = {
    "synth": cmd_synth,
    "make-lr": cmd_make_lr,
    "encode": cmd_encode,
    "decode-depth": cmd_decode_depth,
    "decode-cloud": cmd_decode_cloud,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def _setup_logging() -> None:
    name = os.environ.get("PNSR_LOG", "warn").lower()
    logging.basicConfig(level=_LEVELS.get(name, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with threadpool_limits(args.threads):
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, EmptyInputError, StateError, ValueError, OSError, KeyError) as exc:
        print(f"data error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def run() -> None:
    sys.exit(main())
