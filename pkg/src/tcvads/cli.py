"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .distill import optimize_temperature
from .errors import ConfigurationError, TcvadsError
from .interp_conv import ConvDeconvBlock, export_saliency
from .formats import read_features


def _objective(name: str):
    if name == "quadratic":
        return lambda t: (t - 2.5) ** 2
    if name == "w-shaped":
        return lambda t: 2.0 - 0.8 * math.exp(-((t - 1.0) ** 2) / 0.18) - 2.0 * math.exp(-((t - 2.5) ** 2) / 0.18)
    raise ConfigurationError(f"unknown objective {name!r}")


def _frames_for(cfg: pipeline.RunConfig, path):
    s = cfg.saliency
    shape = (s.in_channels, s.height, s.width)
    if path is None:
        rng = np.random.default_rng([cfg.seed, 5])
        return list(rng.uniform(0.0, 1.0, (s.frames,) + shape))
    rows = read_features(path)
    if rows.shape[1] != int(np.prod(shape)):
        raise ConfigurationError(f"frame rows of width {rows.shape[1]} do not fit shape {shape}")
    return [r.reshape(shape) for r in rows]


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for data generation and every training stage")
    common.add_argument("--out", default=".", help="artifact directory")
    common.add_argument("--partitions", type=int, help="row partitions for projections and inference")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (default: <out>/data)")

    p = argparse.ArgumentParser(prog="tcvads", description="two-stage video anomaly detection")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synth", parents=[common], help="write a synthetic dataset to --out")
    sub.add_parser("train-coarse", parents=[common, data], help="train the teacher (model.tcvt)")
    sub.add_parser("distill", parents=[common, data], help="distill into the student (student.tcvt)")
    sub.add_parser("train-fine", parents=[common, data], help="train the fine stage (fine.tcvt)")
    ev = sub.add_parser("eval", parents=[common, data], help="score stored predictions (report.json)")
    ev.add_argument("--predictions", help="predictions JSON-lines (default: <out>/predictions.jsonl)")
    ev.add_argument("--split", default="test")
    run = sub.add_parser("run", parents=[common, data], help="two-stage inference and report")
    run.add_argument("--split", default="test")
    run.add_argument("--require-fine", action="store_true", help="fail when fine.tcvt is missing")
    sal = sub.add_parser("saliency", parents=[common], help="export per-frame saliency CSVs")
    sal.add_argument("--frames", help="feature file whose rows are flattened frames")
    sal.add_argument("--channel", type=int, help="output channel to differentiate")
    bo = sub.add_parser("bo-trace", parents=[common, data], help="temperature search trace (bo_trace.csv)")
    bo.add_argument("--objective", choices=["distill", "quadratic", "w-shaped"], default="distill")
    return p


def _config(args) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig.load(args.config) if args.config else pipeline.RunConfig.default()
    return cfg.with_overrides(seed=args.seed, partitions=args.partitions)


def dispatch(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    data = Path(args.data) if getattr(args, "data", None) else out / "data"
    cmd = args.command
    if cmd == "gen-synth":
        entries = pipeline.gen_synth_command(cfg, out)
        print(f"wrote {len(entries)} videos to {out}")
    elif cmd == "train-coarse":
        _, history = pipeline.train_coarse_command(cfg, data, out)
        print(f"teacher trained, final loss {history[-1]:.6f}")
    elif cmd == "distill":
        result = pipeline.distill_command(cfg, data, out)
        print(f"student trained at T={result.t_opt:.4f}, final loss {result.history[-1]:.6f}")
    elif cmd == "train-fine":
        _, history = pipeline.train_fine_command(cfg, data, out)
        print(f"fine stage trained, final loss {history[-1]:.6f}")
    elif cmd == "eval":
        ds = pipeline.load_dataset(data)
        preds = pipeline.read_predictions(args.predictions or out / pipeline.PREDICTIONS_FILE)
        report = pipeline.eval_command(ds.select(args.split), preds, cfg, ds.classes.normal)
        out.mkdir(parents=True, exist_ok=True)
        pipeline.write_report(out / pipeline.REPORT_FILE, report)
        _print_json(report)
    elif cmd == "run":
        report, calls = pipeline.run_command(cfg, data, out, args.split, not args.require_fine)
        _print_json(report)
        print(f"fine stage invoked on {calls} videos")
    elif cmd == "saliency":
        s = cfg.saliency
        block = ConvDeconvBlock.random(s.in_channels, s.mid_channels, s.out_channels, s.kernel_size, cfg.seed)
        channel = s.output_channel if args.channel is None else args.channel
        paths = export_saliency(block, _frames_for(cfg, args.frames), out, channel)
        print(f"wrote {len(paths)} saliency maps to {out}")
    elif cmd == "bo-trace":
        if args.objective == "distill":
            t_opt, _ = pipeline.bo_trace_command(cfg, data, out)
        else:
            t_opt, trace = optimize_temperature(_objective(args.objective), cfg.bo)
            out.mkdir(parents=True, exist_ok=True)
            pipeline.write_trace(out / pipeline.TRACE_FILE, trace)
        print(f"T_opt = {t_opt:.4f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except TcvadsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
