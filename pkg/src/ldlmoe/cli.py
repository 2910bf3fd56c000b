"""Command-line entry point: ``ldlmoe {synth,enhance,train,eval,decompose}``.

Exit codes: 0 success, 1 usage/config error, 2 data error (unreadable or
malformed input, impossible split, non-finite training loss).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._alloc import tune_allocator
from .enhance import EnhanceError, discretize, EnhanceConfig
from .experts import ConfigError
from .series import SeriesError, read_csv
from .synth import SpecError, SynthSpec, suite_spec, synth, write_csv

CONFIG_ENV = "LDLMOE_CONFIG"
EXIT_USAGE, EXIT_DATA = 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_train_config(args):
    from .trainer import TrainConfig
    path = args.config or os.environ.get(CONFIG_ENV)
    try:
        cfg = TrainConfig.load(path) if path else TrainConfig()
        d = cfg.to_dict()
        if getattr(args, "seed", None) is not None:
            d["seed"] = args.seed
        if getattr(args, "model", None):
            d["model"] = args.model
        if getattr(args, "mode", None):
            d["expert"]["mode"] = args.mode
        return TrainConfig.from_dict(d)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    except (TypeError, ConfigError, EnhanceError) as exc:
        raise UsageError(f"bad config {path or '(defaults)'}: {exc}") from None


def _series(args):
    if not args.data:
        raise UsageError("--data is required")
    try:
        return read_csv(args.data)
    except FileNotFoundError:
        raise SeriesError(f"data file not found: {args.data}") from None


def _require(args, *names):
    for n in names:
        if not getattr(args, n):
            raise UsageError(f"--{n} is required")


# ----------------------------------------------------------------- commands

def cmd_synth(args):
    _require(args, "out")
    if args.config:
        try:
            spec = SynthSpec.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"bad synth spec {args.config}: {exc}") from None
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = suite_spec(args.seed or 0)
    write_csv(synth(spec), args.out)
    return 0


def cmd_enhance(args):
    from .trainer import prepare
    _require(args, "out")
    cfg = _load_train_config(args)
    series = _series(args)
    prep = prepare(series, cfg)
    enh, sc = prep.enhancement, prep.scaler
    sd = sc.std[sc.target]
    cols = ["series_id", "t", "y", "variance"]
    dcfg = None
    if cfg.expert.mode == "discrete":
        dcfg = EnhanceConfig(n_bins=cfg.expert.n_bins, bin_range=cfg.expert.bin_range)
        cols += [f"p_{k}" for k in range(dcfg.n_bins)]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in series:
            n = len(s) - cfg.test_len
            off = enh.offsets[s.id]
            var = enh.variance[off:off + n]
            probs = None
            if dcfg is not None:
                probs, _ = discretize(sc.transform_target(s.y[:n]), var, dcfg)
            for i in range(n):
                row = [s.id, int(s.timestamps[i]), repr(float(s.y[i])), repr(float(var[i] * sd * sd))]
                if probs is not None:
                    row += [repr(float(p)) for p in probs[i]]
                w.writerow(row)
    periods = {sid: (None if p is None else {"period": p[0], "acf": p[1]})
               for sid, p in enh.periods.items()}
    print(json.dumps({"periods": periods, "kappa": prep.kappa}, sort_keys=True))
    return 0


def cmd_train(args):
    from .trainer import save_checkpoint, train
    _require(args, "out")
    cfg = _load_train_config(args)
    series = _series(args)
    ckpt, report = train(series, cfg)
    save_checkpoint(ckpt, args.out)
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    Path(report_path).write_text(report.to_json(), encoding="utf-8")
    return 0


def _checkpoint(args):
    from .trainer import load_checkpoint
    _require(args, "checkpoint")
    try:
        return load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise SeriesError(f"checkpoint not found: {args.checkpoint}") from None


def cmd_eval(args):
    from .trainer import evaluate, held_out, metrics_json
    _require(args, "checkpoint", "data")
    ckpt = _checkpoint(args)
    series = _series(args)
    metrics = evaluate(ckpt, held_out(series, ckpt.train_config))
    text = metrics_json(metrics)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_decompose(args):
    from .pattern import decompose_rows, write_report
    from .trainer import build_windows
    _require(args, "out", "checkpoint", "data")
    ckpt = _checkpoint(args)
    if ckpt.model.kind != "pattern_aware":
        raise UsageError(f"decompose needs a pattern_aware checkpoint, got {ckpt.model.kind}")
    series = _series(args)
    c = ckpt.model.config
    ds = build_windows(series, c.window, c.horizon)
    sc = ckpt.scaler
    lookup = {s.id: s.timestamps for s in series}
    times = np.array([lookup[sid][st] for sid, st in zip(ds.series_ids, ds.target_starts)])
    rows = decompose_rows(ckpt.model, (ds.inputs - sc.mean) / sc.std, ds.targets, times, sc)
    write_report(rows, args.out)
    return 0


COMMANDS = {"synth": cmd_synth, "enhance": cmd_enhance, "train": cmd_train, "eval": cmd_eval,
            "decompose": cmd_decompose}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldlmoe", description="Distributional time-series forecasting with mixtures of experts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {"synth": "write a synthetic series with ground-truth components",
             "enhance": "write smoothed per-step target variances for a dataset",
             "train": "train a model and write a checkpoint plus a JSON report",
             "eval": "print held-out metrics (JSON) for a checkpoint",
             "decompose": "write the per-component forecast table of a pattern-aware model"}
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", help=f"JSON config (default: ${CONFIG_ENV}); a synth spec for 'synth'")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output path")
        if name != "synth":
            sp.add_argument("--data", help="input CSV (columns: [series_id,] [t,] [f_*,] y)")
        if name in ("enhance", "train"):
            sp.add_argument("--model", choices=["multi_expert", "pattern_aware", "point_lstm"])
            sp.add_argument("--mode", choices=["continuous", "discrete"])
        if name == "train":
            sp.add_argument("--report", help="report path (default: <out>.report.json)")
        if name in ("eval", "decompose"):
            sp.add_argument("--checkpoint", help="checkpoint written by 'train'")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    from .trainer import TrainingError
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"ldlmoe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SeriesError, SpecError, EnhanceError, TrainingError, ValueError) as exc:
        print(f"ldlmoe {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
