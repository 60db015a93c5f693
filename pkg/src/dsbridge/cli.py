"""Command-line entry point: ``dsbridge {gen-data,train,translate,sweep,check}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment
from .bridge import NonFiniteStateError
from .checks import run_checks
from .config import DEFAULTS, Config, ConfigError, parse_ablation
from .coupling import SinkhornConvergenceError
from .datasets import check_name
from .denoiser import TrainingDivergedError
from .estimators import BACKENDS


def _config_epilog():
    lines = ["config keys (file: key=value, env: DSBRIDGE_<SECTION>_<KEY>):"]
    for key, (default, doc) in DEFAULTS.items():
        lines.append(f"  {key + '=' + default:<38} {doc}")
    return "\n".join(lines)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--seed", type=int, help="root seed (run.seed)")
    common.add_argument("--out", metavar="DIR", help="output directory (run.out)")
    common.add_argument("--nfe", type=int, help="evaluation budget (bridge.nfe)")
    common.add_argument("--method", help="lsb, sdedit or dual-bridge (bridge.method)")
    common.add_argument("--ablate", metavar="FLAGS",
                        help="comma-separated components to disable: snr,tdeps,cfg,denoise")
    common.add_argument("--save-trajectory", action="store_true",
                        help="write trajectory.csv on translate")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="dsbridge", description="Decomposed bridge ODE for unpaired 2D translation.",
        epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write seeded source/target point CSVs")
    sub.add_parser("train", parents=[common], help="train the conditional noise model")
    sub.add_parser("translate", parents=[common], help="translate the held-out source batch")
    sub.add_parser("sweep", parents=[common], help="methods x budgets x seeds x ablations")
    sub.add_parser("check", parents=[common], help="run the invariant battery")
    return parser


def load_config(args, environ=None):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    overrides.update({
        "run.seed": args.seed,
        "run.out": args.out,
        "bridge.nfe": args.nfe,
        "bridge.method": args.method,
        "bridge.ablate": args.ablate,
        "bridge.save_trajectory": "true" if args.save_trajectory else None,
    })
    if args.method is not None:
        overrides["sweep.methods"] = args.method
    if args.nfe is not None:
        overrides["sweep.nfe"] = str(args.nfe)
    if args.ablate is not None:
        overrides["sweep.ablations"] = args.ablate
    return Config.load(args.config, environ=environ, overrides=overrides)


def _validate(cfg):
    if cfg.get_int("data.n_train") < 1 or cfg.get_int("data.n_test") < 1:
        raise ConfigError("data.n_train and data.n_test must be >= 1")
    for key in ("data.source", "data.target"):
        try:
            check_name(cfg.get_str(key))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    parse_ablation(cfg.get_str("bridge.ablate"))
    if cfg.get_str("bridge.method") not in experiment.METHODS:
        raise ConfigError(f"bridge.method must be one of {experiment.METHODS}")
    if cfg.get_str("bridge.backend") not in BACKENDS:
        raise ConfigError(f"bridge.backend must be one of {BACKENDS}")
    for m in cfg.get_list("sweep.methods"):
        if m not in experiment.METHODS:
            raise ConfigError(f"sweep.methods: unknown method {m!r}")
    for spec in cfg.get_str("sweep.ablations").split(";"):
        parse_ablation(spec)
    cfg.get_list("sweep.nfe", int)
    cfg.get_list("sweep.seeds", int)
    cfg.get_list("sweep.omega", float)


def run(argv=None, environ=None, stdout=None):
    """Execute one command; returns the process exit status."""
    stdout = sys.stdout if stdout is None else stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args, environ)
        _validate(cfg)
    except (ConfigError, OSError) as exc:
        print(f"dsbridge: error: {exc}", file=sys.stderr)
        return 2
    seed = cfg.get_int("run.seed")
    out = Path(cfg.get_str("run.out"))
    try:
        if args.command == "gen-data":
            experiment.gen_data(cfg, out, seed)
            print(f"wrote {len(experiment.DATA_FILES)} point files to {out}", file=stdout)
        elif args.command == "train":
            _, history = experiment.train_model(cfg, out, seed)
            last = history[-1] if len(history) else float("nan")
            print(f"trained {len(history)} steps, final loss {last:.4f}", file=stdout)
        elif args.command == "translate":
            report = experiment.translate(cfg, out, seed)
            print(_report_line(report), file=stdout)
            return 0 if report.status == "ok" else 1
        elif args.command == "sweep":
            reports = experiment.sweep(cfg, out)
            for r in reports:
                print(_report_line(r), file=stdout)
            return 0 if all(r.status == "ok" for r in reports) else 1
        elif args.command == "check":
            results = run_checks(seed=seed, fault=cfg.get_str("check.fault") or None)
            for r in results:
                print(r.line(), file=stdout)
            return 0 if all(r.passed for r in results) else 1
    except experiment.MissingPrerequisiteError as exc:
        print(f"dsbridge: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, SinkhornConvergenceError, TrainingDivergedError,
            NonFiniteStateError, OSError) as exc:
        print(f"dsbridge: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


def _report_line(r):
    vals = " ".join(f"{k}={v:.4g}" for k, v in r.values.items())
    return (f"{r.method:<12} nfe={r.nfe:<3} omega={r.omega:g} seed={r.seed} "
            f"flags={r.flags} nfe_used={r.nfe_used} {vals} status={r.status}")


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
