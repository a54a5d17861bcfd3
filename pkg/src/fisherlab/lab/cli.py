"""Command-line entry point: ``fisherlab <subcommand> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..curvature import HvpConfig, empirical_fisher_trace, tr_f_mc, tr_h_hutchinson
from ..nets import ModelOracle
from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_assignments, stream_seed
from .experiments import (
    DELAYED_STARTS,
    run_branch,
    run_delayed_start,
    run_noisy,
    run_sweep,
    summarize,
)
from .metrics import fmt_value
from .train import evaluate, load_data, run_train


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = cfg.update(parse_assignments(args.set))
    if args.seed is not None:
        cfg = cfg.set("run.seed", args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    result = run_train(cfg, args.out)
    sys.stdout.write("\n".join(result.summary.lines()) + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = _ints(args.values) if args.axis == "batch_size" else _floats(args.values)
    report = run_sweep(cfg, args.axis, values, _ints(args.seeds), args.out)
    sys.stdout.write(report.text())
    return 0


def cmd_noisy(args) -> int:
    cfg = _config(args)
    if args.alphas:
        for alpha in _floats(args.alphas):
            sub = None if args.out is None else Path(args.out) / f"alpha={alpha!r}"
            report = run_noisy(cfg.set("reg.alpha", alpha), args.fraction, sub)
            sys.stdout.write(f"alpha: {fmt_value(alpha)}\n" + report.text())
    else:
        report = run_noisy(cfg, args.fraction, args.out)
        sys.stdout.write(report.text())
    return 0


def cmd_branch(args) -> int:
    cfg = _config(args)
    low = cfg.update(parse_assignments(args.low_set))
    if args.high_set:
        high = cfg.update(parse_assignments(args.high_set))
    else:
        high = low.set("optim.lr", low.optim.lr * 10.0)
    report = run_branch(cfg, args.branch_epoch, args.children, high, low, args.out)
    sys.stdout.write(report.text())
    return 0


def cmd_delayed(args) -> int:
    cfg = _config(args)
    report = run_delayed_start(cfg, _ints(args.starts), args.out)
    sys.stdout.write(report.text())
    return 0


def cmd_probe(args) -> int:
    cfg = _config(args)
    spec, theta, _ = load_checkpoint(args.checkpoint)
    train = load_data(cfg).train
    p = cfg.probe
    seed = cfg.run.seed
    n = min(p.trf_examples, len(train))
    lines = [f"n_params: {spec.n_params}"]
    loss, acc = evaluate(spec, theta, train)
    lines.append(f"train_loss: {fmt_value(loss)}")
    lines.append(f"train_acc: {fmt_value(acc)}")
    est = tr_f_mc(spec, theta, train, n, p.trf_labels, stream_seed(seed, "probe", 0, 0))
    lines.append(f"tr_f: {fmt_value(est.value)}")
    lines.append(f"tr_f_std_error: {fmt_value(est.std_error)}")
    if p.hutchinson_m > 0:
        k = min(p.hutchinson_examples, len(train))
        oracle = ModelOracle(spec, train.inputs[:k], train.labels[:k])
        h = tr_h_hutchinson(oracle, theta, p.hutchinson_m, stream_seed(seed, "probe", 0, 4), HvpConfig(p.hvp_c))
        lines.append(f"tr_h: {fmt_value(h.value)}")
        lines.append(f"tr_h_std_error: {fmt_value(h.std_error)}")
    lines.append(f"empirical_fisher: {fmt_value(empirical_fisher_trace(spec, theta, train).value)}")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_summarize(args) -> int:
    epsilon = args.epsilon
    if epsilon is None:
        epsilon = _config(args).run.epsilon
    sys.stdout.write(summarize(args.files, epsilon).text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fisherlab", description="Fisher-trace training experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed (run.seed)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("train", help="one training run")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over learning rate or batch size")
    common(p)
    p.add_argument("--axis", choices=["learning_rate", "batch_size"], required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default="0,1,2,3")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("noisy", help="label-noise study")
    common(p)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--alphas", help="comma-separated penalty coefficients to try")
    p.set_defaults(func=cmd_noisy)

    p = sub.add_parser("branch", help="branching experiment")
    common(p)
    p.add_argument("--branch-epoch", type=int, default=20)
    p.add_argument("--children", type=int, default=8)
    p.add_argument("--high-set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--low-set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_branch)

    p = sub.add_parser("delayed-start", help="penalty switched on at several epochs")
    common(p)
    p.add_argument("--starts", default=",".join(str(s) for s in DELAYED_STARTS))
    p.set_defaults(func=cmd_delayed)

    p = sub.add_parser("probe", help="curvature probe of a saved checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("summarize", help="summaries of metrics files")
    common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
