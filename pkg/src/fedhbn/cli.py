"""Command line: ``fedhbn {run,sweep,oracle-check,gradient-check,toy-fig2}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from fedhbn import harness
from fedhbn.checkpoint import save_checkpoint
from fedhbn.config import ExperimentConfig
from fedhbn.nn.layers import ConfigError

ORACLE_TOL = 1e-5
GRAD_TOL = 1e-4


def _config(args) -> ExperimentConfig:
    text = Path(args.config).read_text() if args.config else ""
    if not args.config:
        text = "dataset = synthetic\n"
    return harness.parse_config(text, seed=args.seed, threads=args.threads,
                                out=str(args.out) if args.out else None)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    fed, rows = harness.run_experiment(cfg, out / "metrics.jsonl")
    save_checkpoint(out / "final.fhbn", fed.global_model)
    last = [r.test_acc for r in rows if r.test_acc is not None]
    print(f"mode={cfg.mode} rounds={len(rows)} final_test_acc={last[-1] if last else float('nan'):.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
    cells = harness.run_sweep(cfg, args.axis, values, modes, _out_dir(args))
    for c in cells:
        print(f"{c['axis']}={c['value']} mode={c['mode']} acc={c['final_acc']} error={c['error'] or '-'}")
    return 1 if any(c["error"] for c in cells) else 0


def cmd_oracle(args) -> int:
    if args.config:
        cfg = _config(args)
    else:
        cfg = ExperimentConfig(dataset="synthetic", num_clients=5, phi=0.1, image_size=16, n_train=1000,
                               n_test=50, batch_size=4, lr=0.01, seed=args.seed or 0)
    res = harness.oracle_check(cfg, rounds=args.rounds)
    print(f"hbn max relative stats error vs pooled oracle: {res['hbn_max_rel_error']:.3e}")
    print(f"naive_bn standardised stats gap vs pooled oracle: {res['naive_bn_gap']:.3e}")
    return 0 if res["hbn_max_rel_error"] < ORACLE_TOL else 1


def cmd_gradient(args) -> int:
    res = harness.gradient_suite(seed=args.seed or 0)
    for name, err in res.items():
        print(f"{'PASS' if err < GRAD_TOL else 'FAIL'} {name:16s} {err:.3e}")
    return 0 if max(res.values()) < GRAD_TOL else 1


def cmd_toy(args) -> int:
    out = _out_dir(args)
    dist = harness.toy_fig2(out / "fig2.csv", seed=args.seed or 0)
    for name, d in dist.items():
        print(f"{name:7s} cluster-mean distance {d:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a 'key = value' config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="client worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedhbn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, metavar="{run,sweep,oracle-check,gradient-check,toy-fig2}")
    sub.add_parser("run", parents=[common], help="run one experiment").set_defaults(func=cmd_run)
    sw = sub.add_parser("sweep", parents=[common], help="sweep one axis across norm modes")
    sw.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    sw.add_argument("--modes", help="comma-separated modes (default: the config's mode)")
    sw.set_defaults(func=cmd_sweep)
    oc = sub.add_parser("oracle-check", parents=[common], help="pooled-data statistics checks")
    oc.add_argument("--rounds", type=int, default=1)
    oc.set_defaults(func=cmd_oracle)
    sub.add_parser("gradient-check", parents=[common], help="finite-difference gradient suite").set_defaults(func=cmd_gradient)
    sub.add_parser("toy-fig2", parents=[common], help="two-cluster normalisation CSV").set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"fedhbn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
