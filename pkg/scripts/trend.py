"""Desk-scale heterogeneity trend: HBN vs BN vs GN under label skew.

    python3 scripts/trend.py --out runs/trend
"""

from __future__ import annotations

import argparse

import numpy as np

from fedhbn.trend import TREND_CONFIG, margins, run_trend


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/trend")
    p.add_argument("--rounds", type=int, default=TREND_CONFIG.rounds)
    p.add_argument("--phi", type=float, default=TREND_CONFIG.phi)
    p.add_argument("--lr", type=float, default=TREND_CONFIG.lr)
    args = p.parse_args()
    base = TREND_CONFIG.with_(rounds=args.rounds, phi=args.phi, lr=args.lr)
    acc = run_trend(base, out_dir=args.out, verbose=True)
    for m, a in acc.items():
        print(f"{m:9s} mean={np.mean(a):.4f} std={np.std(a, ddof=1):.4f}")
    for m, (gap, sd) in margins(acc).items():
        print(f"hbn - {m}: {gap:+.4f} (largest std {sd:.4f})")


if __name__ == "__main__":
    main()
