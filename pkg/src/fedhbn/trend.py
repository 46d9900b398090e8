"""Desk-scale heterogeneity trend: HBN vs BN vs GN under label skew.

Every (mode, seed) cell is an independent experiment. Results are final
test accuracies per mode, optionally with per-cell metrics JSONL and a CSV
summary of mean and sample standard deviation.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from fedhbn.config import ExperimentConfig
from fedhbn.harness import run_experiment

TREND_CONFIG = ExperimentConfig(
    dataset="synthetic", num_clients=10, participation=1.0, rounds=60, local_epochs=1,
    batch_size=2, phi=0.1, lr=0.005, ema=1.0, image_size=16, n_train=500, n_test=500,
    separation=0.25, noise=1.0, eval_every=10,
)
MODES = ("hbn", "naive_bn", "gn")
SEEDS = (0, 1, 2)


def run_trend(base: ExperimentConfig = TREND_CONFIG, modes=MODES, seeds=SEEDS, out_dir=None, verbose=False):
    """Final test accuracy per mode, one entry per seed."""
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    acc = {m: [] for m in modes}
    for mode in modes:
        for seed in seeds:
            cfg = base.with_(mode=mode, seed=seed)
            start = time.time()
            _, rows = run_experiment(cfg, out / f"{mode}-seed{seed}.jsonl" if out else None)
            acc[mode].append([r.test_acc for r in rows if r.test_acc is not None][-1])
            if verbose:
                print(f"{mode:9s} seed={seed} acc={acc[mode][-1]:.4f} ({time.time() - start:.0f}s)", flush=True)
    if out:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "mean_acc", "std_acc"] + [f"seed{s}" for s in seeds])
            for m in modes:
                w.writerow([m, np.mean(acc[m]), np.std(acc[m], ddof=1) if len(seeds) > 1 else 0.0] + acc[m])
    return acc


def margins(acc: dict, winner: str = "hbn") -> dict:
    """For every other mode: (mean gap to ``winner``, the larger of the two cross-seed stds)."""
    w = np.asarray(acc[winner])
    out = {}
    for mode, a in acc.items():
        if mode != winner:
            a = np.asarray(a)
            out[mode] = (float(w.mean() - a.mean()), float(max(w.std(ddof=1), a.std(ddof=1))))
    return out
