"""Experiment front door: config text, metrics files, sweeps, and diagnostic suites."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from fedhbn.config import ExperimentConfig
from fedhbn.data import cluster_mean_distance, fig2_panels, make_two_cluster_toy, write_fig2_csv
from fedhbn.federation import (Federation, MetricsRow, evaluate_accuracy, pooled_oracle_stats,
                               relative_stats_error, stats_gap)
from fedhbn.nn.layers import ConfigError, Conv2d, Dense, MaxPool2d, Mode, ReLU, Sequential
from fedhbn.nn.gradcheck import finite_difference_report
from fedhbn.nn.models import build_simple_cnn
from fedhbn.normalization import (BatchNorm, FedBatchNorm, FixBatchNorm, GroupNorm, HybridBatchNorm,
                                  LayerNorm)

__all__ = ["ConfigParseError", "parse_config", "evaluate_accuracy", "metrics_line", "run_experiment",
           "run_sweep", "oracle_check", "naive_bn_gap", "gradient_suite", "toy_fig2", "MetricsRow"]

log = logging.getLogger(__name__)

SWEEP_AXES = ("batch_size", "phi", "mode")
LR_REFERENCE_BATCH = 4
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _convert(key, raw, typ, lineno):
    try:
        if typ is bool:
            return _BOOL[raw.lower()]
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except (KeyError, ValueError):
        raise ConfigParseError(f"{key}: cannot parse {raw!r} as {typ.__name__}", lineno) from None


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a validated config.

    Keys are the :class:`ExperimentConfig` field names. Every error names
    the offending line; a missing ``dataset`` is reported without one.
    """
    types = ExperimentConfig.field_types()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (s.strip() for s in line.partition("="))
        if not sep or not key:
            raise ConfigParseError(f"expected 'key = value', got {line!r}", lineno)
        if key not in types:
            raise ConfigParseError(f"unknown key {key!r}", lineno)
        values[key] = _convert(key, raw, types[key], lineno)
        probe = dict(values)
        probe.setdefault("dataset", "synthetic")
        try:
            ExperimentConfig(**probe).validate()
        except ConfigError as exc:
            raise ConfigParseError(str(exc), lineno) from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values).validate()
    except ConfigParseError:
        raise
    except ConfigError as exc:
        raise ConfigParseError(str(exc)) from None


def metrics_line(row: MetricsRow) -> str:
    return json.dumps(dataclasses.asdict(row))


def run_experiment(cfg: ExperimentConfig, metrics_path=None, train=None, test=None):
    """Run one experiment, appending one JSON line per round to ``metrics_path``."""
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        def emit(row):
            log.info("round %d acc=%s loss=%s", row.round, row.test_acc, row.train_loss)
            if fh:
                fh.write(metrics_line(row) + "\n")
                fh.flush()

        fed = Federation(cfg, train, test)
        rows = fed.run(emit)
        return fed, rows
    finally:
        if fh:
            fh.close()


def cell_config(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "batch_size":
        b = int(value)
        return base.with_(batch_size=b, lr=base.lr * b / LR_REFERENCE_BATCH)
    if axis == "phi":
        return base.with_(phi=float(value))
    if axis == "mode":
        return base.with_(mode=str(value))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def run_sweep(base: ExperimentConfig, axis: str, values, modes=None, out_dir=None) -> list[dict]:
    """One seeded experiment per (value, mode) cell.

    Batch-size sweeps scale the learning rate linearly, taking ``base.lr``
    as the rate for batch size 4. A failing cell is recorded and the sweep
    continues.
    """
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    modes = [None] if axis == "mode" else list(modes or [base.mode])
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    cells = []
    for value in values:
        for mode in modes:
            cfg = cell_config(base if mode is None else base.with_(mode=mode), axis, value)
            cell = {"axis": axis, "value": value, "mode": cfg.mode, "seed": cfg.seed, "lr": cfg.lr}
            try:
                path = out / f"{axis}-{value}-{cfg.mode}.jsonl" if out else None
                fed, rows = run_experiment(cfg, path)
                accs = [r.test_acc for r in rows if r.test_acc is not None]
                cell.update(final_acc=accs[-1] if accs else None, rows=rows, error=None)
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                log.exception("sweep cell %s=%s mode=%s failed", axis, value, cfg.mode)
                cell.update(final_acc=None, rows=[], error=f"{type(exc).__name__}: {exc}")
            cells.append(cell)
    if out:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "value", "mode", "seed", "lr", "final_acc", "error"])
            for c in cells:
                w.writerow([c["axis"], c["value"], c["mode"], c["seed"], c["lr"], c["final_acc"], c["error"] or ""])
    return cells


def oracle_check(cfg: ExperimentConfig, rounds: int = 1) -> dict:
    """Pooled-data equality of HBN statistics and the naive-BN bias gap.

    HBN runs with full participation and no EMA; after ``rounds`` rounds the
    aggregated statistics are compared with a direct pass of the previous
    global model over every client's data. The naive-BN arm runs the same
    number of rounds and measures how far its averaged running statistics
    sit from the pooled statistics of its aggregated model.
    """
    hb = Federation(cfg.with_(mode="hbn", participation=1.0, ema=1.0, stats_cap=0, measure_gap=False))
    hb.bootstrap()
    pooled = np.concatenate([d.x for d in hb.client_data])
    rel = 0.0
    for t in range(1, rounds + 1):
        before = hb.global_model.copy()
        hb.run_round(t)
        oracle = pooled_oracle_stats(hb.model, before, pooled)
        rel = max(rel, relative_stats_error(hb.global_model.stats, oracle))
    return {"hbn_max_rel_error": rel, "naive_bn_gap": naive_bn_gap(cfg, rounds)}


def naive_bn_gap(cfg: ExperimentConfig, rounds: int = 1) -> float:
    """Standardised gap between averaged BN running statistics and the pooled oracle."""
    nb = Federation(cfg.with_(mode="naive_bn", participation=1.0, measure_gap=False))
    for t in range(1, rounds + 1):
        nb.run_round(t)
    pooled = np.concatenate([d.x for d in nb.client_data])
    return stats_gap(nb.global_model.stats, pooled_oracle_stats(nb.model, nb.global_model, pooled))


def _layer_cases(rng):
    def randn(*shape):
        return rng.normal(size=shape)

    def spaced(*shape):
        # distinct values at least 0.05 apart: no max-pool ties or ReLU kinks within the step
        v = (rng.permutation(int(np.prod(shape))) + 0.5) * 0.05
        return (v - v.mean()).reshape(shape)

    hbn = HybridBatchNorm(3)
    hbn.set_stats(randn(3), rng.uniform(0.5, 2.0, 3))
    hbn.params["alpha"][:] = randn(3)
    fbn = FedBatchNorm(3)
    fbn.set_stats(randn(3), rng.uniform(0.5, 2.0, 3))
    fix = FixBatchNorm(3)
    fix.set_stats(randn(3), rng.uniform(0.5, 2.0, 3))
    fix.frozen = True
    return {
        "conv2d": (Conv2d(3, 4, 3, 1, 1, rng=rng), randn(4, 3, 5, 5)),
        "dense": (Dense(6, 5, rng=rng), randn(4, 6)),
        "relu": (ReLU(), spaced(4, 3, 4, 4)),
        "maxpool2d": (MaxPool2d(2, 2), spaced(4, 3, 4, 4)),
        "bn": (BatchNorm(3), randn(4, 3, 4, 4)),
        "gn": (GroupNorm(4, 2), randn(4, 4, 3, 3)),
        "ln": (LayerNorm(3), randn(4, 3, 4, 4)),
        "fbn": (fbn, randn(4, 3, 4, 4)),
        "fixbn_frozen": (fix, randn(4, 3, 4, 4)),
        "hbn": (hbn, randn(4, 3, 4, 4)),
    }


def _weighted_sum_loss(weights):
    def loss(out, _):
        return float((out * weights).sum()), weights.copy()

    return loss


def gradient_suite(seed: int = 0, step: float = 1e-3) -> dict[str, float]:
    """Max relative error of every layer type's backward vs central differences (float64).

    Each layer sees a random batch of 4 under the loss sum(out * R) with a
    fixed random R, so every output coordinate carries gradient. Affine
    parameters are randomised first so they are not trivially 1 / 0.
    """
    rng = np.random.default_rng(seed)
    results = {}
    for name, (layer, x) in _layer_cases(rng).items():
        if "gamma" in layer.params:
            layer.params["gamma"][:] = rng.uniform(0.5, 1.5, layer.params["gamma"].shape)
            layer.params["beta"][:] = rng.normal(size=layer.params["beta"].shape)
        model = Sequential([layer])
        out = model.forward(x.astype(np.float64), Mode.EVAL)
        r = rng.normal(size=out.shape)
        rep = finite_difference_report(model, (x, None), step, loss_fn=_weighted_sum_loss(r),
                                       max_entries=None, seed=seed)
        results[name] = max(rep.values())
    # end to end through every block type, including the hybrid factor
    cnn = build_simple_cnn(10, "hbn", image_size=8, seed=seed)
    for _, layer in cnn.norm_layers():
        c = layer.num_channels
        layer.set_stats(0.3 * rng.normal(size=c), rng.uniform(0.5, 2.0, c))
        layer.params["alpha"][:] = rng.normal(size=c)
        layer.params["gamma"][:] = rng.uniform(0.5, 1.5, c)
        layer.params["beta"][:] = 0.1 * rng.normal(size=c)
    x = rng.normal(size=(4, 3, 8, 8))
    y = rng.integers(0, 10, size=4)
    results["simple_cnn_hbn"] = max(finite_difference_report(cnn, (x, y), 1e-4, seed=seed).values())
    return results


def toy_fig2(out_csv=None, n: int = 500, seed: int = 0) -> dict[str, float]:
    """Two 2-D clusters normalised four ways; returns cluster-mean distances per panel."""
    a, b = make_two_cluster_toy(n, means=[(-2.0, 1.0), (3.0, -1.5)],
                                covariances=[[[1.0, 0.3], [0.3, 0.5]], [[0.6, -0.2], [-0.2, 1.2]]], seed=seed)
    panels = fig2_panels(a.x, b.x, alpha=0.0)
    if out_csv:
        write_fig2_csv(panels, out_csv)
    return {name: cluster_mean_distance(pair) for name, pair in panels.items()}
