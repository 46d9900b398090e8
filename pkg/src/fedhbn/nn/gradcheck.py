"""Central finite-difference checks of backward passes (float64)."""

from __future__ import annotations

import copy

import numpy as np

from fedhbn.nn.layers import Mode, Sequential
from fedhbn.nn.losses import softmax_cross_entropy


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor): relative error with an absolute floor."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _snapshot_buffers(model):
    return [(layer, copy.deepcopy(layer.__dict__.get("running_mean")),
             copy.deepcopy(layer.__dict__.get("running_var"))) for layer in model]


def _restore_buffers(snap):
    for layer, rm, rv in snap:
        if rm is not None:
            layer.running_mean = rm.copy()
            layer.running_var = rv.copy()


def finite_difference_report(model: Sequential, batch, step: float = 1e-5, *, loss_fn=None,
                             max_entries: int | None = 24, floor: float = 1e-6, seed: int = 0,
                             check_input: bool = True) -> dict[str, float]:
    """Per-parameter max relative error between backward and central differences.

    ``max_entries`` caps how many randomly chosen coordinates of each
    parameter tensor are perturbed (None: all of them). The model is copied
    and promoted to float64; the original is left untouched.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    loss_fn = loss_fn or softmax_cross_entropy
    x, y = batch
    model = copy.deepcopy(model).astype(np.float64)
    x = np.array(x, dtype=np.float64)
    snap = _snapshot_buffers(model)
    rng = np.random.default_rng(seed)

    def loss_at(inp):
        _restore_buffers(snap)
        out = model.forward(inp, Mode.TRAIN)
        return loss_fn(out, y)[0]

    _restore_buffers(snap)
    out = model.forward(x, Mode.TRAIN)
    _, dout = loss_fn(out, y)
    dx = model.backward(dout)
    grads = {k: g.copy() for k, g in model.grads().items()}
    params = model.trainable()

    def probe(arr, analytic):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_at(x)
            flat[i] = orig - step
            lm = loss_at(x)
            flat[i] = orig
            num[j] = (lp - lm) / (2 * step)
        return relative_error(analytic.reshape(-1)[idx], num, floor)

    report = {name: probe(p, grads[name]) for name, p in params.items()}
    if check_input:
        report["input"] = probe(x, dx)
    _restore_buffers(snap)
    return report


def finite_difference_check(model: Sequential, batch, step: float = 1e-5, **kwargs) -> float:
    """Largest relative gradient error over all checked parameters (and the input)."""
    report = finite_difference_report(model, batch, step, **kwargs)
    return max(report.values()) if report else 0.0
