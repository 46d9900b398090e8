"""Normalisation layers for federated training.

All statistics are reduced in float64 regardless of the activation dtype.
Per-channel statistics travel as :class:`ChannelStats` (count, sum, sum of
squares) so that merging partial results is exact up to float64 addition.

Layers:

* ``HybridBatchNorm`` mixes live batch statistics with frozen global ones,
  weighted per channel by ``sigmoid(alpha)``.
* ``BatchNorm``, ``FixBatchNorm``, ``FedBatchNorm`` keep EMA running stats.
* ``GroupNorm`` / ``LayerNorm`` use per-sample statistics only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from fedhbn.nn.layers import ConfigError, Layer, Mode, StateError
from fedhbn.nn.losses import DataError

EPS = 1e-5
BN_MOMENTUM = 0.9
GN_GROUPS = 2


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel sufficient statistics of a set of activations."""

    count: int
    sum: np.ndarray
    sumsq: np.ndarray

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be non-negative")
        object.__setattr__(self, "sum", np.asarray(self.sum, dtype=np.float64))
        object.__setattr__(self, "sumsq", np.asarray(self.sumsq, dtype=np.float64))
        if self.sum.shape != self.sumsq.shape or self.sum.ndim != 1:
            raise ValueError("sum and sumsq must be matching 1-D arrays")

    @classmethod
    def empty(cls, channels: int) -> "ChannelStats":
        return cls(0, np.zeros(channels), np.zeros(channels))

    @classmethod
    def from_mean_var(cls, count: int, mean, var) -> "ChannelStats":
        """Inverse of ``mean``/``var`` (population variance)."""
        mean = np.asarray(mean, dtype=np.float64)
        var = np.asarray(var, dtype=np.float64)
        return cls(count, count * mean, count * (var + mean * mean))

    @property
    def channels(self) -> int:
        return self.sum.shape[0]

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise DataError("statistics of an empty set are undefined")
        return self.sum / self.count

    @property
    def var(self) -> np.ndarray:
        """Population variance, clamped at zero against cancellation."""
        m = self.mean
        return np.maximum(self.sumsq / self.count - m * m, 0.0)

    def merge(self, other: "ChannelStats") -> "ChannelStats":
        if other.channels != self.channels:
            raise ConfigError(f"cannot merge stats with {self.channels} and {other.channels} channels")
        return ChannelStats(self.count + other.count, self.sum + other.sum, self.sumsq + other.sumsq)

    __add__ = merge

    def equals(self, other: "ChannelStats") -> bool:
        return (self.count == other.count and np.array_equal(self.sum, other.sum)
                and np.array_equal(self.sumsq, other.sumsq))


def _reduce_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ConfigError(f"expected (N, C, H, W) or (N, F) input, got shape {x.shape}")


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1, 1, 1) if ndim == 4 else (1, -1))


def compute_batch_stats(x: np.ndarray) -> ChannelStats:
    """Per-channel stats over every axis except the channel axis."""
    axes = _reduce_axes(x)
    count = x.size // x.shape[1] if x.size else 0
    if count == 0:
        raise DataError("cannot compute statistics of an empty batch")
    x64 = x.astype(np.float64, copy=False)
    return ChannelStats(count, x64.sum(axis=axes), np.square(x64).sum(axis=axes))


def mixing_weights(alpha) -> tuple[np.ndarray, np.ndarray]:
    """(batch weight, global weight) = (sigmoid(-alpha), sigmoid(alpha))."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return expit(-alpha), expit(alpha)


def hybrid_mix(alpha, batch_mean, batch_var, global_mean, global_var):
    """Convex per-channel blend of batch and global (mean, var)."""
    shapes = {np.shape(a) for a in (alpha, batch_mean, batch_var, global_mean, global_var)}
    if len(shapes) != 1:
        raise ConfigError(f"channel counts differ: {sorted(shapes)}")
    wb, wg = mixing_weights(alpha)
    mu = wb * np.asarray(batch_mean, np.float64) + wg * np.asarray(global_mean, np.float64)
    var = wb * np.asarray(batch_var, np.float64) + wg * np.asarray(global_var, np.float64)
    return mu, var


def ema_update(old, new, lam: float):
    """``(1 - lam) * old + lam * new`` applied to a (mean, var) pair."""
    if not 0.0 < lam <= 1.0:
        raise ConfigError(f"EMA rate must lie in (0, 1], got {lam}")
    if lam == 1.0:
        return np.array(new[0], dtype=np.float64), np.array(new[1], dtype=np.float64)
    return tuple((1.0 - lam) * np.asarray(o, np.float64) + lam * np.asarray(n, np.float64)
                 for o, n in zip(old, new))


class NormLayer(Layer):
    """Per-channel affine normalisation. Subclasses choose the statistics."""

    kind = "norm"
    # does the layer carry batch-dependent (mean, var) buffers?
    has_stats = False

    def __init__(self, num_channels: int, eps: float = EPS):
        super().__init__()
        if num_channels < 1:
            raise ConfigError("norm layer needs at least one channel")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.num_channels = num_channels
        self.eps = eps
        self.params["gamma"] = np.ones(num_channels, dtype=np.float32)
        self.params["beta"] = np.zeros(num_channels, dtype=np.float32)
        self.local_stats = ChannelStats.empty(num_channels)

    def _check(self, x):
        _reduce_axes(x)
        if x.shape[1] != self.num_channels:
            raise ConfigError(f"{self.kind}: expected {self.num_channels} channels, got {x.shape[1]}")

    def _record(self, x):
        self.local_stats = self.local_stats.merge(compute_batch_stats(x))

    def reset_local_stats(self) -> None:
        self.local_stats = ChannelStats.empty(self.num_channels)

    # fixed (mean, var): y = gamma * (x - mean) / sqrt(var + eps) + beta
    def _fixed_forward(self, x, mean, var, mode):
        nd = x.ndim
        inv = 1.0 / np.sqrt(np.asarray(var, np.float64) + self.eps)
        xhat = (x - _per_channel(mean.astype(x.dtype), nd)) * _per_channel(inv.astype(x.dtype), nd)
        g, b = self.params["gamma"], self.params["beta"]
        if mode is Mode.TRAIN:
            self._cache = ("fixed", xhat, inv.astype(x.dtype))
        return xhat * _per_channel(g, nd) + _per_channel(b, nd)

    def _fixed_backward(self, dy, xhat, inv):
        axes = _reduce_axes(dy)
        nd = dy.ndim
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        return dy * _per_channel(self.params["gamma"] * inv, nd)

    # batch statistics: standard BN forward/backward
    def _batch_forward(self, x, mean, var, mode):
        nd = x.ndim
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - _per_channel(mean.astype(x.dtype), nd)) * _per_channel(inv.astype(x.dtype), nd)
        if mode is Mode.TRAIN:
            self._cache = ("batch", xhat, inv.astype(x.dtype))
        return xhat * _per_channel(self.params["gamma"], nd) + _per_channel(self.params["beta"], nd)

    def _batch_backward(self, dy, xhat, inv):
        axes = _reduce_axes(dy)
        nd = dy.ndim
        m = dy.size // dy.shape[1]
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * _per_channel(self.params["gamma"], nd)
        mean_dxhat = dxhat.sum(axis=axes) / m
        mean_dxhat_xhat = (dxhat * xhat).sum(axis=axes) / m
        return (dxhat - _per_channel(mean_dxhat, nd) - xhat * _per_channel(mean_dxhat_xhat, nd)) \
            * _per_channel(inv, nd)

    def backward(self, dy):
        tag, xhat, inv = self._take_cache()
        if tag == "fixed":
            return self._fixed_backward(dy, xhat, inv)
        return self._batch_backward(dy, xhat, inv)


class _RunningStatsNorm(NormLayer):
    """Norm layer with EMA running statistics used at evaluation."""

    has_stats = True

    def __init__(self, num_channels: int, eps: float = EPS, momentum: float = BN_MOMENTUM):
        super().__init__(num_channels, eps)
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("running-stat momentum must lie in [0, 1)")
        self.momentum = momentum
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)

    @property
    def stats(self):
        return self.running_mean, self.running_var

    def set_stats(self, mean, var) -> None:
        self.running_mean = np.array(mean, dtype=np.float64)
        self.running_var = np.array(var, dtype=np.float64)

    def _update_running(self, st: ChannelStats) -> None:
        if st.count < 2:
            raise DataError(f"{self.kind}: need at least 2 values per channel in training")
        # running variance tracks the unbiased batch variance
        unbiased = st.var * st.count / (st.count - 1)
        m = self.momentum
        self.running_mean = m * self.running_mean + (1 - m) * st.mean
        self.running_var = m * self.running_var + (1 - m) * unbiased

    def _eval_forward(self, x, mode):
        if mode is Mode.COLLECT:
            self._record(x)
        return self._fixed_forward(x, self.running_mean, self.running_var, mode)


class BatchNorm(_RunningStatsNorm):
    kind = "bn"

    def forward(self, x, mode=Mode.TRAIN):
        self._check(x)
        if mode is not Mode.TRAIN:
            return self._eval_forward(x, mode)
        st = compute_batch_stats(x)
        self._update_running(st)
        return self._batch_forward(x, st.mean, st.var, mode)


class FixBatchNorm(BatchNorm):
    """BN until ``frozen`` is set, then normalises with the frozen running stats."""

    kind = "fixbn"

    def __init__(self, num_channels: int, eps: float = EPS, momentum: float = BN_MOMENTUM):
        super().__init__(num_channels, eps, momentum)
        self.frozen = False

    def forward(self, x, mode=Mode.TRAIN):
        if mode is Mode.TRAIN and self.frozen:
            self._check(x)
            return self._fixed_forward(x, self.running_mean, self.running_var, mode)
        return super().forward(x, mode)


class FedBatchNorm(_RunningStatsNorm):
    """Normalises with running stats even in training; batch stats only feed the EMA."""

    kind = "fbn"

    def forward(self, x, mode=Mode.TRAIN):
        self._check(x)
        if mode is not Mode.TRAIN:
            return self._eval_forward(x, mode)
        mean, var = self.running_mean, self.running_var
        y = self._fixed_forward(x, mean, var, mode)
        self._update_running(compute_batch_stats(x))
        return y


class GroupNorm(NormLayer):
    kind = "gn"

    def __init__(self, num_channels: int, groups: int = GN_GROUPS, eps: float = EPS):
        super().__init__(num_channels, eps)
        if groups < 1 or num_channels % groups:
            raise ConfigError(f"group norm: {num_channels} channels not divisible into {groups} groups")
        self.groups = groups

    def _grouped(self, x):
        return x.reshape(x.shape[0], self.groups, -1)

    def forward(self, x, mode=Mode.TRAIN):
        self._check(x)
        xg = self._grouped(x)
        x64 = xg.astype(np.float64, copy=False)
        mean = x64.mean(axis=2, keepdims=True)
        var = np.maximum(np.square(x64).mean(axis=2, keepdims=True) - mean * mean, 0.0)
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = ((xg - mean.astype(x.dtype)) * inv).reshape(x.shape)
        if mode is Mode.TRAIN:
            self._cache = (xhat, inv)
        nd = x.ndim
        return xhat * _per_channel(self.params["gamma"], nd) + _per_channel(self.params["beta"], nd)

    def backward(self, dy):
        xhat, inv = self._take_cache()
        axes = _reduce_axes(dy)
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = self._grouped(dy * _per_channel(self.params["gamma"], dy.ndim))
        xh = self._grouped(xhat)
        dx = (dxhat - dxhat.mean(axis=2, keepdims=True)
              - xh * (dxhat * xh).mean(axis=2, keepdims=True)) * inv
        return dx.reshape(dy.shape)


class LayerNorm(GroupNorm):
    """Per-sample normalisation over all of (C, H, W); affine per channel."""

    kind = "ln"

    def __init__(self, num_channels: int, eps: float = EPS):
        super().__init__(num_channels, groups=1, eps=eps)


class HybridBatchNorm(NormLayer):
    """Batch norm whose training statistics blend batch and frozen global stats.

    In training the normaliser uses, per channel,

        mu_hat  = sigmoid(-alpha) * mu_batch  + sigmoid(alpha) * mu_global
        var_hat = sigmoid(-alpha) * var_batch + sigmoid(alpha) * var_global

    ``alpha`` is learnable and client-local; the global statistics receive
    no gradient. Evaluation and statistics collection use the global
    statistics alone.
    """

    kind = "hbn"
    has_stats = True
    local_param_names = ("alpha",)

    def __init__(self, num_channels: int, eps: float = EPS):
        super().__init__(num_channels, eps)
        self.params["alpha"] = np.zeros(num_channels, dtype=np.float32)
        self.global_mean: np.ndarray | None = None
        self.global_var: np.ndarray | None = None

    @property
    def stats(self):
        return self.global_mean, self.global_var

    def set_stats(self, mean, var) -> None:
        var = np.array(var, dtype=np.float64)
        if var.shape != (self.num_channels,) or np.any(var < 0):
            raise ConfigError("global variance must be a non-negative per-channel vector")
        self.global_mean = np.array(mean, dtype=np.float64)
        self.global_var = var

    def _require_global(self):
        if self.global_mean is None:
            raise StateError("hbn: global statistics are not initialised")

    def forward(self, x, mode=Mode.TRAIN):
        self._check(x)
        if mode is Mode.COLLECT:
            self._record(x)
            if self.global_mean is None:
                # bootstrap: nothing to normalise with yet
                return x
        self._require_global()
        if mode is not Mode.TRAIN:
            return self._fixed_forward(x, self.global_mean, self.global_var, mode)
        st = compute_batch_stats(x)
        mu_b, var_b = st.mean, st.var
        alpha = self.params["alpha"].astype(np.float64)
        mu, var = hybrid_mix(alpha, mu_b, var_b, self.global_mean, self.global_var)
        nd = x.ndim
        inv = 1.0 / np.sqrt(var + self.eps)
        xc = x - _per_channel(mu.astype(x.dtype), nd)
        xhat = xc * _per_channel(inv.astype(x.dtype), nd)
        self._cache = (x, xhat, mu_b, var_b, mu, inv, st.count)
        return xhat * _per_channel(self.params["gamma"], nd) + _per_channel(self.params["beta"], nd)

    def backward(self, dy):
        x, xhat, mu_b, var_b, mu, inv, m = self._take_cache()
        axes = _reduce_axes(dy)
        nd = dy.ndim
        dt = dy.dtype
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * _per_channel(self.params["gamma"], nd)
        # dL/dmu_hat and dL/dvar_hat, per channel
        d_mu = -(dxhat.sum(axis=axes)).astype(np.float64) * inv
        d_var = -0.5 * (dxhat * xhat).sum(axis=axes).astype(np.float64) * inv * inv
        wb, wg = mixing_weights(self.params["alpha"].astype(np.float64))
        dwg = wb * wg
        self.grads["alpha"] = (dwg * (d_mu * (self.global_mean - mu_b)
                                      + d_var * (self.global_var - var_b))).astype(self.params["alpha"].dtype)
        # batch statistics depend on every element: d mu_b/dx = 1/m, d var_b/dx = 2(x - mu_b)/m
        d_mu_b = wb * d_mu / m
        d_var_b = wb * d_var * 2.0 / m
        dx = dxhat * _per_channel(inv.astype(dt), nd) + _per_channel(d_mu_b.astype(dt), nd) \
            + (x - _per_channel(mu_b.astype(dt), nd)) * _per_channel(d_var_b.astype(dt), nd)
        return dx


NORM_KINDS = {
    "bn": BatchNorm,
    "gn": GroupNorm,
    "ln": LayerNorm,
    "fixbn": FixBatchNorm,
    "fbn": FedBatchNorm,
    "hbn": HybridBatchNorm,
}


def make_norm(kind: str, channels: int, eps: float = EPS) -> NormLayer:
    try:
        cls = NORM_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown norm kind {kind!r}; expected one of {sorted(NORM_KINDS)} or 'none'") from None
    return cls(channels, eps=eps)
