import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedhbn.nn import ConfigError, DataError, Mode, StateError
from fedhbn.normalization import (BatchNorm, ChannelStats, FedBatchNorm, FixBatchNorm, GroupNorm,
                                  HybridBatchNorm, LayerNorm, compute_batch_stats, ema_update,
                                  hybrid_mix, mixing_weights)


def test_constant_input_stats():
    st_ = compute_batch_stats(np.full((3, 2, 4, 4), 2.5))
    np.testing.assert_array_equal(st_.mean, [2.5, 2.5])
    np.testing.assert_array_equal(st_.var, [0.0, 0.0])


def test_hand_stats():
    st_ = compute_batch_stats(np.array([0.0, 2.0, 4.0, 6.0]).reshape(4, 1))
    assert st_.mean[0] == 3.0 and st_.var[0] == 5.0 and st_.count == 4


def test_empty_batch():
    with pytest.raises(DataError):
        compute_batch_stats(np.zeros((0, 3, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(2, 8), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
              elements=st.integers(-1000, 1000)), st.data())
def test_merge_of_parts_is_exact(x, data):
    x = x.astype(np.float64)
    cut = data.draw(st.integers(1, x.shape[0] - 1))
    merged = compute_batch_stats(x[:cut]).merge(compute_batch_stats(x[cut:]))
    assert merged.equals(compute_batch_stats(x))


@settings(max_examples=50, deadline=None)
@given(st.lists(arrays(np.int64, (3, 2), elements=st.integers(-50, 50)), min_size=3, max_size=3))
def test_merge_associative_commutative(parts):
    a, b, c = (compute_batch_stats(p.astype(np.float64)) for p in parts)
    assert (a + b).equals(b + a)
    assert ((a + b) + c).equals(a + (b + c))


def test_variance_clamped_non_negative():
    st_ = ChannelStats(3, np.array([3.0]), np.array([3.0 - 1e-15]))
    assert st_.var[0] == 0.0


def test_mix_alpha_zero_is_midpoint():
    mu, var = hybrid_mix(np.zeros(2), [1.0, -3.0], [2.0, 4.0], [5.0, 1.0], [6.0, 0.5])
    np.testing.assert_array_equal(mu, [3.0, -1.0])
    np.testing.assert_array_equal(var, [4.0, 2.25])


def test_mix_limits():
    mu, var = hybrid_mix(np.array([np.inf, -np.inf]), [1.0, 1.0], [2.0, 2.0], [5.0, 5.0], [7.0, 7.0])
    np.testing.assert_array_equal(mu, [5.0, 1.0])
    np.testing.assert_array_equal(var, [7.0, 2.0])


def test_mix_ln3():
    mu, _ = hybrid_mix(np.array([math.log(3)]), [0.0], [1.0], [4.0], [1.0])
    assert mu[0] == pytest.approx(3.0, abs=1e-12)
    wb, wg = mixing_weights(math.log(3))
    assert wb == pytest.approx(0.25) and wg == pytest.approx(0.75)


def test_mix_channel_mismatch():
    with pytest.raises(ConfigError):
        hybrid_mix(np.zeros(2), [0.0], [1.0], [0.0], [1.0])


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_weights_partition_unity(alpha):
    wb, wg = mixing_weights(alpha)
    assert abs(wb + wg - 1.0) < 1e-12


def test_ema():
    assert ema_update((np.array([0.0]), np.array([1.0])), (np.array([1.0]), np.array([3.0])), 0.01)[0][0] == \
        pytest.approx(0.01)
    new = (np.array([4.0]), np.array([9.0]))
    out = ema_update((np.array([1.0]), np.array([2.0])), new, 1.0)
    assert out[0][0] == 4.0 and out[1][0] == 9.0
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ConfigError):
            ema_update(new, new, bad)


def test_ema_geometric_convergence():
    lam, target = 0.1, (np.array([1.0]), np.array([2.0]))
    cur = (np.array([0.0]), np.array([0.0]))
    for t in range(1, 30):
        cur = ema_update(cur, target, lam)
        assert abs(cur[0][0] - 1.0) == pytest.approx((1 - lam) ** t, rel=1e-9)


def _hbn(c, rng, alpha=0.0):
    layer = HybridBatchNorm(c).astype(np.float64)
    layer.set_stats(rng.normal(size=c), rng.uniform(0.5, 2.0, c))
    layer.params["alpha"][:] = alpha
    return layer


def test_hbn_batch_only_limit_normalises(rng):
    layer = _hbn(3, rng, alpha=-60.0)
    x = 3.0 + 2.0 * rng.normal(size=(8, 3, 5, 5))
    y = layer.forward(x)
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-5
    v = y.var(axis=(0, 2, 3))
    assert np.all((v >= 1 - 1e-3) & (v <= 1))


def test_hbn_eval_at_global_mean_gives_beta(rng):
    layer = _hbn(2, rng)
    layer.params["beta"][:] = [0.5, -1.5]
    x = np.broadcast_to(layer.global_mean.reshape(1, 2, 1, 1), (3, 2, 2, 2)).copy()
    y = layer.forward(x, Mode.EVAL)
    np.testing.assert_allclose(y[:, 0], 0.5)
    np.testing.assert_allclose(y[:, 1], -1.5)


def test_hbn_eval_requires_global():
    with pytest.raises(StateError):
        HybridBatchNorm(2).forward(np.zeros((2, 2)), Mode.EVAL)


def scalar_hbn(x, alpha, gamma, beta, mu_g, var_g, eps=1e-5):
    """Straight-line per-channel reference over a (N, C) input."""
    n, c = len(x), len(x[0])
    out = [[0.0] * c for _ in range(n)]
    for j in range(c):
        col = [x[i][j] for i in range(n)]
        mu_b = sum(col) / n
        var_b = sum((v - mu_b) ** 2 for v in col) / n
        wb = math.exp(-alpha[j]) / (1 + math.exp(-alpha[j]))
        wg = 1 / (1 + math.exp(-alpha[j]))
        mu = wb * mu_b + wg * mu_g[j]
        var = wb * var_b + wg * var_g[j]
        for i in range(n):
            out[i][j] = gamma[j] * (x[i][j] - mu) / math.sqrt(var + eps) + beta[j]
    return out


def test_hbn_train_matches_scalar_reference():
    x = np.array([[1.0, -2.0], [3.0, 0.5], [-1.0, 4.0], [2.0, 1.0]])
    layer = HybridBatchNorm(2).astype(np.float64)
    layer.set_stats([0.5, 1.0], [2.0, 3.0])
    layer.params["gamma"][:] = [1.5, 0.7]
    layer.params["beta"][:] = [0.1, -0.2]
    ref = scalar_hbn(x.tolist(), [0.0, 0.0], [1.5, 0.7], [0.1, -0.2], [0.5, 1.0], [2.0, 3.0])
    np.testing.assert_allclose(layer.forward(x), ref, rtol=1e-12)
    layer.params["alpha"][:] = [0.7, -1.3]
    ref = scalar_hbn(x.tolist(), [0.7, -1.3], [1.5, 0.7], [0.1, -0.2], [0.5, 1.0], [2.0, 3.0])
    np.testing.assert_allclose(layer.forward(x), ref, rtol=1e-12)


def scalar_bn_backward(x, dy, gamma, eps=1e-5):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    inv = 1 / math.sqrt(var + eps)
    xhat = [(v - mu) * inv for v in x]
    dxhat = [d * gamma for d in dy]
    s1 = sum(dxhat)
    s2 = sum(d * h for d, h in zip(dxhat, xhat))
    return [inv / n * (n * dxhat[i] - s1 - xhat[i] * s2) for i in range(n)]


def test_hbn_backward_batch_limit_matches_bn_reference(rng):
    x = rng.normal(size=(6, 1))
    dy = rng.normal(size=(6, 1))
    layer = HybridBatchNorm(1).astype(np.float64)
    layer.set_stats([0.3], [1.7])
    layer.params["alpha"][:] = -60.0
    layer.params["gamma"][:] = 1.3
    layer.forward(x)
    dx = layer.backward(dy)
    np.testing.assert_allclose(dx[:, 0], scalar_bn_backward(x[:, 0].tolist(), dy[:, 0].tolist(), 1.3),
                               rtol=1e-8, atol=1e-12)


def test_hbn_alpha_grad_zero_when_stats_agree(rng):
    x = rng.normal(size=(5, 3, 2, 2))
    st_ = compute_batch_stats(x)
    layer = HybridBatchNorm(3).astype(np.float64)
    layer.set_stats(st_.mean, st_.var)
    layer.params["alpha"][:] = [0.3, -0.4, 1.0]
    layer.forward(x)
    layer.backward(rng.normal(size=x.shape))
    np.testing.assert_allclose(layer.grads["alpha"], 0.0, atol=1e-12)


def test_hbn_single_sample_allowed_bn_rejected(rng):
    layer = _hbn(3, rng)
    y = layer.forward(rng.normal(size=(1, 3)))
    assert np.isfinite(y).all()
    with pytest.raises(DataError):
        BatchNorm(3).forward(rng.normal(size=(1, 3)))


def test_collect_mutates_only_local_stats(rng):
    layer = _hbn(2, rng)
    gm, gv = layer.global_mean.copy(), layer.global_var.copy()
    x = rng.normal(size=(4, 2, 3, 3))
    y_eval = layer.forward(x, Mode.EVAL)
    assert layer.local_stats.count == 0
    y_col = layer.forward(x, Mode.COLLECT)
    np.testing.assert_array_equal(y_eval, y_col)
    assert layer.local_stats.equals(compute_batch_stats(x))
    np.testing.assert_array_equal(layer.global_mean, gm)
    np.testing.assert_array_equal(layer.global_var, gv)


def test_bn_eval_is_pure_and_differs_from_train(rng):
    bn = BatchNorm(2).astype(np.float64)
    x = 5 + rng.normal(size=(6, 2))
    y_train = bn.forward(x, Mode.TRAIN)
    rm, rv = bn.running_mean.copy(), bn.running_var.copy()
    np.testing.assert_allclose(rm, 0.1 * x.mean(0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0, ddof=1))
    y_eval = bn.forward(x, Mode.EVAL)
    assert not np.allclose(y_train, y_eval)
    ref = (x - rm) / np.sqrt(rv + 1e-5)
    np.testing.assert_allclose(y_eval, ref)
    np.testing.assert_array_equal(bn.running_mean, rm)


def test_gn_constant_per_sample_gives_beta():
    gn = GroupNorm(4, 2).astype(np.float64)
    gn.params["beta"][:] = [1.0, 2.0, 3.0, 4.0]
    x = np.stack([np.full((4, 3, 3), 7.0), np.full((4, 3, 3), -2.0)])
    y = gn.forward(x)
    np.testing.assert_allclose(y, np.broadcast_to(gn.params["beta"].reshape(1, 4, 1, 1), y.shape))


def test_ln_is_gn_with_one_group(rng):
    x = rng.normal(size=(3, 4, 2, 2))
    ln, gn = LayerNorm(4), GroupNorm(4, 1)
    gn.params["gamma"][:] = ln.params["gamma"][:] = rng.uniform(size=4)
    np.testing.assert_array_equal(ln.forward(x), gn.forward(x))


def test_gn_groups_must_divide():
    with pytest.raises(ConfigError):
        GroupNorm(6, 4)


def test_fbn_uses_running_not_batch(rng):
    fbn = FedBatchNorm(2).astype(np.float64)
    fbn.set_stats([1.0, -1.0], [2.0, 0.5])
    x = rng.normal(size=(4, 2))
    y = fbn.forward(x)
    after = fbn.running_mean.copy()
    fbn.set_stats([1.0, -1.0], [2.0, 0.5])
    x2 = x.copy()
    x2[0] += 10.0
    y2 = fbn.forward(x2)
    np.testing.assert_array_equal(y[1:], y2[1:])
    assert not np.array_equal(after, fbn.running_mean)


def test_fixbn_freezes(rng):
    fix = FixBatchNorm(2).astype(np.float64)
    x = rng.normal(size=(5, 2))
    fix.forward(x)
    assert not np.array_equal(fix.running_mean, [0, 0])
    fix.frozen = True
    rm = fix.running_mean.copy()
    y = fix.forward(x)
    np.testing.assert_array_equal(fix.running_mean, rm)
    np.testing.assert_allclose(y, (x - rm) / np.sqrt(fix.running_var + 1e-5))
