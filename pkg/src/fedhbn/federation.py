"""FedAvg orchestration with decoupled statistics collection.

A round in ``hbn`` mode:

1. every participant runs a gradient-free pass of the downloaded global
   model over its data and records per-layer :class:`ChannelStats`;
2. every participant trains locally (weights and its private ``alpha``);
3. the server averages weights by sample count and pools the statistics
   into an unbiased global mean / sample variance, then blends them into
   the previous global statistics with an EMA.

After ``T`` such rounds a final statistics-only round re-synchronises the
statistics with the final weights. ``naive_bn`` instead averages BN running
statistics like weights, which is biased under label skew.
"""

from __future__ import annotations

import copy
import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedhbn.config import ExperimentConfig, norm_kind_for
from fedhbn.data import Dataset, PartitionSpec, datasets_for, dirichlet_partition
from fedhbn.nn.layers import Mode, Sequential
from fedhbn.nn.losses import DataError, softmax_cross_entropy
from fedhbn.nn.models import build_simple_cnn
from fedhbn.nn.optim import SGD
from fedhbn.normalization import ChannelStats, FixBatchNorm, HybridBatchNorm, ema_update
from fedhbn.seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

EVAL_BATCH = 256


class ProtocolError(RuntimeError):
    """Round bookkeeping violated (missing participant, misaligned upload...)."""


class DegenerateVarianceError(ValueError):
    pass


@dataclass
class GlobalModel:
    weights: "OrderedDict[str, np.ndarray]"
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    round: int = 0

    def copy(self) -> "GlobalModel":
        return GlobalModel(OrderedDict((k, v.copy()) for k, v in self.weights.items()),
                           {k: (m.copy(), v.copy()) for k, (m, v) in self.stats.items()}, self.round)


@dataclass
class ClientRecord:
    cid: int
    indices: np.ndarray
    # private hybrid factors; never uploaded
    alpha: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def num_samples(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class RoundPlan:
    round: int
    participants: tuple[int, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        if list(self.participants) != sorted(set(self.participants)):
            raise ProtocolError("participants must be unique and sorted")
        if len(self.sizes) != len(self.participants) or min(self.sizes, default=0) < 1:
            raise ProtocolError("every participant needs a positive dataset size")

    @property
    def weights(self) -> dict[int, float]:
        total = sum(self.sizes)
        return {k: n / total for k, n in zip(self.participants, self.sizes)}


@dataclass
class ClientUpdate:
    cid: int
    weights: "OrderedDict[str, np.ndarray]"
    stats: dict[str, ChannelStats]
    num_samples: int
    buffers: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    train_loss: float | None = None
    # statistics drawn from a subsample; excluded from exactness checks
    stats_capped: bool = False


@dataclass
class MetricsRow:
    round: int
    mode: str
    test_acc: float | None
    train_loss: float | None
    stats_gap: float | None
    lr: float
    participants: list[int]


def make_plan(t: int, clients: list[ClientRecord], per_round: int, rng: np.random.Generator) -> RoundPlan:
    """Uniform sampling without replacement; ids returned ascending."""
    if not 1 <= per_round <= len(clients):
        raise ProtocolError(f"cannot pick {per_round} of {len(clients)} clients")
    chosen = sorted(rng.choice(len(clients), size=per_round, replace=False).tolist())
    return RoundPlan(t, tuple(clients[i].cid for i in chosen), tuple(clients[i].num_samples for i in chosen))


def stats_layers(model: Sequential):
    return [(n, l) for n, l in model.norm_layers() if l.has_stats]


def load_global(model: Sequential, gm: GlobalModel, alpha=None) -> None:
    model.set_params(gm.weights)
    for name, layer in stats_layers(model):
        if name in gm.stats:
            layer.set_stats(*gm.stats[name])
    if alpha:
        model.set_params(alpha)
    else:
        # a client's first round starts from the initial hybrid factor, never a neighbour's
        for value in model.local_params().values():
            value[...] = 0


def extract_global(model: Sequential, round_: int = 0) -> GlobalModel:
    stats = {}
    for name, layer in stats_layers(model):
        mean, var = layer.stats
        if mean is not None:
            stats[name] = (mean.copy(), var.copy())
    return GlobalModel(OrderedDict((k, v.copy()) for k, v in model.weights().items()), stats, round_)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def client_collect_stats(model: Sequential, gm: GlobalModel, data: Dataset, *, cap: int = 0,
                         batch_size: int = EVAL_BATCH, stop: int | None = None) -> dict[str, ChannelStats]:
    """Forward ``data`` through the global model without gradients, recording stats.

    ``stop`` truncates the pass after that layer index (used while
    bootstrapping statistics layer by layer).
    """
    if len(data) == 0:
        raise DataError("client dataset is empty")
    load_global(model, gm)
    layers = stats_layers(model)
    for _, layer in layers:
        layer.reset_local_stats()
    x = data.x[:cap] if cap else data.x
    for sl in _batches(len(x), batch_size):
        model.forward(x[sl], Mode.COLLECT, stop=stop)
    return {name: layer.local_stats for name, layer in layers if layer.local_stats.count}


def client_local_train(model: Sequential, gm: GlobalModel, client: ClientRecord, data: Dataset, *,
                       epochs: int, batch_size: int, lr: float, momentum: float = 0.9,
                       rng: np.random.Generator, stats: dict[str, ChannelStats] | None = None,
                       frozen: bool = False, stats_capped: bool = False) -> ClientUpdate:
    """Local mini-batch SGD starting from the global weights and the client's alpha.

    Global statistics inside HBN layers stay fixed. A trailing batch with a
    single sample is dropped when the epoch has other batches.
    """
    n = len(data)
    if n == 0:
        raise DataError(f"client {client.cid} has no data")
    load_global(model, gm, client.alpha)
    for _, layer in model.norm_layers():
        if isinstance(layer, FixBatchNorm):
            layer.frozen = frozen
    if batch_size > n:
        log.warning("client %d: batch size %d exceeds %d samples; using one full batch",
                    client.cid, batch_size, n)
        batch_size = n
    opt = SGD(lr, momentum)
    params = model.trainable()
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for sl in _batches(n, batch_size):
            idx = order[sl]
            if idx.size == 1 and n > 1:
                continue
            out = model.forward(data.x[idx], Mode.TRAIN)
            loss, dout = softmax_cross_entropy(out, data.y[idx])
            model.backward(dout)
            opt.step(params, model.grads())
            losses.append(loss)
    client.alpha = OrderedDict((k, v.copy()) for k, v in model.local_params().items())
    buffers = {}
    for name, layer in stats_layers(model):
        if not isinstance(layer, HybridBatchNorm):
            buffers[name] = tuple(a.copy() for a in layer.stats)
    return ClientUpdate(client.cid, OrderedDict((k, v.copy()) for k, v in model.weights().items()),
                        dict(stats or {}), n, buffers, float(np.mean(losses)) if losses else None,
                        stats_capped)


def _check_updates(updates, plan: RoundPlan):
    ids = [u.cid for u in updates]
    if sorted(ids) != list(plan.participants):
        raise ProtocolError(f"updates from {sorted(ids)} do not match participants {list(plan.participants)}")
    return sorted(updates, key=lambda u: u.cid)


def aggregate_weights(updates, plan: RoundPlan) -> "OrderedDict[str, np.ndarray]":
    """Sample-count weighted mean of the uploaded weights (float64, ascending client id)."""
    updates = _check_updates(updates, plan)
    w = plan.weights
    names = list(updates[0].weights)
    out = OrderedDict()
    for name in names:
        acc = np.zeros(updates[0].weights[name].shape, dtype=np.float64)
        for u in updates:
            if list(u.weights) != names:
                raise ProtocolError(f"client {u.cid} uploaded misaligned parameters")
            acc += w[u.cid] * u.weights[name].astype(np.float64)
        out[name] = acc.astype(updates[0].weights[name].dtype)
    return out


def aggregate_stats_unbiased(updates, plan: RoundPlan) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Pool per-client (count, mean, population variance) into global mean / sample variance.

    mean_g = sum_k n_k mean_k / N
    var_g  = sum_k n_k (var_k + (mean_k - mean_g)^2) / (N - 1)

    where n_k are per-channel element counts. This equals the N-1
    denominator variance of the pooled activations.
    """
    updates = _check_updates(updates, plan)
    out = {}
    for name in updates[0].stats:
        parts = [u.stats[name] for u in updates]
        counts = np.array([p.count for p in parts], dtype=np.float64)
        total = counts.sum()
        if total < 2:
            raise DegenerateVarianceError(f"layer {name}: need at least 2 pooled values, got {int(total)}")
        means = [p.mean for p in parts]
        mean_g = sum(c * m for c, m in zip(counts, means)) / total
        var_g = sum(c * (p.var + (m - mean_g) ** 2) for c, p, m in zip(counts, parts, means)) / (total - 1)
        out[name] = (mean_g, var_g)
    return out


def aggregate_buffers_naive(updates, plan: RoundPlan) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Plain sample-weighted average of locally tracked (mean, var) buffers."""
    updates = _check_updates(updates, plan)
    w = plan.weights
    out = {}
    for name in updates[0].buffers:
        mean = sum(w[u.cid] * u.buffers[name][0] for u in updates)
        var = sum(w[u.cid] * u.buffers[name][1] for u in updates)
        out[name] = (np.asarray(mean, np.float64), np.asarray(var, np.float64))
    return out


def server_ema(prev, new, lam: float):
    """Blend freshly aggregated stats into the previous global ones."""
    if not prev:
        return {k: (m.copy(), v.copy()) for k, (m, v) in new.items()}
    return {k: ema_update(prev[k], new[k], lam) if k in prev else new[k] for k in new}


def pooled_oracle_stats(model: Sequential, gm: GlobalModel, x: np.ndarray,
                        batch_size: int = EVAL_BATCH) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Reference stats: capture every stats-layer input over ``x`` and reduce directly.

    Shares no code with ChannelStats or the pooling formula: activations are
    concatenated and reduced with ``np.mean`` / ``np.var(ddof=1)``.
    """
    load_global(model, gm)
    names = {id(layer): name for name, layer in stats_layers(model)}
    captured = {name: [] for name in names.values()}
    for sl in _batches(len(x), batch_size):
        h = x[sl]
        for layer in model:
            if id(layer) in names:
                captured[names[id(layer)]].append(h.astype(np.float64))
            h = layer.forward(h, Mode.EVAL)
    out = {}
    for name, chunks in captured.items():
        a = np.concatenate(chunks)
        a = np.moveaxis(a, 1, 0).reshape(a.shape[1], -1)
        out[name] = (a.mean(axis=1), a.var(axis=1, ddof=1))
    return out


def stats_gap(agg, oracle) -> float:
    """Mean standardised deviation of aggregated statistics from an oracle.

    Per channel: |d mean| / sd and |d var| / var; averaged over the channels of
    each layer, then over layers. The mean is used rather than the worst
    channel so one noisy channel does not dominate comparisons across runs.
    """
    per_layer = []
    for name, (mo, vo) in oracle.items():
        ma, va = agg[name]
        vo = np.maximum(vo, 1e-300)
        per_layer.append(np.concatenate([np.abs(ma - mo) / np.sqrt(vo), np.abs(va - vo) / vo]).mean())
    return float(np.mean(per_layer)) if per_layer else 0.0


def relative_stats_error(agg, oracle) -> float:
    """max |a - o| / |o| over every channel's mean and variance."""
    worst = 0.0
    for name, (mo, vo) in oracle.items():
        ma, va = agg[name]
        for a, o in ((ma, mo), (va, vo)):
            worst = max(worst, float(np.max(np.abs(a - o) / np.maximum(np.abs(o), 1e-300))))
    return worst


def evaluate_accuracy(model: Sequential, gm: GlobalModel, test: Dataset, batch_size: int = EVAL_BATCH) -> float:
    """Top-1 accuracy in eval mode with the global weights and statistics."""
    load_global(model, gm)
    correct = 0
    for sl in _batches(len(test), batch_size):
        correct += int((model.forward(test.x[sl], Mode.EVAL).argmax(axis=1) == test.y[sl]).sum())
    return correct / max(len(test), 1)


class Federation:
    """One seeded federated experiment: clients, their data, and the server state."""

    def __init__(self, cfg: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None):
        self.cfg = cfg.validate()
        if train is None:
            train, test = datasets_for(cfg)
        self.train, self.test = train, test
        spec = PartitionSpec(cfg.num_clients, cfg.phi, derive_seed(cfg.seed, "partition"),
                             cfg.effective_min_samples)
        self.partition = dirichlet_partition(train.y, spec)
        self.clients = [ClientRecord(k, idx) for k, idx in enumerate(self.partition)]
        self.client_data = [train.subset(idx) for idx in self.partition]
        self.model = self._build()
        self.global_model = extract_global(self.model, 0)
        self._local = threading.local()
        self._pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def _build(self) -> Sequential:
        c = self.cfg
        in_channels = self.train.x.shape[1]
        return build_simple_cnn(c.num_classes, norm_kind_for(c.mode), in_channels=in_channels,
                                image_size=self.train.x.shape[2], seed=derive_seed(c.seed, "init"), eps=c.eps)

    def _worker_model(self) -> Sequential:
        if self.cfg.threads == 1:
            return self.model
        m = getattr(self._local, "model", None)
        if m is None:
            m = self._local.model = copy.deepcopy(self.model)
        return m

    def _map(self, fn, ids):
        if self._pool is None:
            return [fn(k) for k in ids]
        return list(self._pool.map(fn, ids))

    def plan(self, t: int) -> RoundPlan:
        return make_plan(t, self.clients, self.cfg.clients_per_round, derive_rng(self.cfg.seed, "participants", t))

    def lr_at(self, t: int) -> float:
        return self.cfg.lr * self.cfg.lr_decay ** (t - 1)

    @property
    def uses_hbn(self) -> bool:
        return self.cfg.mode == "hbn"

    def collect(self, gm: GlobalModel, k: int, stop: int | None = None):
        return client_collect_stats(self._worker_model(), gm, self.client_data[k], cap=self.cfg.stats_cap, stop=stop)

    def bootstrap(self) -> None:
        """Initialise HBN global stats from the round-0 participants, one layer at a time.

        Each layer's statistics are pooled before the next layer is collected,
        so every collection pass normalises with already-initialised stats.
        """
        if not self.uses_hbn or self.global_model.stats:
            return
        plan = self.plan(0)
        gm = self.global_model
        for index, layer in enumerate(self.model.layers):
            if not isinstance(layer, HybridBatchNorm):
                continue
            name = str(index)
            stats = self._map(lambda k: self.collect(gm, k, stop=index), plan.participants)
            updates = [ClientUpdate(k, OrderedDict(), {name: s[name]}, self.clients[k].num_samples)
                       for k, s in zip(plan.participants, stats)]
            gm.stats.update(aggregate_stats_unbiased(updates, plan))

    def _client_round(self, gm: GlobalModel, t: int, k: int, train: bool) -> ClientUpdate:
        cfg = self.cfg
        stats = self.collect(gm, k) if self.uses_hbn else {}
        capped = bool(cfg.stats_cap) and cfg.stats_cap < self.clients[k].num_samples
        if not train:
            return ClientUpdate(k, OrderedDict(), stats, self.clients[k].num_samples, stats_capped=capped)
        return client_local_train(
            self._worker_model(), gm, self.clients[k], self.client_data[k], epochs=cfg.local_epochs,
            batch_size=cfg.batch_size, lr=self.lr_at(t), momentum=cfg.momentum,
            rng=derive_rng(cfg.seed, "shuffle", t, k), stats=stats,
            frozen=cfg.mode == "fixbn" and t > cfg.freeze_round, stats_capped=capped)

    def run_round(self, t: int, final: bool = False) -> MetricsRow:
        """Advance the global model by one round; ``final`` refreshes statistics only."""
        cfg = self.cfg
        gm = self.global_model
        if self.uses_hbn and not gm.stats:
            self.bootstrap()
        plan = self.plan(t)
        updates = self._map(lambda k: self._client_round(gm, t, k, not final), plan.participants)
        losses = [u.train_loss for u in updates if u.train_loss is not None]
        new = gm.copy()
        new.round = t
        gap = None
        if not final:
            new.weights = aggregate_weights(updates, plan)
        if self.uses_hbn:
            fresh = aggregate_stats_unbiased(updates, plan)
            if cfg.measure_gap:
                pooled = np.concatenate([self.client_data[k].x for k in plan.participants])
                gap = stats_gap(fresh, pooled_oracle_stats(self.model, gm, pooled))
            new.stats = server_ema(gm.stats, fresh, cfg.ema)
        elif updates and updates[0].buffers:
            new.stats = aggregate_buffers_naive(updates, plan)
            if cfg.measure_gap:
                pooled = np.concatenate([self.client_data[k].x for k in plan.participants])
                gap = stats_gap(new.stats, pooled_oracle_stats(self.model, new, pooled))
        self.global_model = new
        last = t == self.total_rounds
        acc = None
        if self.test is not None and len(self.test) and (t % cfg.eval_every == 0 or last):
            acc = evaluate_accuracy(self.model, new, self.test)
        return MetricsRow(t, cfg.mode, acc, float(np.mean(losses)) if losses else None, gap,
                          self.lr_at(t), list(plan.participants))

    @property
    def total_rounds(self) -> int:
        return self.cfg.rounds + (1 if self.uses_hbn else 0)

    def run(self, on_round=None) -> list[MetricsRow]:
        rows = []
        self.bootstrap()
        for t in range(1, self.total_rounds + 1):
            row = self.run_round(t, final=self.uses_hbn and t == self.cfg.rounds + 1)
            rows.append(row)
            if on_round:
                on_round(row)
        return rows


def run_training(cfg: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None,
                 on_round=None) -> tuple[GlobalModel, list[MetricsRow]]:
    """T weight-updating rounds (plus, for HBN, one statistics-only round)."""
    fed = Federation(cfg, train, test)
    rows = fed.run(on_round)
    return fed.global_model, rows
