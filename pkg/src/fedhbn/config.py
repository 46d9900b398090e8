from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

from fedhbn.nn.layers import ConfigError
from fedhbn.nn.models import NORM_CHOICES

MODES = ("hbn", "naive_bn", "gn", "ln", "fixbn", "fbn", "none")
DATASETS = ("synthetic", "cifar10")


def norm_kind_for(mode: str) -> str:
    return "bn" if mode == "naive_bn" else mode


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = ""
    num_clients: int = 10
    participation: float = 1.0
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 4
    phi: float = 0.6
    mode: str = "hbn"
    lr: float = 0.01
    lr_decay: float = 0.998
    momentum: float = 0.9
    ema: float = 0.01
    eps: float = 1e-5
    seed: int = 0
    data_seed: int = 0  # synthetic dataset draw; fixed across master seeds, like a real dataset
    stats_cap: int = 0  # 0: use each client's full dataset for statistics
    min_samples: int = 0  # 0: 2 * batch_size
    num_classes: int = 10
    image_size: int = 32
    n_train: int = 1000
    n_test: int = 500
    separation: float = 1.0
    noise: float = 1.0
    eval_every: int = 1
    measure_gap: bool = False
    threads: int = 1
    out: str = ""
    data_dir: str = ""

    def validate(self) -> "ExperimentConfig":
        if not self.dataset:
            raise ConfigError("dataset is required (one of: " + ", ".join(DATASETS) + ")")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if norm_kind_for(self.mode) not in NORM_CHOICES:
            raise ConfigError(f"mode {self.mode!r} has no norm layer")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError(f"participation must lie in (0, 1], got {self.participation}")
        if not 0.0 < self.ema <= 1.0:
            raise ConfigError(f"ema must lie in (0, 1], got {self.ema}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("num_clients", "batch_size", "num_classes", "image_size", "n_train",
                     "n_test", "eval_every", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("rounds", "local_epochs", "stats_cap", "min_samples", "seed", "data_seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("phi", "eps", "lr_decay"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.separation < 0 or self.noise < 0:
            raise ConfigError("lr, separation and noise must be non-negative")
        if self.clients_per_round < 1:
            raise ConfigError("participation * num_clients must give at least one client")
        return self

    @property
    def clients_per_round(self) -> int:
        # guard against 0.1 * 10 = 1.0000000000000002 style round-up
        return math.ceil(round(self.participation * self.num_clients, 9))

    @property
    def freeze_round(self) -> int:
        return math.ceil(self.rounds / 2)

    @property
    def effective_min_samples(self) -> int:
        return self.min_samples or 2 * self.batch_size

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
