"""Datasets, Dirichlet label-skew partitioning and the two-cluster toy."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from fedhbn.nn.losses import DataError
from fedhbn.normalization import ChannelStats, hybrid_mix
from fedhbn.seeding import derive_seed

# per-channel constants applied after scaling pixels to [0, 1]
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
# scale of the image structure common to all synthetic classes, relative to the class-specific part
SHARED_STRUCTURE = 3.0
CIFAR10_RECORD = 3073
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    phi: float
    seed: int = 0
    min_samples: int = 8
    max_attempts: int = 100

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if not self.phi > 0:
            raise ValueError(f"Dirichlet coefficient must be positive, got {self.phi}")
        if self.min_samples < 0:
            raise ValueError("min_samples must be non-negative")


def dirichlet_partition(labels, spec: PartitionSpec) -> list[np.ndarray]:
    """Split indices across clients with per-class Dir(phi) proportions.

    For every class a proportion vector over clients is drawn and that
    class's (shuffled) indices are cut accordingly. The whole draw is
    repeated until every client holds ``min_samples`` indices.
    """
    labels = np.asarray(labels)
    k = spec.num_clients
    if spec.min_samples * k > labels.size:
        raise PartitionError(f"{labels.size} samples cannot give {k} clients {spec.min_samples} each")
    rng = np.random.default_rng(spec.seed)
    classes = np.unique(labels)
    for _ in range(spec.max_attempts):
        parts = [[] for _ in range(k)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            p = rng.dirichlet(np.full(k, spec.phi))
            cuts = (np.cumsum(p)[:-1] * idx.size).astype(np.int64)
            for client, chunk in enumerate(np.split(idx, cuts)):
                parts[client].append(chunk)
        out = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(p) for p in out) >= spec.min_samples:
            return out
    raise PartitionError(
        f"no partition with >= {spec.min_samples} samples per client after {spec.max_attempts} attempts")


def export_partition(parts, path) -> None:
    """Write ``{client_id: [indices]}`` JSON for auditing."""
    Path(path).write_text(json.dumps({str(i): p.tolist() for i, p in enumerate(parts)}))


def label_histograms(labels, parts, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([np.bincount(labels[p], minlength=num_classes) for p in parts]).astype(np.float64)


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    y = np.arange(n) % classes
    rng.shuffle(y)
    return y


def synth_classification(classes: int, dims, n: int, separation: float, seed: int = 0, *,
                         noise: float = 1.0) -> Dataset:
    """Balanced synthetic classification data.

    ``dims`` an int gives flat Gaussian blobs with class centres at
    ``separation`` times a random unit-variance direction. ``dims`` a
    (channels, size) pair gives procedural images instead: a smooth
    pattern (a strong structure shared by every class plus a class-specific
    component) and a per-class colour cast, times a per-class amplitude,
    scaled by ``separation``, with mild per-sample contrast
    jitter, a random shift of up to two pixels, and i.i.d. pixel noise.
    Class amplitude is information that per-sample normalisation discards
    and batch-level statistics keep.
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n, classes, rng)
    if np.isscalar(dims):
        centres = rng.normal(size=(classes, int(dims)))
        x = separation * centres[y] + noise * rng.normal(size=(n, int(dims)))
        return Dataset(x.astype(np.float32), y, classes)

    channels, size = dims
    shared = SHARED_STRUCTURE * rng.normal(size=(1, channels, 4, 4))
    coarse = shared + rng.normal(size=(classes, channels, 4, 4))
    patterns = zoom(coarse, (1, 1, size / 4, size / 4), order=1)
    cast = 0.5 * rng.normal(size=(classes, channels, 1, 1))
    amplitude = rng.uniform(0.5, 1.5, size=(classes, 1, 1, 1))
    protos = (patterns + cast) * amplitude
    contrast = rng.uniform(0.9, 1.1, size=(n, 1, 1, 1))
    shifts = rng.integers(-2, 3, size=(n, 2))
    x = separation * protos[y] * contrast
    for i, (dy, dx) in enumerate(shifts):
        x[i] = np.roll(x[i], (dy, dx), axis=(1, 2))
    x += noise * rng.normal(size=x.shape)
    return Dataset(x.astype(np.float32), y, classes)


def synth_train_test(classes: int, dims, n_train: int, n_test: int, separation: float,
                     seed: int = 0, **kw) -> tuple[Dataset, Dataset]:
    """Draw train and test sets from the same class prototypes."""
    full = synth_classification(classes, dims, n_train + n_test, separation, seed, **kw)
    return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))


def load_cifar10_binary(path) -> Dataset:
    """Decode one CIFAR-10 binary batch file.

    Each record is one label byte followed by 3072 pixel bytes (R, G, B
    planes of 32x32, row-major). Pixels are scaled to [0, 1] and then
    standardised with ``CIFAR10_MEAN`` / ``CIFAR10_STD``.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR10_RECORD:
        raise DataError(f"{path}: {raw.size} bytes is not a whole number of {CIFAR10_RECORD}-byte records")
    rec = raw.reshape(-1, CIFAR10_RECORD)
    y = rec[:, 0].astype(np.int64)
    if y.max() > 9:
        raise DataError(f"{path}: label {y.max()} out of range for CIFAR-10")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    mean = np.asarray(CIFAR10_MEAN, np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR10_STD, np.float32).reshape(1, 3, 1, 1)
    return Dataset((x - mean) / std, y, 10)


def load_cifar10(data_dir=None) -> tuple[Dataset, Dataset]:
    """Train (50000) and test (10000) sets from ``data_dir`` or $FHBN_DATA_DIR."""
    data_dir = Path(data_dir or os.environ.get("FHBN_DATA_DIR", "."))
    for sub in ("", "cifar-10-batches-bin"):
        root = data_dir / sub
        if (root / CIFAR10_TEST_FILE).exists():
            break
    else:
        raise FileNotFoundError(f"no CIFAR-10 binary files under {data_dir}")
    parts = [load_cifar10_binary(root / f) for f in CIFAR10_TRAIN_FILES]
    train = Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]), 10)
    return train, load_cifar10_binary(root / CIFAR10_TEST_FILE)


def make_two_cluster_toy(n: int, means, covariances, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Two 2-D Gaussian clusters standing in for two clients' activations."""
    rng = np.random.default_rng(seed)
    out = []
    for label, (mu, cov) in enumerate(zip(means, covariances)):
        cov = np.asarray(cov, np.float64)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("covariance must be a symmetric positive semi-definite 2x2 matrix")
        pts = rng.multivariate_normal(np.asarray(mu, np.float64), cov, size=n, method="eigh")
        out.append(Dataset(pts, np.full(n, label), 2))
    return out[0], out[1]


def fig2_panels(a: np.ndarray, b: np.ndarray, alpha: float = 0.0, eps: float = 1e-5) -> dict:
    """Normalise two clusters four ways: raw, per-cluster, pooled, hybrid.

    Each coordinate is treated as a channel. Hybrid normalisation uses each
    cluster's own statistics as the batch statistics and the pooled
    statistics as the global ones.
    """
    sa, sb = ChannelStats(len(a), a.sum(0), (a * a).sum(0)), ChannelStats(len(b), b.sum(0), (b * b).sum(0))
    pooled = sa.merge(sb)

    def norm(x, mu, var):
        return (x - mu) / np.sqrt(var + eps)

    alpha = np.full(a.shape[1], alpha)
    hybrid = []
    for pts, st in ((a, sa), (b, sb)):
        mu, var = hybrid_mix(alpha, st.mean, st.var, pooled.mean, pooled.var)
        hybrid.append(norm(pts, mu, var))
    return {
        "raw": (a, b),
        "local": (norm(a, sa.mean, sa.var), norm(b, sb.mean, sb.var)),
        "global": (norm(a, pooled.mean, pooled.var), norm(b, pooled.mean, pooled.var)),
        "hybrid": tuple(hybrid),
    }


def cluster_mean_distance(pair) -> float:
    return float(np.linalg.norm(pair[0].mean(0) - pair[1].mean(0)))


def write_fig2_csv(panels: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("panel,cluster,x,y\n")
        for name, pair in panels.items():
            for cluster, pts in enumerate(pair):
                for px, py in pts:
                    fh.write(f"{name},{cluster},{px:.6g},{py:.6g}\n")


def datasets_for(cfg) -> tuple[Dataset, Dataset]:
    """Train/test sets named by an ``ExperimentConfig``."""
    if cfg.dataset == "cifar10":
        train, test = load_cifar10(cfg.data_dir or None)
        return train.subset(np.arange(min(cfg.n_train, len(train)))), \
            test.subset(np.arange(min(cfg.n_test, len(test))))
    return synth_train_test(cfg.num_classes, (3, cfg.image_size), cfg.n_train, cfg.n_test,
                            cfg.separation, derive_seed(cfg.data_seed, "data"), noise=cfg.noise)
