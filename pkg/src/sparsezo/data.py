"""Synthetic datasets and client partitions (IID, Dirichlet label skew, single label)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import Batch

__all__ = [
    "Dataset",
    "PartitionSpec",
    "make_blobs",
    "partition",
    "split_calibration",
    "batches",
    "label_histograms",
    "save_dataset",
    "load_dataset",
]

PARTITION_KINDS = ("iid", "dirichlet", "single-label", "mixed")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.labels, dtype=np.int64)
        if X.shape[0] < 1 or y.shape != (X.shape[0],):
            raise ValueError("dataset needs N >= 1 samples with one label each")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset over ``K`` clients.

    ``mixed`` is an extension: the first ``n_single`` clients hold one label
    each (a share ``single_fraction`` of that label's samples) and the rest
    split everything else IID.
    """

    kind: str = "iid"
    K: int = 10
    alpha: float = 0.5
    seed: int = 0
    n_single: int = 0
    single_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ValueError(f"partition kind must be one of {PARTITION_KINDS}, got {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise ValueError("dirichlet alpha must be positive")
        if self.kind == "mixed" and not (0 <= self.n_single <= self.K):
            raise ValueError("n_single must be in [0, K]")
        if self.kind == "mixed" and not (0 < self.single_fraction <= 1):
            raise ValueError("single_fraction must be in (0, 1]")


def make_blobs(C, per_class, feature_dim, spread=1.0, seed=0, separation=1.0) -> Dataset:
    """Isotropic Gaussian clusters, ``per_class`` samples for each of ``C`` classes.

    Class means are ``separation / sqrt(2)`` times orthonormal directions
    (random unit directions when ``feature_dim < C``), so with enough
    features every pair of means is exactly ``separation`` apart.
    """
    if C < 2:
        raise ValueError("need at least two classes")
    if per_class < 1 or feature_dim < 1:
        raise ValueError("per_class and feature_dim must be positive")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((feature_dim, max(C, 1)))
    if feature_dim >= C:
        directions, _ = np.linalg.qr(G)
        directions = directions[:, :C].T
    else:
        directions = (G / np.linalg.norm(G, axis=0)).T
    means = directions * (separation / np.sqrt(2.0))
    labels = np.repeat(np.arange(C), per_class)
    X = means[labels] + spread * rng.standard_normal((labels.size, feature_dim))
    return Dataset(X, labels, C)


def split_calibration(ds: Dataset, fraction=0.1, seed=0):
    """Carve a held-out calibration split; returns ``(calib_idx, train_idx)``."""
    if not 0 < fraction < 1:
        raise ValueError("calibration fraction must be in (0, 1)")
    n_calib = max(1, int(round(fraction * len(ds))))
    if n_calib >= len(ds):
        raise ValueError("calibration split would leave no training data")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return np.sort(perm[:n_calib]), np.sort(perm[n_calib:])


def _rebalance(parts):
    # move one sample from the largest client into each empty one
    while True:
        sizes = [len(p) for p in parts]
        empty = [k for k, s in enumerate(sizes) if s == 0]
        if not empty:
            return parts
        donor = int(np.argmax(sizes))
        parts[empty[0]].append(parts[donor].pop())


def partition(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Disjoint index lists covering ``range(len(ds))``, one per client."""
    N, K = len(ds), spec.K
    if K > N:
        raise ValueError(f"cannot split {N} samples over {K} clients")
    rng = np.random.default_rng(spec.seed)

    if spec.kind == "iid":
        return [np.sort(p) for p in np.array_split(rng.permutation(N), K)]

    if spec.kind == "dirichlet":
        parts = [[] for _ in range(K)]
        for c in range(ds.num_classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            if idx.size == 0:
                continue
            proportions = rng.dirichlet(np.full(K, spec.alpha))
            cuts = (np.cumsum(proportions)[:-1] * idx.size).astype(int)
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].extend(chunk.tolist())
        parts = _rebalance(parts)
        return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]

    if spec.kind == "single-label":
        C = ds.num_classes
        if K < C:
            raise ValueError("single-label partition needs K >= number of classes")
        out = [None] * K
        for c in range(C):
            owners = list(range(c, K, C))
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            if idx.size < len(owners):
                raise ValueError(f"label {c} has fewer samples than its {len(owners)} clients")
            for k, chunk in zip(owners, np.array_split(idx, len(owners))):
                out[k] = np.sort(chunk)
        return out

    # mixed
    C = ds.num_classes
    out = []
    taken = np.zeros(N, dtype=bool)
    for k in range(spec.n_single):
        c = k % C
        owners = len(range(c, spec.n_single, C))
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        share = int(spec.single_fraction * idx.size) // owners
        mine = [i for i in idx if not taken[i]][:share]
        if not mine:
            raise ValueError(f"no samples of label {c} left for single-label client {k}")
        taken[mine] = True
        out.append(np.sort(np.asarray(mine, dtype=np.int64)))
    pool = rng.permutation(np.flatnonzero(~taken))
    n_iid = K - spec.n_single
    if n_iid == 0:
        if pool.size:
            raise ValueError("mixed partition with no IID clients leaves samples unassigned")
        return out
    if pool.size < n_iid:
        raise ValueError("not enough samples for the IID clients")
    out.extend(np.sort(p) for p in np.array_split(pool, n_iid))
    return out


def batches(ds: Dataset, indices, batch_size=16, seed=0) -> list[Batch]:
    """Fixed seeded shuffle of ``indices`` cut into batches; the last may be short."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot batch an empty index list")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(indices)
    return [
        Batch(ds.inputs[chunk], ds.labels[chunk])
        for chunk in (order[i : i + batch_size] for i in range(0, order.size, batch_size))
    ]


def label_histograms(ds: Dataset, parts) -> np.ndarray:
    """Row-normalised label distribution of each client."""
    H = np.array([np.bincount(ds.labels[p], minlength=ds.num_classes) for p in parts], dtype=float)
    return H / H.sum(axis=1, keepdims=True)


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(ds.n_features)] + ["label"])
        for x, y in zip(ds.inputs, ds.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def load_dataset(path, num_classes=None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ValueError("last CSV column must be 'label'")
    X = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    C = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(X, y, C)
