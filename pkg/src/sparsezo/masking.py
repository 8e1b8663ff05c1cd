"""Static sparse parameter masks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SparseMask",
    "avg_squared_gradients",
    "top_k_mask",
    "baseline_mask",
    "mask_size",
    "save_mask",
    "load_mask",
]


@dataclass(frozen=True, eq=False)
class SparseMask:
    """Sorted set of selected parameter indices out of ``dim``.

    ``density`` is the ratio ``|support| / dim``; ``size`` is the count.
    """

    dim: int
    support: np.ndarray

    def __post_init__(self):
        support = np.array(self.support, dtype=np.int64).ravel()
        if self.dim < 1:
            raise ValueError("mask dimension must be positive")
        if support.size < 1:
            raise ValueError("mask support must be non-empty")
        if np.any(np.diff(support) <= 0):
            raise ValueError("mask support must be strictly increasing")
        if support[0] < 0 or support[-1] >= self.dim:
            raise ValueError(f"mask support must lie in [0, {self.dim})")
        support.setflags(write=False)
        object.__setattr__(self, "support", support)

    @property
    def size(self) -> int:
        return int(self.support.size)

    @property
    def density(self) -> float:
        return self.size / self.dim

    def embed(self, values) -> np.ndarray:
        """Dense length-``dim`` vector with ``values`` on the support."""
        out = np.zeros(self.dim)
        out[self.support] = values
        return out

    def to_dense(self) -> np.ndarray:
        m = np.zeros(self.dim)
        m[self.support] = 1.0
        return m

    def __eq__(self, other):
        if not isinstance(other, SparseMask):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.support, other.support)

    def __hash__(self):
        return hash((self.dim, self.support.tobytes()))

    def __repr__(self):
        return f"SparseMask(dim={self.dim}, size={self.size}, density={self.density:.3g})"


def mask_size(dim: int, density: float) -> int:
    """Number of selected parameters, ``max(1, floor(density * dim))``."""
    if not (0 < density <= 1) or not math.isfinite(density):
        raise ValueError(f"density must be in (0, 1], got {density!r}")
    return max(1, math.floor(density * dim))


def avg_squared_gradients(model, w, calib) -> np.ndarray:
    """Elementwise mean over calibration batches of the squared exact gradient."""
    calib = list(calib)
    if not calib:
        raise ValueError("calibration set is empty")
    acc = np.zeros(model.dim)
    for batch in calib:
        acc += model.grad(w, batch) ** 2
    return acc / len(calib)


def top_k_mask(scores, density: float) -> SparseMask:
    """Keep the ``max(1, floor(density * d))`` highest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=float).ravel()
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    k = mask_size(scores.size, density)
    # stable sort of the negated scores keeps lower indices first among ties
    order = np.argsort(-scores, kind="stable")
    return SparseMask(scores.size, np.sort(order[:k]))


def baseline_mask(kind: str, w, density: float, seed: int = 0) -> SparseMask:
    """Non-gradient masks: ``weight-magnitude``, ``random`` or ``full``."""
    w = np.asarray(w, dtype=float).ravel()
    if kind == "full":
        return SparseMask(w.size, np.arange(w.size))
    if kind == "weight-magnitude":
        return top_k_mask(np.abs(w), density)
    if kind == "random":
        k = mask_size(w.size, density)
        rng = np.random.default_rng(seed)
        return SparseMask(w.size, np.sort(rng.choice(w.size, size=k, replace=False)))
    raise ValueError(f"unknown baseline mask kind {kind!r}")


def save_mask(mask: SparseMask, path) -> None:
    lines = [f"dim={mask.dim} density={mask.density!r}"]
    lines.extend(str(int(i)) for i in mask.support)
    Path(path).write_text("\n".join(lines) + "\n")


def load_mask(path) -> SparseMask:
    lines = Path(path).read_text().split("\n")
    header = dict(item.split("=", 1) for item in lines[0].split())
    try:
        dim = int(header["dim"])
        density = float(header["density"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed mask header {lines[0]!r}") from exc
    mask = SparseMask(dim, [int(line) for line in lines[1:] if line.strip()])
    if not math.isclose(mask.density, density, rel_tol=1e-12):
        raise ValueError(f"header density {density} disagrees with {mask.size}/{dim} indices")
    return mask
