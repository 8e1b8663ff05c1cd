"""Replayable Gaussian perturbations shared by clients and server.

Construction
------------
Everything here is built on the SplitMix64 finalizer ``mix64`` (a bijection
on 64-bit integers).

* ``derive_seed(schedule, r, t) = mix64(mix64(master) XOR ((r << 32) | t))``.
  For a fixed master seed this is injective in ``(r, t)`` for
  ``r, t < 2**32``, so seeds never collide within a run.
* The perturbation stream for a seed ``s`` is the SplitMix64 sequence
  ``u_i = mix64(s + (i + 1) * GAMMA)`` (mod 2**64), i.e. a counter-based
  keyed generator: element ``i`` depends only on ``(s, i)``.
* Each 64-bit word becomes a uniform in the open interval (0, 1) as
  ``((u >> 11) + 0.5) * 2**-53`` and then a standard normal through the
  inverse normal CDF (``scipy.special.ndtri``).

Only ``|support|`` values are drawn; element ``i`` of the stream is assigned
to the ``i``-th smallest support index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = [
    "SeedSchedule",
    "derive_seed",
    "masked_gaussian",
    "masked_gaussian_many",
    "gaussian_stream",
    "mix64",
]

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_CALIBRATION_KEY = 0xC0FFEE5EED5EED01


def mix64(x: int) -> int:
    """SplitMix64 output function on a Python integer."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64, which is what the mixer needs
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(_M1)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(_M2)
    return x ^ (x >> np.uint64(31))


@dataclass(frozen=True)
class SeedSchedule:
    """Deterministic map from ``(round, step)`` to a 64-bit perturbation seed."""

    master_seed: int

    def __post_init__(self):
        if not isinstance(self.master_seed, (int, np.integer)):
            raise TypeError(f"master_seed must be an integer, got {self.master_seed!r}")
        object.__setattr__(self, "master_seed", int(self.master_seed) & MASK64)

    def seed(self, round: int, step: int) -> int:
        return derive_seed(self, round, step)

    def seed_list(self, round: int, steps: int) -> list[int]:
        """Seeds ``s_r^1 .. s_r^T`` the server hands out for one round."""
        return [derive_seed(self, round, t) for t in range(1, steps + 1)]

    def calibration(self) -> "SeedSchedule":
        """Independent schedule reserved for the calibration phase."""
        return SeedSchedule(mix64(self.master_seed ^ _CALIBRATION_KEY))


def derive_seed(schedule: SeedSchedule, round: int, step: int) -> int:
    if round < 1 or step < 1:
        raise ValueError(f"round and step must be >= 1, got ({round}, {step})")
    if round >= 1 << 32 or step >= 1 << 32:
        raise ValueError("round and step must fit in 32 bits")
    return mix64(mix64(schedule.master_seed) ^ ((round << 32) | step))


def gaussian_stream(seed: int, n: int) -> np.ndarray:
    """First ``n`` standard-normal values of the stream keyed by ``seed``."""
    if n == 0:
        return np.zeros(0)
    counters = np.arange(1, n + 1, dtype=np.uint64)
    state = np.uint64(int(seed) & MASK64) + counters * np.uint64(GAMMA)
    words = _mix64_array(state)
    uniforms = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(uniforms)


def masked_gaussian(seed: int, mask) -> np.ndarray:
    """Gaussian values for the support of ``mask`` in ascending index order.

    Returns a length-``|support|`` array ``v`` such that the dense
    perturbation is ``z_bar[mask.support] = v`` and zero elsewhere
    (see ``SparseMask.embed``).
    """
    return gaussian_stream(seed, mask.size)


def masked_gaussian_many(seeds, mask) -> np.ndarray:
    """Stack of ``masked_gaussian`` draws, one row per seed."""
    seeds = np.asarray([int(s) & MASK64 for s in seeds], dtype=np.uint64)
    n = mask.size
    if n == 0:
        return np.zeros((len(seeds), 0))
    counters = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
    words = _mix64_array(seeds[:, None] + counters[None, :])
    uniforms = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(uniforms)
