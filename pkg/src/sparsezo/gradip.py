"""GradIP trajectories from virtual paths and early-stopping client selection.

GradIP at local step ``t`` is the inner product between the reconstructed
sparse ZO gradient ``g_t * z_bar_t`` and a frozen calibration gradient.
Clients whose trajectory collapses (large initial-to-later ratio, or most
late steps under the convergence threshold) are flagged and limited to one
local step per round afterwards.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .prng import derive_seed, masked_gaussian
from .zo import apply_update, zo_gradient

__all__ = [
    "VpConfig",
    "GradIPTrajectory",
    "Classification",
    "pretrain_gradient",
    "gradip_score",
    "trace_client",
    "classify",
    "vp_policy",
    "random_flags",
    "moving_average",
    "local_gradient_norms",
    "write_trajectories_csv",
]

ZERO_GUARD = 1e-12


@dataclass(frozen=True)
class VpConfig:
    """Calibration length, phase windows and classification thresholds."""

    T_cali: int = 100
    T_init: int = 20
    T_later: int = 20
    sigma: float = 1.0
    rho_later: float = 2.0
    rho_quie: float = 0.5
    restrict_cosine: bool = False

    def __post_init__(self):
        if min(self.T_cali, self.T_init, self.T_later) < 1:
            raise ValueError("T_cali, T_init and T_later must be >= 1")
        if self.T_init + self.T_later > self.T_cali:
            raise ValueError("T_init + T_later must not exceed T_cali")
        for name in ("sigma", "rho_later", "rho_quie"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a finite positive number, got {value!r}")


@dataclass(frozen=True, eq=False)
class GradIPTrajectory:
    client_id: int
    values: np.ndarray
    grad_norm: np.ndarray
    cosine: np.ndarray

    def __len__(self):
        return len(self.values)

    def rows(self):
        for t, (v, n, c) in enumerate(zip(self.values, self.grad_norm, self.cosine), start=1):
            yield self.client_id, t, float(v), float(n), float(c)


@dataclass(frozen=True)
class Classification:
    client_id: int
    flagged: bool
    init_avg: float
    later_avg: float
    rho_later_client: float
    rho_quie_client: float


def pretrain_gradient(model, w0, calib) -> np.ndarray:
    """Mean exact gradient over the calibration batches at ``w0``."""
    calib = list(calib)
    if not calib:
        raise ValueError("calibration set is empty")
    acc = np.zeros(model.dim)
    for batch in calib:
        acc += model.grad(w0, batch)
    return acc / len(calib)


def gradip_score(zo_grad, pretrain_grad, mask=None) -> float:
    """Inner product of a ZO gradient with the calibration gradient.

    With ``mask`` the ZO gradient is given by its support values only;
    off-support terms vanish either way.
    """
    pretrain_grad = np.asarray(pretrain_grad, dtype=float)
    if mask is not None:
        pretrain_grad = pretrain_grad[mask.support]
    return float(np.dot(np.asarray(zo_grad, dtype=float), pretrain_grad))


def trace_client(log, mask, schedule, pretrain_grad, T_cali=None, restrict_cosine=False):
    """Rebuild every local ZO gradient of ``log`` and score it.

    The cosine companion divides by the full calibration-gradient norm
    unless ``restrict_cosine`` asks for its norm on the mask support.
    """
    scalars = np.asarray(log.scalars, dtype=float)
    if T_cali is not None and scalars.size != T_cali:
        raise ValueError(f"log has {scalars.size} steps, expected {T_cali}")
    pretrain_grad = np.asarray(pretrain_grad, dtype=float)
    restricted = pretrain_grad[mask.support]
    ref_norm = np.linalg.norm(restricted if restrict_cosine else pretrain_grad)
    values, norms, cosines = [], [], []
    for t, g in enumerate(scalars, start=1):
        z = masked_gaussian(derive_seed(schedule, log.round, t), mask)
        est = zo_gradient(g, z)
        score = float(np.dot(est, restricted))
        norm = float(np.linalg.norm(est))
        denom = norm * ref_norm
        values.append(score)
        norms.append(norm)
        cosines.append(score / denom if denom > 0 else 0.0)
    return GradIPTrajectory(log.client_id, np.array(values), np.array(norms), np.array(cosines))


def local_gradient_norms(model, batch, w0, log, mask, schedule, eta) -> np.ndarray:
    """Exact ``||grad f_k||`` at each iterate a client evaluated, rebuilt from its log.

    Entry ``t - 1`` is the norm at the point where local step ``t`` was
    taken; ``batch`` is the data the norm is measured on (typically the
    client's whole shard).
    """
    w = np.array(w0, dtype=float)
    norms = []
    for t, g in enumerate(log.scalars, start=1):
        norms.append(float(np.linalg.norm(model.grad(w, batch))))
        z = masked_gaussian(derive_seed(schedule, log.round, t), mask)
        w = apply_update(w, mask, z, g, eta)
    return np.array(norms)


def classify(traj: GradIPTrajectory, cfg: VpConfig) -> Classification:
    values = np.asarray(traj.values, dtype=float)
    init_avg = float(values[: cfg.T_init].mean())
    later = values[-cfg.T_later :]
    later_avg = float(later.mean())
    rho_quie = float(np.count_nonzero(later < cfg.sigma) / cfg.T_later)
    if abs(later_avg) < ZERO_GUARD:
        rho_later = math.inf if abs(init_avg) >= ZERO_GUARD else 1.0
    else:
        rho_later = init_avg / later_avg
    flagged = rho_later > cfg.rho_later or rho_quie > cfg.rho_quie
    return Classification(traj.client_id, bool(flagged), init_avg, later_avg, rho_later, rho_quie)


def vp_policy(flags, T: int) -> list[int]:
    """Local steps per client: one for flagged clients, ``T`` otherwise."""
    return [1 if f else T for f in flags]


def random_flags(K: int, n_flagged: int, seed: int) -> list[bool]:
    """Early-stop ``n_flagged`` clients picked uniformly at random."""
    if not 0 <= n_flagged <= K:
        raise ValueError("n_flagged must be in [0, K]")
    chosen = set(np.random.default_rng(seed).choice(K, size=n_flagged, replace=False).tolist())
    return [k in chosen for k in range(K)]


def moving_average(values, window=10) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size < window:
        return np.array([values.mean()]) if values.size else values
    return np.convolve(values, np.ones(window) / window, mode="valid")


def write_trajectories_csv(trajectories, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["client_id", "step", "gradip", "grad_norm", "cosine"])
        for traj in trajectories:
            for cid, t, v, n, c in traj.rows():
                writer.writerow([cid, t, repr(v), repr(n), repr(c)])
