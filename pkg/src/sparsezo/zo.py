"""Masked two-point zeroth-order gradient estimation and the local update."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .prng import masked_gaussian

__all__ = [
    "ZOConfig",
    "NumericalError",
    "projected_gradient",
    "projected_gradients",
    "zo_gradient",
    "apply_update",
    "local_step",
]


class NumericalError(ArithmeticError):
    """A loss evaluation produced a non-finite value."""

    def __init__(self, message, sign=None):
        super().__init__(message)
        self.sign = sign


@dataclass(frozen=True)
class ZOConfig:
    """Perturbation magnitude ``epsilon`` and learning rate ``eta``."""

    epsilon: float = 1e-3
    eta: float = 2e-4

    def __post_init__(self):
        for name in ("epsilon", "eta"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a finite positive number, got {value!r}")


def _perturbed(w, mask, z, scale):
    out = np.array(w, dtype=float)
    out[mask.support] += scale * z
    return out


def projected_gradient(model, w, mask, z, epsilon, batch) -> float:
    """Central-difference slope of the loss along the masked direction ``z``.

    ``z`` holds the perturbation values on ``mask.support``. Both loss
    evaluations use scratch copies, so ``w`` is never touched.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    f_plus = float(model.loss(_perturbed(w, mask, z, epsilon), batch))
    if not math.isfinite(f_plus):
        raise NumericalError(f"non-finite loss at w + eps*z: {f_plus}", sign=+1)
    f_minus = float(model.loss(_perturbed(w, mask, z, -epsilon), batch))
    if not math.isfinite(f_minus):
        raise NumericalError(f"non-finite loss at w - eps*z: {f_minus}", sign=-1)
    return (f_plus - f_minus) / (2.0 * epsilon)


def projected_gradients(model, w, mask, Z, epsilon, batch) -> np.ndarray:
    """``projected_gradient`` for every row of ``Z`` in one batched evaluation.

    Needs a model whose ``loss`` accepts stacked parameter vectors.
    """
    Z = np.atleast_2d(Z)
    W = np.broadcast_to(np.asarray(w, dtype=float), (Z.shape[0], mask.dim)).copy()
    W_plus, W_minus = W, W.copy()
    W_plus[:, mask.support] += epsilon * Z
    W_minus[:, mask.support] -= epsilon * Z
    return (model.loss(W_plus, batch) - model.loss(W_minus, batch)) / (2.0 * epsilon)


def zo_gradient(g, z) -> np.ndarray:
    """Sparse ZO gradient ``g * z`` on the mask support."""
    return g * np.asarray(z, dtype=float)


def apply_update(w, mask, z, g, eta) -> np.ndarray:
    """``w - eta * g * z_bar`` as a new array; off-support entries are copied as-is.

    Client steps, virtual-path replay and server updates all go through this
    function so their floating-point results agree bit for bit.
    """
    out = np.array(w, dtype=float)
    out[mask.support] = out[mask.support] - eta * zo_gradient(g, z)
    return out


def local_step(model, w, mask, seed, cfg: ZOConfig, batch):
    """One client step; returns ``(new_params, projected_gradient)``."""
    z = masked_gaussian(seed, mask)
    g = projected_gradient(model, w, mask, z, cfg.epsilon, batch)
    return apply_update(w, mask, z, g, cfg.eta), g
