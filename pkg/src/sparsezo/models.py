"""Small differentiable objectives with forward loss and exact gradients.

Every model is a flat-parameter function ``loss(w, batch)`` with
``w.shape == (dim,)``. The quadratic and logistic models also accept a stack
of parameter vectors ``w.shape == (n, dim)`` and return ``n`` losses, which
the Monte Carlo checks rely on for speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

__all__ = [
    "Batch",
    "ConfigError",
    "QuadraticModel",
    "LogisticModel",
    "MLPModel",
]


class ConfigError(ValueError):
    """Inconsistent dimensions or invalid model configuration."""


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.labels)
        if X.shape[0] < 1:
            raise ConfigError("a batch needs at least one sample")
        if y.shape != (X.shape[0],):
            raise ConfigError(f"labels shape {y.shape} does not match {X.shape[0]} inputs")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]


def _check_w(w, dim):
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != dim or w.ndim > 2:
        raise ConfigError(f"expected parameters of dimension {dim}, got shape {w.shape}")
    return w


@dataclass(frozen=True)
class QuadraticModel:
    """``f(w) = 0.5 w^T A w - b^T w`` with symmetric PSD ``A``; batches are ignored.

    ``mu`` is the smallest positive eigenvalue of ``A`` (the PL constant) and
    ``L`` the largest (the smoothness constant).
    """

    A: np.ndarray
    b: np.ndarray
    mu: float = field(init=False)
    L: float = field(init=False)
    kind = "pl-quadratic"

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise ConfigError(f"incompatible shapes A{A.shape}, b{b.shape}")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ConfigError("A must be symmetric")
        eig = np.linalg.eigvalsh(A)
        tol = 1e-10 * max(1.0, eig[-1])
        if eig[0] < -tol:
            raise ConfigError(f"A must be positive semidefinite, min eigenvalue {eig[0]:.3g}")
        positive = eig[eig > tol]
        if positive.size == 0:
            raise ConfigError("A has no positive eigenvalue")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "mu", float(positive[0]))
        object.__setattr__(self, "L", float(eig[-1]))

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @classmethod
    def random(cls, dim, mu=0.5, L=2.0, center=None, seed=0):
        """Random rotation of a spectrum spread evenly over ``[mu, L]``.

        The minimiser is ``center`` (zeros when omitted).
        """
        rng = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = np.linspace(mu, L, dim)
        A = (Q * eig) @ Q.T
        A = 0.5 * (A + A.T)
        c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        return cls(A, A @ c)

    def loss(self, w, batch=None):
        w = _check_w(w, self.dim)
        return 0.5 * np.einsum("...i,ij,...j->...", w, self.A, w) - w @ self.b

    def grad(self, w, batch=None):
        w = _check_w(w, self.dim)
        return w @ self.A - self.b

    def minimizer(self) -> np.ndarray:
        return np.linalg.pinv(self.A) @ self.b

    def optimal_value(self) -> float:
        return float(self.loss(self.minimizer()))

    def restricted_minimizer(self, support, w_fixed) -> np.ndarray:
        """Minimiser over the coordinates in ``support`` with the rest frozen at ``w_fixed``."""
        support = np.asarray(support)
        w = np.array(w_fixed, dtype=float)
        off = np.setdiff1d(np.arange(self.dim), support)
        rhs = self.b[support] - self.A[np.ix_(support, off)] @ w[off]
        w[support] = np.linalg.pinv(self.A[np.ix_(support, support)]) @ rhs
        return w

    def restricted_optimal_value(self, support, w_fixed) -> float:
        return float(self.loss(self.restricted_minimizer(support, w_fixed)))


def _onehot(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes})")
    return np.eye(n_classes)[labels.astype(int)]


@dataclass(frozen=True)
class LogisticModel:
    """Multinomial logistic regression, mean softmax cross-entropy.

    Parameters are ``W`` (``n_features x n_classes``, row-major) followed by
    the ``n_classes`` intercepts when ``fit_intercept`` is set.
    """

    n_features: int
    n_classes: int
    fit_intercept: bool = True
    kind = "logistic"

    def __post_init__(self):
        if self.n_features < 1 or self.n_classes < 2:
            raise ConfigError("logistic model needs n_features >= 1 and n_classes >= 2")

    @property
    def dim(self) -> int:
        return (self.n_features + int(self.fit_intercept)) * self.n_classes

    def _split(self, w):
        F, C = self.n_features, self.n_classes
        W = w[..., : F * C].reshape(w.shape[:-1] + (F, C))
        c = w[..., F * C :] if self.fit_intercept else np.zeros(w.shape[:-1] + (C,))
        return W, c

    def _check_batch(self, batch):
        if batch.inputs.shape[1] != self.n_features:
            raise ConfigError(
                f"batch has {batch.inputs.shape[1]} features, model expects {self.n_features}"
            )

    def logits(self, w, X):
        w = _check_w(w, self.dim)
        W, c = self._split(w)
        return np.matmul(X, W) + c[..., None, :]

    def loss(self, w, batch):
        self._check_batch(batch)
        Y = _onehot(batch.labels, self.n_classes)
        logp = log_softmax(self.logits(w, batch.inputs), axis=-1)
        return -(logp * Y).sum(axis=-1).mean(axis=-1)

    def grad(self, w, batch):
        self._check_batch(batch)
        w = _check_w(w, self.dim)
        if w.ndim != 1:
            raise ConfigError("grad takes a single parameter vector")
        X = batch.inputs
        residual = softmax(self.logits(w, X), axis=-1) - _onehot(batch.labels, self.n_classes)
        residual /= X.shape[0]
        gW = X.T @ residual
        if not self.fit_intercept:
            return gW.ravel()
        return np.concatenate([gW.ravel(), residual.sum(axis=0)])

    def predict_proba(self, w, X):
        return softmax(self.logits(w, np.asarray(X, dtype=float)), axis=-1)

    def init_params(self, seed=None):
        return np.zeros(self.dim)


@dataclass(frozen=True)
class MLPModel:
    """Fully connected tanh network with a softmax cross-entropy head.

    ``layer_sizes`` runs from the input width to the number of classes. The
    flat parameter vector stores, per layer, the weight matrix
    (``fan_in x fan_out``, row-major) followed by its bias.
    """

    layer_sizes: tuple
    kind = "mlp"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1 or sizes[-1] < 2:
            raise ConfigError(f"invalid layer sizes {self.layer_sizes!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_features(self):
        return self.layer_sizes[0]

    @property
    def n_classes(self):
        return self.layer_sizes[-1]

    @property
    def dim(self) -> int:
        s = self.layer_sizes
        return sum((a + 1) * b for a, b in zip(s[:-1], s[1:]))

    def _unpack(self, w):
        layers, offset = [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = w[offset : offset + a * b].reshape(a, b)
            offset += a * b
            layers.append((W, w[offset : offset + b]))
            offset += b
        return layers

    def init_params(self, seed=0):
        """Weights from N(0, 1/fan_in), zero biases."""
        rng = np.random.default_rng(seed)
        parts = []
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            parts.append(rng.standard_normal(a * b) / np.sqrt(a))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def _forward(self, w, X):
        activations = [X]
        h = X
        layers = self._unpack(w)
        for i, (W, c) in enumerate(layers):
            h = h @ W + c
            if i < len(layers) - 1:
                h = np.tanh(h)
                activations.append(h)
        return activations, h

    def _check(self, w, batch):
        w = _check_w(w, self.dim)
        if w.ndim != 1:
            raise ConfigError("MLP takes a single parameter vector")
        if batch.inputs.shape[1] != self.n_features:
            raise ConfigError(
                f"batch has {batch.inputs.shape[1]} features, model expects {self.n_features}"
            )
        return w

    def loss(self, w, batch):
        w = self._check(w, batch)
        _, logits = self._forward(w, batch.inputs)
        Y = _onehot(batch.labels, self.n_classes)
        return float(-(log_softmax(logits, axis=-1) * Y).sum(axis=-1).mean())

    def grad(self, w, batch):
        w = self._check(w, batch)
        activations, logits = self._forward(w, batch.inputs)
        delta = softmax(logits, axis=-1) - _onehot(batch.labels, self.n_classes)
        delta /= batch.inputs.shape[0]
        layers = self._unpack(w)
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            a = activations[i]
            grads.append((a.T @ delta, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ layers[i][0].T) * (1.0 - a**2)
        return np.concatenate([np.concatenate([gW.ravel(), gc]) for gW, gc in reversed(grads)])

    def predict_proba(self, w, X):
        _, logits = self._forward(np.asarray(w, dtype=float), np.asarray(X, dtype=float))
        return softmax(logits, axis=-1)
