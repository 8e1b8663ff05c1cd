"""scikit-learn style facade: train a classifier with simulated federated sparse ZO."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, PartitionSpec
from .federation import RoundConfig, run_federation
from .gradip import VpConfig
from .models import Batch
from .scenarios import dataset_federation
from .zo import ZOConfig

__all__ = ["FederatedZOClassifier"]


class FederatedZOClassifier(ClassifierMixin, BaseEstimator):
    """Softmax (or tanh MLP) classifier trained by a simulated federation.

    ``X, y`` are split into a held-out calibration part (mask scores and
    GradIP reference gradient) and client shards, then trained for ``R``
    rounds of ``T`` masked ZO steps per client.

    Parameters
    ----------
    model : {"logistic", "mlp"}, default="logistic"
    hidden : tuple of int, default=(16,)
        Hidden widths when ``model="mlp"``.
    n_clients : int, default=10
    partition : {"iid", "dirichlet", "single-label"}, default="iid"
    alpha : float, default=0.5
        Dirichlet concentration.
    mask : {"meerkat", "weight-magnitude", "random", "full"}, default="meerkat"
    density : float, default=0.5
    T, R : int
        Local steps per round and number of rounds.
    eta, epsilon : float
        Step size and perturbation radius.
    batch_size : int, default=16
    calib_fraction : float, default=0.1
    early_stopping : bool, default=False
        Run GradIP calibration and limit flagged clients to one local step.
    random_state : int, default=0
        Master seed; fully determines the fit.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    n_features_in_ : int
    coef_ : ndarray
        Trained flat parameter vector.
    metrics_ : MetricsSeries
    flagged_clients_ : list of int
    """

    def __init__(
        self,
        model="logistic",
        hidden=(16,),
        n_clients=10,
        partition="iid",
        alpha=0.5,
        mask="meerkat",
        density=0.5,
        T=10,
        R=50,
        eta=0.01,
        epsilon=1e-3,
        batch_size=16,
        calib_fraction=0.1,
        early_stopping=False,
        random_state=0,
    ):
        self.model = model
        self.hidden = hidden
        self.n_clients = n_clients
        self.partition = partition
        self.alpha = alpha
        self.mask = mask
        self.density = density
        self.T = T
        self.R = R
        self.eta = eta
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.calib_fraction = calib_fraction
        self.early_stopping = early_stopping
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        seed = int(self.random_state)

        fed = dataset_federation(
            Dataset(X, y_enc, self.classes_.size),
            model=self.model,
            hidden=tuple(self.hidden),
            partition_spec=PartitionSpec(self.partition, K=self.n_clients, alpha=self.alpha, seed=seed),
            batch_size=self.batch_size,
            calib_fraction=self.calib_fraction,
            mask_kind=self.mask,
            density=self.density,
            master_seed=seed,
        )
        cfg = RoundConfig(T=self.T, R=self.R, K=self.n_clients, zo=ZOConfig(self.epsilon, self.eta))
        self.metrics_ = run_federation(
            cfg, fed.server, fed.clients, fed.evaluate,
            vp=VpConfig() if self.early_stopping else None,
            pretrain_grad=fed.pretrain_grad,
        )
        if self.metrics_.failure:
            raise FloatingPointError(self.metrics_.failure)
        self.model_ = fed.global_model
        self.mask_ = fed.server.mask
        self.coef_ = self.metrics_.final_params
        self.flagged_clients_ = [k for k, f in enumerate(self.metrics_.flags) if f]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.predict_proba(self.coef_, X)

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def loss(self, X, y):
        """Mean cross-entropy of the fitted model on ``(X, y)``."""
        check_is_fitted(self, "coef_")
        X, y = check_X_y(X, y, dtype=np.float64)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= self.classes_.size) or np.any(self.classes_[idx] != y):
            raise ValueError("y contains labels unseen during fit")
        return float(self.model_.loss(self.coef_, Batch(X, idx)))
