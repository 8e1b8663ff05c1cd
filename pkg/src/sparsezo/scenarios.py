"""Ready-made federations: blob classification and heterogeneous quadratics.

Both builders return a :class:`Federation` bundle that ``run_federation``
consumes directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import PartitionSpec, batches, make_blobs, partition, split_calibration
from .federation import ClientState, ServerState
from .gradip import pretrain_gradient
from .masking import SparseMask, avg_squared_gradients, baseline_mask, top_k_mask
from .models import LogisticModel, MLPModel, QuadraticModel
from .prng import SeedSchedule

__all__ = ["MASK_KINDS", "Federation", "build_mask", "blob_federation", "dataset_federation", "quadratic_federation"]

MASK_KINDS = ("meerkat", "weight-magnitude", "random", "full")


@dataclass
class Federation:
    server: ServerState
    clients: list
    evaluate: Callable[[np.ndarray], float]
    pretrain_grad: np.ndarray
    f_star: Optional[float] = None
    global_model: object = None
    calib: list = None


def build_mask(kind, model, w0, calib, density, seed=0) -> SparseMask:
    """Gradient-based (``meerkat``) or baseline mask at ``w0``."""
    if kind == "meerkat":
        return top_k_mask(avg_squared_gradients(model, w0, calib), density)
    if kind in MASK_KINDS:
        # on all-zero weights weight-magnitude degenerates to the first k indices
        return baseline_mask(kind, w0, density, seed)
    raise ValueError(f"mask kind must be one of {MASK_KINDS}, got {kind!r}")


def blob_federation(
    *,
    model="logistic",
    hidden=(16,),
    classes=10,
    per_class=60,
    feature_dim=50,
    spread=3.0,
    separation=25.0,
    partition_spec: PartitionSpec = PartitionSpec("iid", K=10),
    batch_size=16,
    calib_fraction=0.1,
    mask_kind="meerkat",
    density=0.5,
    master_seed=0,
    data_seed=None,
) -> Federation:
    """Logistic or MLP classification on Gaussian blobs.

    The calibration split is carved out before partitioning and never seen
    by clients; it provides both the mask scores and the frozen
    calibration gradient. The evaluation loss is the mean cross-entropy on
    all client data.
    """
    seed = master_seed if data_seed is None else data_seed
    ds = make_blobs(classes, per_class, feature_dim, spread=spread, seed=seed, separation=separation)
    return dataset_federation(
        ds,
        model=model,
        hidden=hidden,
        partition_spec=partition_spec,
        batch_size=batch_size,
        calib_fraction=calib_fraction,
        mask_kind=mask_kind,
        density=density,
        master_seed=master_seed,
        data_seed=seed,
    )


def dataset_federation(
    ds,
    *,
    model="logistic",
    hidden=(16,),
    partition_spec: PartitionSpec = PartitionSpec("iid", K=10),
    batch_size=16,
    calib_fraction=0.1,
    mask_kind="meerkat",
    density=0.5,
    master_seed=0,
    data_seed=None,
) -> Federation:
    """Classification federation over an arbitrary labelled :class:`Dataset`."""
    seed = master_seed if data_seed is None else data_seed
    cal_idx, train_idx = split_calibration(ds, calib_fraction, seed)
    calib = batches(ds, cal_idx, batch_size, seed)
    train = ds.subset(train_idx)
    parts = partition(train, partition_spec)

    if model == "logistic":
        net = LogisticModel(ds.n_features, ds.num_classes)
        w0 = net.init_params()
    elif model == "mlp":
        net = MLPModel((ds.n_features, *hidden, ds.num_classes))
        w0 = net.init_params(seed)
    else:
        raise ValueError(f"classification federation needs a logistic or mlp model, got {model!r}")

    mask = build_mask(mask_kind, net, w0, calib, density, seed)
    clients = [
        ClientState(k, net, batches(train, p, batch_size, seed + 1 + k), w0)
        for k, p in enumerate(parts)
    ]
    everything = train.as_batch()
    return Federation(
        server=ServerState(w0, mask, SeedSchedule(master_seed)),
        clients=clients,
        evaluate=lambda w: float(net.loss(w, everything)),
        pretrain_grad=pretrain_gradient(net, w0, calib),
        global_model=net,
        calib=calib,
    )


def quadratic_federation(
    *,
    dim=20,
    K=2,
    mu=0.5,
    L=2.0,
    heterogeneity=1.0,
    curvature_spread=0.0,
    mask_kind="full",
    density=1.0,
    w0_scale=1.0,
    master_seed=0,
    data_seed=None,
    restricted=True,
) -> Federation:
    """Clients minimise shifted quadratics ``0.5 (w - c_k)^T A_k (w - c_k)``.

    ``heterogeneity`` scales the spread of the client optima ``c_k`` and
    ``curvature_spread`` (in ``[0, 1)``) perturbs each client's spectrum,
    which is what makes local steps drift. The global objective is the mean
    of the client objectives. ``f_star`` is its optimum over the mask
    support (off-support coordinates frozen at ``w0``) when ``restricted``,
    else the unconstrained optimum.
    """
    seed = master_seed if data_seed is None else data_seed
    rng = np.random.default_rng(seed)
    if not 0 <= curvature_spread < 1:
        raise ValueError("curvature_spread must be in [0, 1)")
    base = QuadraticModel.random(dim, mu, L, seed=seed)
    models = []
    for _ in range(K):
        center = heterogeneity * rng.standard_normal(dim)
        if curvature_spread:
            Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            eig = np.linspace(mu, L, dim) * (1 + curvature_spread * rng.uniform(-1, 1, dim))
            A = (Q * eig) @ Q.T
            A = 0.5 * (A + A.T)
        else:
            A = base.A
        models.append(QuadraticModel(A, A @ center))
    glob = QuadraticModel(
        sum(m.A for m in models) / K, sum(m.b for m in models) / K
    )
    w0 = w0_scale * rng.standard_normal(dim)
    # the calibration gradient is the exact global gradient at w0
    calib = [None]
    mask = build_mask(mask_kind, glob, w0, calib, density, seed)
    f_star = (
        glob.restricted_optimal_value(mask.support, w0) if restricted else glob.optimal_value()
    )
    clients = [ClientState(k, m, [None], w0) for k, m in enumerate(models)]
    return Federation(
        server=ServerState(w0, mask, SeedSchedule(master_seed)),
        clients=clients,
        evaluate=lambda w: float(glob.loss(w)),
        pretrain_grad=glob.grad(w0),
        f_star=f_star,
        global_model=glob,
        calib=calib,
    )
