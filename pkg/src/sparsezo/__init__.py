"""Federated sparse zeroth-order optimisation with seed-synchronised virtual paths."""

from .data import Dataset, PartitionSpec, batches, make_blobs, partition, split_calibration
from .federation import (
    ClientState,
    MetricsSeries,
    ProjectedGradientLog,
    RoundConfig,
    ServerState,
    aggregate,
    aggregate_logs,
    calibrate,
    client_round,
    communication_cost,
    high_frequency_round,
    reconstruct_virtual_path,
    run_federation,
)
from .estimator import FederatedZOClassifier
from .gradip import (
    VpConfig,
    classify,
    gradip_score,
    local_gradient_norms,
    pretrain_gradient,
    random_flags,
    trace_client,
    vp_policy,
)
from .masking import SparseMask, avg_squared_gradients, baseline_mask, top_k_mask
from .models import Batch, LogisticModel, MLPModel, QuadraticModel
from .prng import SeedSchedule, derive_seed, masked_gaussian
from .scenarios import Federation, blob_federation, dataset_federation, quadratic_federation
from .zo import ZOConfig, local_step, projected_gradient, zo_gradient

__version__ = "0.1.0"
