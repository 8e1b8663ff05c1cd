"""Seed-synchronised federated rounds with scalar-only uploads.

Per round every client runs ``T`` masked ZO steps from the global model using
the shared seed list of that round and uploads the projected-gradient
scalars. The server replays each client's path from the scalars (the virtual
path), checks it against the client, and aggregates. In high-frequency mode
(``T = 1``) only the averaged scalar and the next seed travel back.

Aggregation
-----------
All clients share ``z_t`` at a given ``(round, t)``, so the mean of the
client end points equals a single replay driven by the per-step mean scalars
``(1/K) * sum_k g_k^t`` (clients that stopped early contribute nothing to
later steps). That replay is the default (``aggregation="scalar"``): it
touches only the masked coordinates and, at ``T = 1``, is bit-identical to
the high-frequency update. ``aggregation="params"`` averages the
reconstructed parameter vectors literally instead.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .gradip import VpConfig, classify, trace_client, vp_policy
from .masking import SparseMask, mask_size
from .prng import SeedSchedule, derive_seed, masked_gaussian
from .zo import NumericalError, ZOConfig, apply_update, local_step, projected_gradient

__all__ = [
    "ClientState",
    "ServerState",
    "ProjectedGradientLog",
    "RoundConfig",
    "ClientFailure",
    "ProtocolError",
    "MetricsSeries",
    "client_round",
    "reconstruct_virtual_path",
    "aggregate",
    "aggregate_logs",
    "high_frequency_round",
    "run_federation",
    "calibrate",
    "communication_cost",
    "write_messages",
    "read_messages",
]

logger = logging.getLogger(__name__)

SCALAR_BYTES = 8
SEED_BYTES = 8
INDEX_BYTES = 4
MODES = ("multi-step", "high-frequency")
METRIC_COLUMNS = ("round", "global_loss", "gap", "up_bytes", "down_bytes", "flagged")


class ClientFailure(RuntimeError):
    """A client's local step hit a non-finite loss."""

    def __init__(self, client_id, step, cause):
        super().__init__(f"client {client_id} failed at local step {step}: {cause}")
        self.client_id = client_id
        self.step = step


class ProtocolError(RuntimeError):
    pass


@dataclass
class ClientState:
    """One client: its objective, its fixed batch order and a resumable cursor.

    ``data`` may hold ``None`` entries for objectives that ignore batches.
    """

    id: int
    model: object
    data: list
    params: np.ndarray
    data_pointer: int = 0
    flagged: bool = False

    def __post_init__(self):
        if not self.data:
            raise ValueError(f"client {self.id} has no batches")
        self.params = np.array(self.params, dtype=float)
        if self.params.shape != (self.model.dim,):
            raise ValueError(f"client {self.id} params do not match model dimension")
        if not 0 <= self.data_pointer < len(self.data):
            raise ValueError("data_pointer out of range")

    def next_batch(self):
        batch = self.data[self.data_pointer]
        self.data_pointer = (self.data_pointer + 1) % len(self.data)
        return batch


@dataclass
class ServerState:
    params: np.ndarray
    mask: SparseMask
    schedule: SeedSchedule
    round: int = 0

    def __post_init__(self):
        self.params = np.array(self.params, dtype=float)
        if self.params.shape != (self.mask.dim,):
            raise ValueError("server params do not match mask dimension")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("server params must be finite")


@dataclass(frozen=True)
class ProjectedGradientLog:
    client_id: int
    round: int
    scalars: tuple

    def __len__(self):
        return len(self.scalars)


@dataclass(frozen=True)
class RoundConfig:
    T: int = 10
    R: int = 100
    K: int = 10
    mode: str = "multi-step"
    zo: ZOConfig = field(default_factory=ZOConfig)
    aggregation: str = "scalar"

    def __post_init__(self):
        if self.T < 1 or self.K < 1 or self.R < 0:
            raise ValueError("need T >= 1, K >= 1 and R >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "high-frequency" and self.T != 1:
            raise ValueError("high-frequency mode requires T = 1")
        if self.aggregation not in ("scalar", "params"):
            raise ValueError("aggregation must be 'scalar' or 'params'")


def client_round(client: ClientState, global_params, round, T, mask, schedule, zo: ZOConfig):
    """Step 1 for one client: ``T`` chained local steps from the global model."""
    if T < 1:
        raise ValueError("T must be >= 1")
    w = np.array(global_params, dtype=float)
    scalars = []
    for t in range(1, T + 1):
        batch = client.next_batch()
        try:
            w, g = local_step(client.model, w, mask, derive_seed(schedule, round, t), zo, batch)
        except NumericalError as exc:
            raise ClientFailure(client.id, t, exc) from exc
        scalars.append(g)
    client.params = w
    return ProjectedGradientLog(client.id, round, tuple(scalars))


def reconstruct_virtual_path(global_params, log, mask, schedule, eta) -> np.ndarray:
    """Step 2: replay a client's updates from its scalars and the shared seeds."""
    w = np.array(global_params, dtype=float)
    for t, g in enumerate(log.scalars, start=1):
        w = apply_update(w, mask, masked_gaussian(derive_seed(schedule, log.round, t), mask), g, eta)
    return w


def _mean_scalar(values, K):
    total = 0.0
    for v in values:
        total += v
    return total / K


def aggregate(params_list) -> np.ndarray:
    """Coordinate-wise mean, summed in list (client id) order.

    Coordinates on which every client agrees keep that exact value, so the
    untouched off-support entries never pick up rounding error.
    """
    if not params_list:
        raise ProtocolError("nothing to aggregate")
    stack = [np.asarray(p, dtype=float) for p in params_list]
    shape = stack[0].shape
    if any(p.shape != shape for p in stack):
        raise ProtocolError("parameter vectors differ in dimension")
    total = np.zeros(shape)
    for p in stack:
        total += p
    mean = total / len(stack)
    agree = np.all([p == stack[0] for p in stack], axis=0)
    return np.where(agree, stack[0], mean)


def aggregate_logs(global_params, logs, K, mask, schedule, eta) -> np.ndarray:
    """Step 3 via the scalar route: replay the per-step mean projected gradient."""
    logs = sorted(logs, key=lambda lg: lg.client_id)
    if not logs:
        return np.array(global_params, dtype=float)
    rnd = logs[0].round
    w = np.array(global_params, dtype=float)
    for t in range(1, max(len(lg) for lg in logs) + 1):
        g = _mean_scalar([lg.scalars[t - 1] for lg in logs if len(lg) >= t], K)
        w = apply_update(w, mask, masked_gaussian(derive_seed(schedule, rnd, t), mask), g, eta)
    return w


def high_frequency_round(server: ServerState, clients, cfg: RoundConfig):
    """One ``T = 1`` round: shared seed, averaged scalar, identical updates everywhere.

    Returns the per-client logs (one scalar each) and the aggregated scalar.
    """
    clients = sorted(clients, key=lambda c: c.id)
    rnd = server.round + 1
    z = masked_gaussian(derive_seed(server.schedule, rnd, 1), server.mask)
    logs = []
    for c in clients:
        try:
            g = projected_gradient(c.model, c.params, server.mask, z, cfg.zo.epsilon, c.next_batch())
        except NumericalError as exc:
            raise ClientFailure(c.id, 1, exc) from exc
        logs.append(ProjectedGradientLog(c.id, rnd, (g,)))
    g_bar = _mean_scalar([lg.scalars[0] for lg in logs], len(clients))
    server.params = apply_update(server.params, server.mask, z, g_bar, cfg.zo.eta)
    for c in clients:
        c.params = apply_update(c.params, server.mask, z, g_bar, cfg.zo.eta)
    server.round = rnd
    return logs, g_bar


def communication_cost(cfg: RoundConfig, d: int, density: float, scheme="sparse", support_size=None):
    """Bytes ``(uplink, downlink)`` per client per round.

    Scalars and seeds take 8 bytes. ``scheme="full"`` is the reference
    full-parameter exchange (``8 d`` each way). Pass ``support_size`` for an
    existing mask to skip recomputing it from ``density``.
    """
    if scheme == "full":
        return SCALAR_BYTES * d, SCALAR_BYTES * d
    if scheme != "sparse":
        raise ValueError(f"unknown scheme {scheme!r}")
    if cfg.mode == "high-frequency":
        return SCALAR_BYTES, SCALAR_BYTES + SEED_BYTES
    up = SCALAR_BYTES * cfg.T
    k = mask_size(d, density) if support_size is None else int(support_size)
    down = SCALAR_BYTES * k + SEED_BYTES * cfg.T
    return up, down


@dataclass
class MetricsSeries:
    """Per-round records plus calibration artefacts of one federation run."""

    records: list = field(default_factory=list)
    logs: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)
    classifications: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    params_history: list = field(default_factory=list)
    final_params: Optional[np.ndarray] = None
    failure: Optional[str] = None

    def column(self, name):
        return np.array([r[name] for r in self.records], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [
                        r["round"],
                        repr(float(r["global_loss"])),
                        "" if r["gap"] is None else repr(float(r["gap"])),
                        r["up_bytes"],
                        r["down_bytes"],
                        ";".join(str(k) for k in r["flagged"]),
                    ]
                )


def calibrate(server, clients, vp: VpConfig, zo, pretrain_grad, metrics=None):
    """Run ``T_cali`` steps per client from the initial model and classify them.

    The calibration updates are discarded; client cursors are restored so
    training starts from the same place as without calibration. Sets each
    client's ``flagged`` and returns ``(metrics, up_bytes, down_bytes)``.
    """
    metrics = MetricsSeries() if metrics is None else metrics
    clients = sorted(clients, key=lambda c: c.id)
    schedule = server.schedule.calibration()
    up = down = 0
    for c in clients:
        pointer = c.data_pointer
        log = client_round(c, server.params, 1, vp.T_cali, server.mask, schedule, zo)
        c.params = server.params.copy()
        c.data_pointer = pointer
        traj = trace_client(
            log, server.mask, schedule, pretrain_grad, vp.T_cali, vp.restrict_cosine
        )
        result = classify(traj, vp)
        c.flagged = result.flagged
        metrics.trajectories.append(traj)
        metrics.classifications.append(result)
        up += SCALAR_BYTES * vp.T_cali
        down += SEED_BYTES * vp.T_cali
    return metrics, up, down


def run_federation(
    cfg: RoundConfig,
    server: ServerState,
    clients: Sequence[ClientState],
    evaluate: Callable[[np.ndarray], float],
    f_star: Optional[float] = None,
    vp: Optional[VpConfig] = None,
    pretrain_grad=None,
    flags: Optional[Sequence[bool]] = None,
    keep_logs: bool = False,
    keep_params: bool = False,
) -> MetricsSeries:
    """Run ``cfg.R`` rounds and record one metrics row per round (plus round 0).

    Early stopping comes either from a GradIP calibration phase (``vp`` with
    ``pretrain_grad``) or from explicit per-client ``flags``. On a client
    failure the partial metrics are returned with ``failure`` set.
    ``keep_logs`` and ``keep_params`` also retain every round's uploads and
    global parameter vector.
    """
    clients = sorted(clients, key=lambda c: c.id)
    if len(clients) != cfg.K:
        raise ValueError(f"config says K={cfg.K} but {len(clients)} clients were given")
    mask, eta = server.mask, cfg.zo.eta
    metrics = MetricsSeries()
    up_total = down_total = 0

    if vp is not None:
        if pretrain_grad is None:
            raise ValueError("GradIP calibration needs the pre-training gradient")
        _, up_total, down_total = calibrate(server, clients, vp, cfg.zo, pretrain_grad, metrics)
    elif flags is not None:
        if len(flags) != len(clients):
            raise ValueError("one flag per client expected")
        for c, f in zip(clients, flags):
            c.flagged = bool(f)
    metrics.flags = [c.flagged for c in clients]
    flagged_ids = tuple(c.id for c in clients if c.flagged)
    steps = vp_policy(metrics.flags, cfg.T)

    def record(rnd):
        loss = float(evaluate(server.params))
        metrics.records.append(
            {
                "round": rnd,
                "global_loss": loss,
                "gap": None if f_star is None else loss - f_star,
                "up_bytes": up_total,
                "down_bytes": down_total,
                "flagged": flagged_ids,
            }
        )
        if keep_params:
            metrics.params_history.append(server.params.copy())

    record(0)
    for c in clients:
        c.params = server.params.copy()

    for rnd in range(1, cfg.R + 1):
        try:
            if cfg.mode == "high-frequency":
                logs, _ = high_frequency_round(server, clients, cfg)
                up, down = communication_cost(cfg, mask.dim, mask.density, support_size=mask.size)
                up_total += up * len(clients)
                down_total += down * len(clients)
            else:
                logs = [
                    client_round(c, server.params, rnd, T_k, mask, server.schedule, cfg.zo)
                    for c, T_k in zip(clients, steps)
                ]
                paths = []
                for c, log in zip(clients, logs):
                    path = reconstruct_virtual_path(server.params, log, mask, server.schedule, eta)
                    if not np.array_equal(path, c.params):
                        raise ProtocolError(f"virtual path of client {c.id} diverged in round {rnd}")
                    paths.append(path)
                    up_total += SCALAR_BYTES * len(log)
                    down_total += SCALAR_BYTES * mask.size + SEED_BYTES * len(log)
                if cfg.aggregation == "scalar":
                    server.params = aggregate_logs(
                        server.params, logs, len(clients), mask, server.schedule, eta
                    )
                else:
                    server.params = aggregate(paths)
                server.round = rnd
                for c in clients:
                    c.params = server.params.copy()
        except ClientFailure as exc:
            logger.error("round %d aborted: %s", rnd, exc)
            metrics.failure = str(exc)
            break
        if keep_logs:
            metrics.logs.append(logs)
        record(rnd)

    metrics.final_params = server.params.copy()
    return metrics


_HEADER = struct.Struct("<III")


def write_messages(path, logs) -> int:
    """Dump upload messages as little-endian records; returns bytes written.

    Record layout: ``client_id: u32, round: u32, count: u32`` then
    ``count`` float64 scalars.
    """
    out = bytearray()
    for log in logs:
        out += _HEADER.pack(log.client_id, log.round, len(log.scalars))
        out += np.asarray(log.scalars, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))
    return len(out)


def read_messages(path) -> list[ProjectedGradientLog]:
    raw = Path(path).read_bytes()
    logs, offset = [], 0
    while offset < len(raw):
        if offset + _HEADER.size > len(raw):
            raise ProtocolError("truncated message header")
        cid, rnd, count = _HEADER.unpack_from(raw, offset)
        offset += _HEADER.size
        end = offset + 8 * count
        if end > len(raw):
            raise ProtocolError("truncated message payload")
        scalars = np.frombuffer(raw[offset:end], dtype="<f8")
        logs.append(ProjectedGradientLog(cid, rnd, tuple(float(s) for s in scalars)))
        offset = end
    return logs
