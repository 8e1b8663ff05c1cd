import math

import numpy as np
import pytest

from sparsezo import (
    Batch,
    PartitionSpec,
    ProjectedGradientLog,
    RoundConfig,
    SeedSchedule,
    SparseMask,
    VpConfig,
    ZOConfig,
    blob_federation,
    calibrate,
    classify,
    client_round,
    derive_seed,
    gradip_score,
    local_gradient_norms,
    pretrain_gradient,
    random_flags,
    run_federation,
    trace_client,
    vp_policy,
)
from sparsezo.gradip import GradIPTrajectory, moving_average, write_trajectories_csv
from sparsezo.prng import masked_gaussian


def traj(values):
    values = np.asarray(values, dtype=float)
    return GradIPTrajectory(0, values, np.abs(values), np.zeros_like(values))


def b5_federation(seed):
    """One single-label client and one IID client on 10-class blobs."""
    spec = PartitionSpec("mixed", K=2, seed=seed, n_single=1, single_fraction=0.5)
    return blob_federation(per_class=60, partition_spec=spec, density=0.5, master_seed=seed)


class RecordingList(list):
    def __init__(self, items):
        super().__init__(items)
        self.visited = []

    def __getitem__(self, i):
        self.visited.append(i)
        return super().__getitem__(i)


def test_pretrain_gradient_examples(logistic_instance):
    model, batch, w = logistic_instance
    np.testing.assert_array_equal(pretrain_gradient(model, w, [batch]), model.grad(w, batch))
    np.testing.assert_allclose(pretrain_gradient(model, w, [batch] * 3), model.grad(w, batch), rtol=1e-15)
    parts = [Batch(batch.inputs[i::3], batch.labels[i::3]) for i in range(3)]
    expected = np.mean([model.grad(w, b) for b in parts], axis=0)
    np.testing.assert_allclose(pretrain_gradient(model, w, parts), expected, rtol=1e-14)
    with pytest.raises(ValueError):
        pretrain_gradient(model, w, [])


def test_gradip_score_examples():
    mask = SparseMask(5, [0, 3])
    p = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert gradip_score(np.zeros(2), p, mask) == 0.0
    assert gradip_score(p[mask.support], p, mask) == 17.0
    assert gradip_score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    v = np.array([0.3, -1.2])
    assert gradip_score(2.5 * v, p, mask) == pytest.approx(2.5 * gradip_score(v, p, mask), rel=1e-15)


def test_trace_of_zero_scalars_is_zero():
    mask = SparseMask(6, [1, 2, 4])
    t = trace_client(ProjectedGradientLog(3, 1, (0.0,) * 5), mask, SeedSchedule(0), np.ones(6), T_cali=5)
    assert np.all(t.values == 0) and np.all(t.cosine == 0) and t.client_id == 3
    with pytest.raises(ValueError):
        trace_client(ProjectedGradientLog(3, 1, (0.0,) * 5), mask, SeedSchedule(0), np.ones(6), T_cali=4)


def test_trace_single_step_by_hand():
    mask = SparseMask(4, [0, 2])
    sched = SeedSchedule(8)
    p = np.array([1.0, 7.0, -2.0, 3.0])
    z = masked_gaussian(derive_seed(sched, 1, 1), mask)
    t = trace_client(ProjectedGradientLog(0, 1, (1.5,)), mask, sched, p)
    est = 1.5 * z
    assert t.values[0] == pytest.approx(est @ p[[0, 2]])
    assert t.grad_norm[0] == pytest.approx(np.linalg.norm(est))
    assert t.cosine[0] == pytest.approx(est @ p[[0, 2]] / (np.linalg.norm(est) * np.linalg.norm(p)))
    restricted = trace_client(ProjectedGradientLog(0, 1, (1.5,)), mask, sched, p, restrict_cosine=True)
    assert restricted.cosine[0] == pytest.approx(est @ p[[0, 2]] / (np.linalg.norm(est) * np.linalg.norm(p[[0, 2]])))


def test_server_trace_equals_client_side_scores():
    fed = b5_federation(0)
    c = fed.clients[0]
    mask, sched, zo = fed.server.mask, fed.server.schedule, ZOConfig(eta=0.01)
    log = client_round(c, fed.server.params, 1, 30, mask, sched, zo)
    # the client knows its own z and g, so it can score locally
    local = [
        gradip_score(g * masked_gaussian(derive_seed(sched, 1, t), mask), fed.pretrain_grad, mask)
        for t, g in enumerate(log.scalars, start=1)
    ]
    server = trace_client(log, mask, sched, fed.pretrain_grad, T_cali=30)
    assert server.values.tobytes() == np.array(local).tobytes()


def test_classify_constant_trajectory():
    c = classify(traj([5.0] * 100), VpConfig(rho_later=2, rho_quie=0.5))
    assert (c.rho_later_client, c.rho_quie_client, c.flagged) == (1.0, 0.0, False)


def test_classify_collapsed_trajectory():
    values = [10.0] * 20 + [3.0] * 60 + [0.0] * 20
    c = classify(traj(values), VpConfig())
    assert c.rho_later_client == math.inf and c.rho_quie_client == 1.0 and c.flagged
    assert c.init_avg == 10.0 and c.later_avg == 0.0


def test_classify_all_zero_uses_unit_ratio():
    c = classify(traj([0.0] * 100), VpConfig(rho_quie=0.99))
    assert c.rho_later_client == 1.0 and c.rho_quie_client == 1.0 and c.flagged


def test_vp_config_validation():
    with pytest.raises(ValueError):
        VpConfig(T_cali=30, T_init=20, T_later=20)
    with pytest.raises(ValueError):
        VpConfig(sigma=0.0)
    with pytest.raises(ValueError):
        VpConfig(rho_later=math.nan)
    assert VpConfig() == VpConfig(100, 20, 20, 1.0, 2.0, 0.5)


def test_vp_policy():
    assert vp_policy([False] * 3, 7) == [7, 7, 7]
    assert vp_policy([True] * 3, 7) == [1, 1, 1]
    assert vp_policy([True, False], 4) == [1, 4]


def test_random_flags():
    f = random_flags(10, 4, seed=1)
    assert sum(f) == 4 and f == random_flags(10, 4, seed=1)
    assert random_flags(5, 0, 0) == [False] * 5
    with pytest.raises(ValueError):
        random_flags(3, 4, 0)


def test_flagged_client_walks_its_whole_dataset():
    fed = blob_federation(classes=3, per_class=40, feature_dim=4, partition_spec=PartitionSpec("iid", K=2))
    target = fed.clients[0]
    target.data = RecordingList(target.data)
    n = len(target.data)
    cfg = RoundConfig(T=5, R=n, K=2, zo=ZOConfig(eta=0.01))
    run_federation(cfg, fed.server, fed.clients, fed.evaluate, flags=[True, False])
    assert sorted(target.data.visited) == list(range(n))
    assert target.data_pointer == 0


def test_calibration_is_discarded_and_flags_freeze():
    fed = b5_federation(1)
    w0 = fed.server.params.copy()
    pointers = [c.data_pointer for c in fed.clients]
    metrics, up, down = calibrate(fed.server, fed.clients, VpConfig(), ZOConfig(eta=0.01), fed.pretrain_grad)
    assert fed.server.params.tobytes() == w0.tobytes()
    assert all(c.params.tobytes() == w0.tobytes() for c in fed.clients)
    assert [c.data_pointer for c in fed.clients] == pointers
    assert [len(t) for t in metrics.trajectories] == [100, 100]
    assert (up, down) == (2 * 800, 2 * 800)
    assert [c.flagged for c in fed.clients] == [r.flagged for r in metrics.classifications]

    fed = b5_federation(1)
    m = run_federation(
        RoundConfig(T=5, R=3, K=2, zo=ZOConfig(eta=0.01)), fed.server, fed.clients, fed.evaluate,
        vp=VpConfig(rho_later=15, rho_quie=0.7), pretrain_grad=fed.pretrain_grad,
    )
    assert m.records[0]["global_loss"] == fed.evaluate(w0)
    assert m.records[0]["up_bytes"] == 1600
    assert len({r["flagged"] for r in m.records}) == 1
    assert m.flags == [True, False]


def test_local_gradient_norms_replay():
    fed = b5_federation(2)
    c = fed.clients[1]
    mask, sched = fed.server.mask, fed.server.schedule
    log = client_round(c, fed.server.params, 1, 6, mask, sched, ZOConfig(eta=0.01))
    batch = c.data[0]
    norms = local_gradient_norms(c.model, batch, fed.server.params, log, mask, sched, 0.01)
    assert norms.shape == (6,)
    assert norms[0] == np.linalg.norm(c.model.grad(fed.server.params, batch))


def test_moving_average_and_csv(tmp_path):
    np.testing.assert_allclose(moving_average(np.arange(12.0), 10), [4.5, 5.5, 6.5])
    np.testing.assert_allclose(moving_average([1.0, 3.0], 10), [2.0])
    t = traj(np.linspace(1, 2, 7))
    write_trajectories_csv([t, t], tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "client_id,step,gradip,grad_norm,cosine" and len(lines) == 15


def _b5_series(seed):
    fed = b5_federation(seed)
    eta = 0.01
    metrics, _, _ = calibrate(fed.server, fed.clients, VpConfig(), ZOConfig(eta=eta), fed.pretrain_grad)
    out = []
    for c in fed.clients:
        # replay the calibration log against the exact gradient of the client's whole shard
        shard = Batch(np.concatenate([b.inputs for b in c.data]), np.concatenate([b.labels for b in c.data]))
        sched = fed.server.schedule.calibration()
        log = client_round(c, fed.server.params, 1, 100, fed.server.mask, sched, ZOConfig(eta=eta))
        out.append(local_gradient_norms(c.model, shard, fed.server.params, log, fed.server.mask, sched, eta))
    return metrics, out


def test_single_label_gradient_norm_decays_monotonically():
    decays = steady = 0
    for seed in range(10):
        _, (single, iid) = _b5_series(seed)
        ms, mi = moving_average(single), moving_average(iid)
        decays += bool(np.all(np.diff(ms[20:]) <= 0) and ms[-1] < 0.1 * ms.max())
        steady += bool(mi[-1] > 0.3 * mi.max())
    assert decays >= 8 and steady >= 8


def test_zo_gradient_is_nearly_orthogonal_to_the_reference():
    worst = max(
        np.abs(t.cosine).max() for seed in range(10) for t in _b5_series(seed)[0].trajectories
    )
    assert worst < 0.3
