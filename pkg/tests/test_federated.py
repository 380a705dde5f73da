import numpy as np
import pytest

from sparse_gcp import (
    EpochConfig,
    FederatedConfig,
    FederatedSimulation,
    KruskalModel,
    LossFunction,
    SamplerConfig,
    run_federated,
    run_gcp_adam,
)
from sparse_gcp.exceptions import ConfigError, SimulationError
from sparse_gcp.io import draw_from_model, init_model


@pytest.fixture
def grid_fixture():
    rng = np.random.default_rng(21)
    truth = KruskalModel.random((12, 10, 8), 2, rng, 0.0, 0.8)
    x = draw_from_model(truth, "poisson", rng)
    return x, init_model(x, 2, seed=3)


def _sim(x, model0, n=4, tau=1, **kw):
    return FederatedSimulation(x, model0, LossFunction("poisson"), SamplerConfig(p=60, q=60),
                               FederatedConfig(tau=tau), n_workers=n,
                               client_params={"rate": 0.02}, seed=5, **kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        FederatedConfig(tau=0)
    with pytest.raises(ConfigError):
        FederatedConfig(meta_rate=-1.0)


def test_meta_rate_defaults_to_client_rate(grid_fixture):
    sim = _sim(*grid_fixture)
    assert sim.workers[0].server.rate == 0.02
    sim2 = FederatedSimulation(*grid_fixture, "poisson", SamplerConfig(p=5, q=5),
                               FederatedConfig(meta_rate=0.5), n_workers=2)
    assert sim2.workers[1].server.rate == 0.5


def test_local_sgd_average_is_mean(grid_fixture):
    sim = _sim(*grid_fixture)
    for it in range(3):
        for w in sim.workers:
            sim.local_step(w, it)
    before = np.array([w.model.data for w in sim.workers])
    sim.average_models(1)
    np.testing.assert_allclose(sim.workers[2].model.data, before.mean(axis=0), rtol=1e-14)
    assert sim.sync_log[-1][0] == 1


def test_server_step_uses_summed_pseudo_gradient(grid_fixture):
    x, model0 = grid_fixture
    sim = _sim(x, model0)
    for it in range(4):
        for w in sim.workers:
            sim.local_step(w, it)
    d = sum(w.anchor.data - w.model.data for w in sim.workers)
    anchor = sim.workers[0].anchor.data.copy()
    sim.server_step(1)
    # First server step: U - rate * D / sqrt(D^2 + eps), clamped at 0.
    expect = np.maximum(anchor - 0.02 * d / np.sqrt(d * d + 1e-8), 0.0)
    np.testing.assert_allclose(sim.workers[0].anchor.data, expect, rtol=1e-12, atol=1e-15)
    for w in sim.workers:
        np.testing.assert_array_equal(w.model.data, w.anchor.data)


def test_sync_schedule(grid_fixture):
    x, model0 = grid_fixture
    sim = _sim(x, model0, tau=3)
    it = 0
    for epoch in range(1, 8):
        for i in range(2):
            sim.fedadam_iteration(epoch, it, i == 0)
            it += 1
    assert [e for e, _ in sim.sync_log] == [3, 6]
    with pytest.raises(ValueError):
        sim.local_sgd_iteration(0, 0, True)


def test_replicated_workers_stay_identical(grid_fixture):
    x, model0 = grid_fixture
    sim = _sim(x, model0, n=3, worker_data=[x, x, x], stream_ids=[7, 7, 7])
    for it in range(5):
        for w in sim.workers:
            sim.local_step(w, it)
    assert len({w.model.data.tobytes() for w in sim.workers}) == 1
    # Three identical clients: averaging is a no-op up to rounding of (3a)/3.
    ref = sim.workers[0].model.data.copy()
    sim.average_models(1)
    np.testing.assert_allclose(sim.workers[0].model.data, ref, rtol=1e-15)


def test_divergent_replicas_are_detected(grid_fixture):
    sim = _sim(*grid_fixture)
    sim.workers[1].model.data[0] += 1.0
    with pytest.raises(SimulationError):
        sim._check_replicas(1)


@pytest.mark.parametrize("method", ["fedadam", "local-sgd"])
def test_single_worker_matches_sync(method, grid_fixture):
    x, model0 = grid_fixture
    cfg = SamplerConfig("stratified", 30, 30)
    ref, ref_trace = run_gcp_adam(x, model0, "poisson", cfg, EpochConfig(3, 5), seed=2,
                                  fnz=100, fz=100, timing=False)
    got, trace = run_federated(x, model0, "poisson", cfg, EpochConfig(3, 5), FederatedConfig(tau=10),
                               method=method, seed=2, fnz=100, fz=100, timing=False)
    np.testing.assert_array_equal(got.data, ref.data)
    assert [r.est_loss for r in trace] == [r.est_loss for r in ref_trace]


@pytest.mark.parametrize("method", ["fedadam", "local-sgd"])
def test_multi_worker_run_makes_progress(method, grid_fixture):
    x, model0 = grid_fixture
    model, trace = run_federated(x, model0, "poisson", SamplerConfig(p=100, q=100), EpochConfig(4, 10),
                                 FederatedConfig(tau=2), method=method, n_workers=4,
                                 client_params={"rate": 0.01}, seed=1, fnz=200, fz=200, timing=False)
    assert trace.info.best_loss < trace[0].est_loss
    assert np.all(model.data >= 0.0)


def test_unknown_method(grid_fixture):
    with pytest.raises(ConfigError):
        run_federated(*grid_fixture, "poisson", SamplerConfig(), EpochConfig(1, 1), FederatedConfig(),
                      method="elastic")
