import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_gcp import (
    CommLedger,
    DistributedSimulator,
    KruskalModel,
    LossFunction,
    MessageBus,
    ProcessorGrid,
    SamplerConfig,
    SparseTensor,
    allocate_samples,
    grid_factorization,
    partition_tensor,
)
from sparse_gcp.distsim import WorkerTopology, allreduce_gradient, grid_storage, split_points
from sparse_gcp.exceptions import ConfigError, SimulationError
from sparse_gcp.io import draw_from_model


def _fixture(dims=(12, 10, 8), seed=0):
    rng = np.random.default_rng(seed)
    truth = KruskalModel.random(dims, 2, rng, 0.0, 0.8)
    return draw_from_model(truth, "poisson", rng), KruskalModel.random(dims, 2, rng, 0.1, 1.0)


def test_allocate_samples_examples():
    assert [p for p, _ in allocate_samples(10, 0, 4)] == [3, 3, 2, 2]
    assert allocate_samples(0, 0, 3) == [(0, 0)] * 3
    assert allocate_samples(7, 5, 1) == [(7, 5)]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(1, 64))
def test_allocate_samples_properties(p, q, n):
    alloc = allocate_samples(p, q, n)
    for j, total in ((0, p), (1, q)):
        counts = [a[j] for a in alloc]
        assert sum(counts) == total
        assert max(counts) - min(counts) <= 1
        assert counts == sorted(counts, reverse=True)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 50), st.integers(1, 12))
def test_split_points_near_uniform(size, parts):
    pts = split_points(size, parts)
    sizes = np.diff(pts)
    assert pts[0] == 0 and pts[-1] == size and len(sizes) == parts
    assert sizes.max() - sizes.min() <= 1


def test_grid_small_cases():
    assert grid_factorization(1, (5, 6, 7)).counts == (1, 1, 1)
    # Prime worker count goes entirely to the largest mode.
    assert grid_factorization(7, (10, 40, 20)).counts == (1, 7, 1)
    assert grid_factorization(5, (3, 3, 9, 2)).counts == (1, 1, 5, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.lists(st.integers(1, 500), min_size=2, max_size=4))
def test_grid_matches_brute_force(p, dims):
    divisors = [k for k in range(1, p + 1) if p % k == 0]
    cands = [t for t in itertools.product(divisors, repeat=len(dims)) if math.prod(t) == p]
    best = min(sum(i * p // n for i, n in zip(dims, t)) for t in cands)
    grid = grid_factorization(p, dims)
    assert math.prod(grid.counts) == p
    assert grid_storage(grid.counts, dims) == best


def test_grid_validation():
    with pytest.raises(ConfigError):
        ProcessorGrid((2, 2), (4, 4, 4))
    with pytest.raises(ConfigError):
        grid_factorization(0, (3, 3))


def test_rank_coordinates_round_trip():
    g = ProcessorGrid((2, 3, 2), (8, 9, 4))
    for r in range(g.n_workers):
        assert g.rank_of(g.coords_of(r)) == r
    assert g.coords_of(1) == (0, 0, 1)
    assert g.slice_members(1, 2) == [r for r in range(12) if g.coords_of(r)[1] == 2]
    assert len(g.fiber_members(5, 1)) == 3


def test_partition_is_disjoint_cover():
    x, _ = _fixture()
    grid = ProcessorGrid((3, 2, 2), x.dims)
    blocks = partition_tensor(x, grid)
    seen = Counter()
    for b in blocks:
        coords, vals = b.globalized()
        for c, v in zip(map(tuple, coords), vals):
            seen[(c, v)] += 1
        lo_hi = [grid.block_range(b.rank, k) for k in range(3)]
        assert all(lo <= c[k] < hi for c in coords for k, (lo, hi) in enumerate(lo_hi))
    assert seen == Counter(zip(map(tuple, x.coords), x.values))
    assert all(v == 1 for v in seen.values())


def test_partition_trivial_grid_and_empty_blocks():
    x, _ = _fixture()
    (only,) = partition_tensor(x, ProcessorGrid((1, 1, 1), x.dims))
    assert only.tensor.equals(x)
    # More workers than rows gives zero-extent blocks.
    y = SparseTensor([[0, 0]], [1.0], (2, 3))
    blocks = partition_tensor(y, ProcessorGrid((4, 1), y.dims))
    assert [b.tensor is None for b in blocks] == [False, False, True, True]
    assert blocks[1].tensor.nnz == 0 and blocks[1].dims == (1, 3)


def test_message_bus_orders_by_sender_then_sequence():
    bus = MessageBus()
    bus.send(2, 0, "a", "x")
    bus.send(1, 0, "a", "y")
    bus.send(1, 0, "b", "skip")
    bus.send(1, 0, "a", "z")
    assert bus.deliver(0, "a") == [(1, "y"), (1, "z"), (2, "x")]
    assert bus.pending() == 1
    assert bus.deliver(0) == [(1, "skip")]


def test_ledger_records_and_csv(tmp_path):
    led = CommLedger()
    led.record(0, 1, scalars=5)
    led.record(0, 1, imported=2, setup=1)
    led.record(1, 0, exported=3)
    assert led.totals() == {"scalars_reduced": 5, "rows_imported": 2, "rows_exported": 3, "setup_msgs": 1}
    assert led.per_iteration("scalars_reduced") == {0: 5, 1: 0}
    with pytest.raises(SimulationError):
        led.record(0, 0, scalars=-1)
    led.write_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "iter,mode,scalars_reduced,rows_imported,rows_exported,setup_msgs"
    assert lines[1] == "0,1,5,2,0,1"


def test_allreduce_cancellation_and_single_worker():
    grid = ProcessorGrid((1, 2), (3, 4))
    topo = WorkerTopology(grid, "all-reduce")
    led = CommLedger()
    g = np.arange(6.0).reshape(3, 2)
    out = allreduce_gradient(topo, [g, -g], 0, led, 0)
    np.testing.assert_array_equal(out[0], np.zeros((3, 2)))
    np.testing.assert_array_equal(out[1], out[0])
    assert led.totals()["scalars_reduced"] == 2 * 6
    single = WorkerTopology(ProcessorGrid((1, 1), (3, 4)))
    led1 = CommLedger()
    out1 = allreduce_gradient(single, [g], 0, led1, 0)
    np.testing.assert_array_equal(out1[0], g)
    assert len(led1) == 1 and led1.totals()["scalars_reduced"] == 0


def test_two_sided_rows_owned_exactly_once():
    grid = ProcessorGrid((2, 3, 1), (11, 7, 5))
    topo = WorkerTopology(grid, "two-sided")
    for k in range(3):
        owned = np.concatenate([topo.owned_rows(r, k) for r in range(grid.n_workers)])
        assert sorted(owned.tolist()) == list(range(grid.dims[k]))
        for r in range(grid.n_workers):
            lo, hi = grid.block_range(r, k)
            rows = topo.owned_rows(r, k)
            assert all(lo <= i < hi for i in rows)


def test_local_table_hides_unowned_rows():
    _, model = _fixture()
    topo = WorkerTopology(ProcessorGrid((2, 2, 1), model.dims), "two-sided")
    t = topo.local_table(model, 3)
    for k in range(3):
        rows = topo.owned_rows(3, k)
        np.testing.assert_array_equal(t.factors[k][rows], model.factors[k][rows])
        others = np.setdiff1d(np.arange(model.dims[k]), rows)
        assert np.isnan(t.factors[k][others]).all()


@pytest.mark.parametrize("p", [2, 3, 4, 6])
@pytest.mark.parametrize("sampling", ["semi-stratified", "stratified"])
def test_gradient_invariant_to_workers_and_scheme(p, sampling):
    x, model = _fixture(seed=p)
    loss = LossFunction("poisson")
    cfg = SamplerConfig(sampling, 150, 120)
    ref_sim = DistributedSimulator(x, 1)
    ref = ref_sim.gradient(model, ref_sim.worker_draws(x.build_index(), cfg, 4, 2), loss, 2)
    for scheme in ("all-reduce", "two-sided"):
        sim = DistributedSimulator(x, p, scheme=scheme)
        g = sim.gradient(model, sim.worker_draws(x.build_index(), cfg, 4, 2), loss, 2)
        np.testing.assert_allclose(g, ref, rtol=1e-12, atol=1e-12)
        assert sim.bus.pending() == 0


def test_two_sided_no_traffic_for_local_rows():
    x = SparseTensor([[0, 0], [5, 5]], [1.0, 2.0], (6, 6))
    model = KruskalModel((6, 6), 1, np.ones(12))
    sim = DistributedSimulator(x, 1, grid=ProcessorGrid((1, 1), (6, 6)), scheme="two-sided")
    sim.gradient(model, sim.worker_draws(x, SamplerConfig(p=4, q=4), 0, 0), LossFunction("poisson"), 0)
    t = sim.ledger.totals()
    assert t["rows_imported"] == t["rows_exported"] == t["setup_msgs"] == 0


def test_two_sided_volume_bounded_by_dense():
    x, model = _fixture()
    sim = DistributedSimulator(x, 4, scheme="two-sided")
    sim.gradient(model, sim.worker_draws(x, SamplerConfig(p=5000, q=5000), 0, 0), LossFunction("poisson"), 0)
    for row in sim.ledger.rows:
        slice_size = sim.n_workers // sim.grid.counts[row.mode]
        assert row.rows_imported <= x.dims[row.mode] * slice_size


def test_local_layout_covers_blocks():
    x, model = _fixture()
    sim = DistributedSimulator(x, 4, sample_layout="local")
    draws = sim.worker_draws(x, SamplerConfig(p=40, q=40), 0, 0)
    for w, d in enumerate(draws):
        owner = sim.grid.block_of_coords(d.coords)
        assert (owner == w).all()
    g = sim.gradient(model, draws, LossFunction("poisson"), 0)
    assert np.isfinite(g).all()


def test_two_sided_rejects_fused():
    x, _ = _fixture()
    sim = DistributedSimulator(x, 2, scheme="two-sided")
    with pytest.raises(ConfigError):
        sim.gradient_fn(x, LossFunction("poisson"), SamplerConfig(), 0, fused=True)
    with pytest.raises(ConfigError):
        DistributedSimulator(x, 2, scheme="ring")
