"""Asynchronous GCP: LocalSGD model averaging and FedAdam server steps.

Each worker keeps a full model replica ``model`` (advanced by local Adam
steps on its own tensor block) and, for FedAdam, an ``anchor`` copy that only
changes at synchronization. Synchronization fires on the first iteration of
every epoch ``e`` with ``e % tau == 0`` (epochs count from 1).
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass

import numpy as np

from .distsim import ProcessorGrid, allocate_samples, grid_factorization, partition_tensor
from .exceptions import ConfigError, SimulationError
from .losses import estimated_loss, get_loss
from .optimizer import (
    AdamState,
    EpochConfig,
    RunInfo,
    Trace,
    TraceRecord,
    adam_update,
    default_sample_counts,
    objective_stream,
    sum_in_order,
)
from .rng import RngStream
from .sampler import SamplerConfig, sampled_gradient
from .tensor import KruskalModel, SparseTensor

logger = logging.getLogger(__name__)

METHODS = ("local-sgd", "fedadam")


@dataclass(frozen=True)
class FederatedConfig:
    """Synchronization period and server-side Adam settings.

    ``meta_rate=None`` means "same as the client rate".
    """

    tau: int = 1
    meta_rate: float | None = None
    server_beta1: float = 0.9
    server_beta2: float = 0.999
    server_eps: float = 1e-8

    def __post_init__(self):
        if int(self.tau) < 1:
            raise ConfigError("downpour iterations (tau) must be at least 1")
        if self.meta_rate is not None and self.meta_rate <= 0:
            raise ConfigError("meta-rate must be positive")


@dataclass
class FederatedWorker:
    rank: int
    data: SparseTensor | None
    offsets: tuple[int, ...]
    cfg: SamplerConfig | None
    model: KruskalModel
    anchor: KruskalModel
    client: AdamState
    server: AdamState
    stream_id: int

    def snapshot(self):
        return (self.model.data.copy(), self.anchor.data.copy(),
                self.client.snapshot(), self.server.snapshot())

    def restore(self, snap):
        m, u, c, s = snap
        self.model.data[:] = m
        self.anchor.data[:] = u
        self.client.restore(c)
        self.server.restore(s)


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


class FederatedSimulation:
    """Workers plus the synchronization hooks of LocalSGD and FedAdam.

    Parameters
    ----------
    x : SparseTensor
        Global data; partitioned over a grid unless ``worker_data`` is given.
    model0 : KruskalModel
        Common initial model for every replica.
    client_params : dict
        Keyword arguments for each client :class:`AdamState` (rate, betas...).
    worker_data : list of SparseTensor, optional
        Explicit per-worker data in global coordinates (no partitioning).
    stream_ids : list of int, optional
        RNG stream id per worker; defaults to the worker rank.
    """

    def __init__(self, x: SparseTensor, model0: KruskalModel, loss, sampler_cfg: SamplerConfig,
                 fed_cfg: FederatedConfig, *, n_workers: int = 1, grid: ProcessorGrid | None = None,
                 client_params: dict | None = None, seed: int = 0, fused: bool = False,
                 worker_data=None, stream_ids=None):
        self.loss = get_loss(loss)
        self.fed_cfg = fed_cfg
        self.seed = seed
        self.fused = fused
        self.root = RngStream(seed)
        client_params = dict(client_params or {})
        client_params.setdefault("lower_bound", self.loss.lower_bound)
        meta_rate = fed_cfg.meta_rate if fed_cfg.meta_rate is not None else client_params.get("rate", 1e-3)
        server_params = dict(rate=meta_rate, beta1=fed_cfg.server_beta1, beta2=fed_cfg.server_beta2,
                             eps=fed_cfg.server_eps, lower_bound=client_params["lower_bound"])

        if worker_data is not None:
            parts = [(t, (0,) * x.ndim) for t in worker_data]
        else:
            grid = grid or grid_factorization(n_workers, x.dims)
            parts = [(b.tensor, b.offsets) for b in partition_tensor(x, grid)]
        n = len(parts)
        stream_ids = list(range(n)) if stream_ids is None else list(stream_ids)
        alloc = allocate_samples(sampler_cfg.p, sampler_cfg.q, n)
        self.workers: list[FederatedWorker] = []
        for w, (data, offsets) in enumerate(parts):
            p_w, q_w = alloc[w]
            if data is None or data.nnz == 0:
                p_w = 0
            if data is None or data.total_entries == data.nnz:
                q_w = 0
            cfg = sampler_cfg.with_counts(p_w, q_w) if p_w + q_w > 0 else None
            if cfg is not None and cfg.scheme == "stratified" and q_w and data.index_mode is None:
                data = data.build_index(cfg.search)
            self.workers.append(FederatedWorker(
                rank=w, data=data, offsets=offsets, cfg=cfg,
                model=model0.copy(), anchor=model0.copy(),
                client=AdamState.for_model(model0, **client_params),
                server=AdamState.for_model(model0, **server_params),
                stream_id=stream_ids[w],
            ))
        self.sync_log: list[tuple[int, str]] = []

    @property
    def n_workers(self) -> int:
        return len(self.workers)

    # -- local work ------------------------------------------------------

    def local_gradient(self, worker: FederatedWorker, iteration: int) -> np.ndarray:
        if worker.cfg is None:
            return np.zeros(worker.model.size)
        rng = self.root.substream("grad", iteration, worker.stream_id)
        offsets = worker.offsets if any(worker.offsets) else None
        return sampled_gradient(worker.data, worker.model, self.loss, worker.cfg, rng,
                                fused=self.fused, offsets=offsets)

    def local_step(self, worker: FederatedWorker, iteration: int) -> None:
        adam_update(worker.model, self.local_gradient(worker, iteration), worker.client)

    # -- synchronization -------------------------------------------------

    def _check_replicas(self, epoch: int) -> None:
        digests = {_digest(w.model.data) for w in self.workers}
        if len(digests) != 1:
            raise SimulationError(f"replicas differ after synchronization in epoch {epoch}")
        self.sync_log.append((epoch, digests.pop()))

    def average_models(self, epoch: int) -> None:
        """LocalSGD: all-reduce the coefficients and divide by the worker count."""
        total = sum_in_order([w.model.data for w in self.workers])
        total /= float(self.n_workers)
        for w in self.workers:
            w.model.data[:] = total
        self._check_replicas(epoch)

    def server_step(self, epoch: int) -> None:
        """FedAdam: ``D = U - M``, all-reduce D, Adam step on U, then ``M <- U``."""
        diffs = [w.anchor.data - w.model.data for w in self.workers]
        d = sum_in_order(diffs)
        for w in self.workers:
            adam_update(w.anchor, d, w.server)
            w.model.data[:] = w.anchor.data
        if len({_digest(w.anchor.data) for w in self.workers}) != 1:
            raise SimulationError(f"server replicas differ in epoch {epoch}")
        self._check_replicas(epoch)

    def local_sgd_iteration(self, epoch: int, iteration: int, sync_point: bool) -> None:
        if epoch < 1:
            raise ValueError("epochs are counted from 1")
        if sync_point and epoch % self.fed_cfg.tau == 0:
            self.average_models(epoch)
        for w in self.workers:
            self.local_step(w, iteration)

    def fedadam_iteration(self, epoch: int, iteration: int, sync_point: bool) -> None:
        if epoch < 1:
            raise ValueError("epochs are counted from 1")
        if sync_point and epoch % self.fed_cfg.tau == 0:
            self.server_step(epoch)
        for w in self.workers:
            self.local_step(w, iteration)

    # -- global view -----------------------------------------------------

    def averaged_model(self) -> KruskalModel:
        model = self.workers[0].model.copy()
        total = sum_in_order([w.model.data for w in self.workers])
        total /= float(self.n_workers)
        model.data[:] = total
        return model

    def snapshot(self):
        return [w.snapshot() for w in self.workers]

    def restore(self, snaps) -> None:
        for w, s in zip(self.workers, snaps):
            w.restore(s)


def run_federated(x: SparseTensor, model0: KruskalModel, loss, sampler_cfg: SamplerConfig,
                  epoch_cfg: EpochConfig, fed_cfg: FederatedConfig, *, method: str = "fedadam",
                  n_workers: int = 1, grid: ProcessorGrid | None = None,
                  client_params: dict | None = None, seed: int = 0, fused: bool = False,
                  fnz: int | None = None, fz: int | None = None, timing: bool = True,
                  simulation: FederatedSimulation | None = None) -> tuple[KruskalModel, Trace]:
    """Annealed epoch loop for LocalSGD or FedAdam.

    The annealing decision uses the estimated loss of the worker-averaged
    model (an all-reduce every worker agrees on), evaluated after every
    epoch. A rejected epoch restores every worker's replicas and Adam states
    and decays every client rate.

    Returns the averaged model at the best checkpoint and the trace.
    """
    method = method.lower().replace("_", "-")
    if method not in METHODS:
        raise ConfigError(f"unknown federated method {method!r}; choose from {METHODS}")
    loss = get_loss(loss)
    if sampler_cfg.scheme == "stratified" and x.index_mode is None:
        x = x.build_index(sampler_cfg.search)
    _, _, d_fnz, d_fz = default_sample_counts(x)
    fnz = d_fnz if fnz is None else fnz
    fz = d_fz if fz is None else fz
    if x.total_entries == x.nnz:
        fz = 0
    sim = simulation or FederatedSimulation(
        x, model0, loss, sampler_cfg, fed_cfg, n_workers=n_workers, grid=grid,
        client_params=client_params, seed=seed, fused=fused)
    step = sim.fedadam_iteration if method == "fedadam" else sim.local_sgd_iteration

    obj_x = x if (fz == 0 or x.index_mode is not None) else x.build_index("sorted")
    obj_rng = objective_stream(seed)

    def evaluate():
        return estimated_loss(obj_x, sim.averaged_model(), loss, fnz, fz, obj_rng)

    start = time.perf_counter()
    clock = (lambda: time.perf_counter() - start) if timing else (lambda: 0.0)
    best = evaluate()
    info = RunInfo(best_loss=best)
    lead = sim.workers[0].client
    trace = Trace([TraceRecord(0, 0, best, lead.rate, clock())])
    trace.info = info
    ckpt = sim.snapshot()
    fails = 0
    iteration = 0
    for epoch in range(1, epoch_cfg.epochs + 1):
        for i in range(epoch_cfg.iters_per_epoch):
            step(epoch, iteration, i == 0)
            iteration += 1
        value = evaluate()
        trace.append(TraceRecord(epoch, iteration, value, lead.rate, clock()))
        if value < best:
            best = value
            ckpt = sim.snapshot()
            info.accepted.append(epoch)
        else:
            sim.restore(ckpt)
            for w in sim.workers:
                w.client.rate *= w.client.decay
                w.client.fails += 1
            fails += 1
            info.rejected.append(epoch)
            logger.info("epoch %d rejected (loss %.6g >= %.6g)", epoch, value, best)
            if fails >= epoch_cfg.max_fails:
                info.stopped_by = "max_fails"
                break
    info.best_loss = best
    info.iterations = iteration
    return sim.averaged_model(), trace
