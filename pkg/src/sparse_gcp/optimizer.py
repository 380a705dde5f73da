"""Adam for Kruskal models and the annealed epoch driver."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigError, SimulationError
from .losses import LossFunction, estimated_loss, get_loss
from .rng import RngStream
from .sampler import SamplerConfig, sampled_gradient
from .tensor import KruskalModel, SparseTensor

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "iter", "est_loss", "rate", "elapsed_s")


@dataclass
class AdamState:
    """Moments, step counter and rate schedule for one model.

    ``B`` and ``C`` are congruent with the model's contiguous storage.
    """

    B: np.ndarray
    C: np.ndarray
    t: int = 0
    rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lower_bound: float = -np.inf
    initial_rate: float | None = None
    decay: float = 0.1
    fails: int = 0
    max_fails: int = 3

    def __post_init__(self):
        if self.initial_rate is None:
            self.initial_rate = self.rate
        if self.B.shape != self.C.shape:
            raise ValueError("moment arrays must have equal length")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("Adam eps must be positive")
        if self.rate < 0:
            raise ConfigError("Adam rate must be nonnegative")

    @classmethod
    def for_model(cls, model: KruskalModel, **params) -> "AdamState":
        return cls(np.zeros(model.size), np.zeros(model.size), **params)

    def snapshot(self) -> tuple:
        return self.B.copy(), self.C.copy(), self.t

    def restore(self, snap: tuple):
        B, C, t = snap
        self.B[:] = B
        self.C[:] = C
        self.t = t

    def copy(self) -> "AdamState":
        return AdamState(
            self.B.copy(), self.C.copy(), self.t, self.rate, self.beta1, self.beta2,
            self.eps, self.lower_bound, self.initial_rate, self.decay, self.fails,
            self.max_fails,
        )


@dataclass(frozen=True)
class EpochConfig:
    epochs: int = 20
    iters_per_epoch: int = 100
    max_fails: int = 3

    def __post_init__(self):
        if self.epochs < 1 or self.iters_per_epoch < 1 or self.max_fails < 1:
            raise ConfigError("epochs, iters_per_epoch and max_fails must be positive")


def adam_update(model: KruskalModel, grad, state: AdamState) -> None:
    """One Adam step over the whole contiguous coefficient array, in place."""
    g = model.flat(grad)
    if state.B.shape[0] != model.size:
        raise ValueError("Adam state does not match the model size")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.B *= b1
    state.B += (1.0 - b1) * g
    state.C *= b2
    state.C += (1.0 - b2) * (g * g)
    b_hat = state.B / (1.0 - b1 ** state.t)
    c_hat = state.C / (1.0 - b2 ** state.t)
    model.data -= state.rate * (b_hat / np.sqrt(c_hat + state.eps))
    if state.lower_bound > -np.inf:
        np.maximum(model.data, state.lower_bound, out=model.data)


def sum_in_order(arrays: Sequence[np.ndarray | None]) -> np.ndarray:
    """Elementwise sum in list order; ``None`` marks a dropped worker."""
    if not arrays:
        raise SimulationError("no worker contributions to reduce")
    for w, a in enumerate(arrays):
        if a is None:
            raise SimulationError(f"worker {w} did not contribute (dropped out)")
    total = np.array(arrays[0], dtype=np.float64, copy=True)
    for a in arrays[1:]:
        total += a
    return total


def sync_sgd_iteration(model: KruskalModel, worker_grads: Sequence, state: AdamState) -> None:
    """Sum worker gradients in worker-index order, then one Adam step."""
    flats = [None if g is None else model.flat(g) for g in worker_grads]
    adam_update(model, sum_in_order(flats), state)


@dataclass
class TraceRecord:
    epoch: int
    iter: int
    est_loss: float
    rate: float
    elapsed_s: float


def write_trace_csv(trace: Sequence[TraceRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.epoch, r.iter, repr(r.est_loss), repr(r.rate), f"{r.elapsed_s:.6f}"])


@dataclass
class RunInfo:
    """Bookkeeping of an annealed run (attached to the returned trace)."""

    accepted: list[int] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)
    best_loss: float = np.inf
    iterations: int = 0
    stopped_by: str = "epochs"


class Trace(list):
    info: RunInfo


def default_sample_counts(x: SparseTensor, gnzs=None, gzs=None, fnzs=None, fzs=None):
    """Fill unspecified counts: one given count of a pair is mirrored to the other.

    Defaults: ``max(1000, N/100)`` gradient and ``max(10000, N/10)`` objective
    samples of each kind. Zero-sample counts are 0 when the tensor has no zeros.
    """
    n = x.nnz
    has_zeros = x.total_entries > n
    if gnzs is None and gzs is None:
        gnzs = max(1000, n // 100)
        gzs = gnzs
    elif gnzs is None:
        gnzs = gzs
    elif gzs is None:
        gzs = gnzs
    if fnzs is None and fzs is None:
        fnzs = max(10000, n // 10)
        fzs = fnzs
    elif fnzs is None:
        fnzs = fzs
    elif fzs is None:
        fzs = fnzs
    if not has_zeros:
        gzs = fzs = 0
    if n == 0:
        gnzs = fnzs = 0
    return int(gnzs), int(gzs), int(fnzs), int(fzs)


GradientFn = Callable[[KruskalModel, int], np.ndarray]


def local_gradient_fn(x: SparseTensor, loss: LossFunction, cfg: SamplerConfig, seed: int,
                      *, fused: bool = False, worker: int = 0,
                      offsets=None) -> GradientFn:
    """Gradient source for one execution context sampling ``x`` directly."""
    root = RngStream(seed)

    def grad(model, iteration):
        rng = root.substream("grad", iteration, worker)
        return sampled_gradient(x, model, loss, cfg, rng, fused=fused, offsets=offsets)

    return grad


def objective_stream(seed: int) -> RngStream:
    """Fixed stream for objective samples: every epoch evaluates the same sample set."""
    return RngStream(seed).substream("objective")


def run_gcp_adam(x: SparseTensor, model0: KruskalModel, loss, sampler_cfg: SamplerConfig,
                 epoch_cfg: EpochConfig, topology=None, *, state: AdamState | None = None,
                 seed: int = 0, fused: bool = False, fnz: int | None = None,
                 fz: int | None = None, timing: bool = True,
                 gradient_fn: GradientFn | None = None) -> tuple[KruskalModel, Trace]:
    """Synchronous GCP-Adam with epoch-level annealing.

    After each epoch the estimated loss is compared to the best so far. A
    decrease is accepted and checkpointed (model and Adam moments); otherwise
    the checkpoint is restored, the rate is multiplied by ``decay`` and the
    failure count grows. The run stops once ``max_fails`` failures have
    accumulated or the epoch budget is spent.

    Parameters
    ----------
    topology : distsim.DistributedSimulator, optional
        When given, gradients come from the simulated distributed layer.
    gradient_fn : callable, optional
        Overrides the gradient source entirely (``(model, iteration) -> flat``).

    Returns
    -------
    model : KruskalModel
        The best accepted model (the initial model if nothing was accepted).
    trace : Trace
        One record per epoch plus the initial evaluation; ``trace.info``
        holds accept/reject bookkeeping.
    """
    loss = get_loss(loss)
    if sampler_cfg.scheme == "stratified" and x.index_mode is None:
        x = x.build_index(sampler_cfg.search)
    _, _, d_fnz, d_fz = default_sample_counts(x)
    fnz = d_fnz if fnz is None else fnz
    fz = d_fz if fz is None else fz
    if x.total_entries == x.nnz:
        fz = 0

    model = model0.copy()
    if state is None:
        state = AdamState.for_model(model, lower_bound=loss.lower_bound)
    state.max_fails = epoch_cfg.max_fails
    if gradient_fn is None:
        if topology is not None:
            gradient_fn = topology.gradient_fn(x, loss, sampler_cfg, seed, fused=fused)
        else:
            gradient_fn = local_gradient_fn(x, loss, sampler_cfg, seed, fused=fused)

    obj_x = x if (fz == 0 or x.index_mode is not None) else x.build_index("sorted")
    obj_rng = objective_stream(seed)

    def evaluate(m):
        return estimated_loss(obj_x, m, loss, fnz, fz, obj_rng)

    start = time.perf_counter()
    clock = (lambda: time.perf_counter() - start) if timing else (lambda: 0.0)
    best = evaluate(model)
    info = RunInfo(best_loss=best)
    trace = Trace([TraceRecord(0, 0, best, state.rate, clock())])
    trace.info = info
    ckpt_model, ckpt_state = model.data.copy(), state.snapshot()
    iteration = 0

    for epoch in range(1, epoch_cfg.epochs + 1):
        for _ in range(epoch_cfg.iters_per_epoch):
            g = gradient_fn(model, iteration)
            sync_sgd_iteration(model, [g], state)
            iteration += 1
        value = evaluate(model)
        trace.append(TraceRecord(epoch, iteration, value, state.rate, clock()))
        if value < best:
            best = value
            ckpt_model, ckpt_state = model.data.copy(), state.snapshot()
            info.accepted.append(epoch)
        else:
            model.data[:] = ckpt_model
            state.restore(ckpt_state)
            state.rate *= state.decay
            state.fails += 1
            info.rejected.append(epoch)
            logger.info("epoch %d rejected (loss %.6g >= %.6g), rate -> %.3g",
                        epoch, value, best, state.rate)
            if state.fails >= state.max_fails:
                info.stopped_by = "max_fails"
                break
    info.best_loss = best
    info.iterations = iteration
    return model, trace
