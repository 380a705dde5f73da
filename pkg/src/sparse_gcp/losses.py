"""Elementwise GCP losses and objective evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .draws import draw_nonzero_positions, draw_zero_coords
from .exceptions import ConfigError, OracleGuardError, SamplingError
from .rng import RngStream
from .tensor import DENSE_GUARD, KruskalModel, SparseTensor

LOSS_KINDS = ("gaussian", "poisson")


@dataclass(frozen=True)
class LossFunction:
    """Elementwise loss ``f(x, m)``.

    Gaussian is ``(x - m)**2``; Poisson is ``m - x*log(m + epsilon_shift)``.
    ``lower_bound`` is the clamp applied to model coefficients by Adam; it
    defaults to 0 for Poisson and to ``-inf`` (no clamp) for Gaussian.
    """

    kind: str = "gaussian"
    epsilon_shift: float = 1e-10
    lower_bound: float | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.kind!r}; choose from {LOSS_KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.epsilon_shift < 0:
            raise ConfigError("epsilon_shift must be nonnegative")
        if self.lower_bound is None:
            object.__setattr__(self, "lower_bound", 0.0 if kind == "poisson" else -np.inf)

    def value(self, x, m):
        if self.kind == "gaussian":
            r = x - m
            return r * r
        return m - x * np.log(m + self.epsilon_shift)

    def deriv(self, x, m):
        if self.kind == "gaussian":
            return 2.0 * (m - x)
        return 1.0 - x / (m + self.epsilon_shift)


def get_loss(loss) -> LossFunction:
    if isinstance(loss, LossFunction):
        return loss
    return LossFunction(str(loss))


def _check_scalar(x, m, loss):
    if not (np.isfinite(x) and np.isfinite(m)):
        raise ValueError(f"loss arguments must be finite, got x={x}, m={m}")
    if loss.kind == "poisson" and m < loss.lower_bound:
        raise ValueError(f"Poisson loss needs m >= {loss.lower_bound}, got {m}")


def loss_value(x: float, m: float, loss: LossFunction) -> float:
    loss = get_loss(loss)
    _check_scalar(x, m, loss)
    return float(loss.value(float(x), float(m)))


def loss_deriv(x: float, m: float, loss: LossFunction) -> float:
    loss = get_loss(loss)
    _check_scalar(x, m, loss)
    return float(loss.deriv(float(x), float(m)))


def full_loss(x: SparseTensor, model: KruskalModel, loss: LossFunction,
              guard: int = DENSE_GUARD) -> float:
    """Objective summed over every multi-index (enumerating oracle)."""
    if x.total_entries > guard:
        raise OracleGuardError(
            f"full_loss enumerates {x.total_entries} entries (guard {guard})"
        )
    loss = get_loss(loss)
    return float(loss.value(x.to_dense(guard), model.full(guard)).sum())


def exact_loss(x: SparseTensor, model: KruskalModel, loss: LossFunction) -> float:
    """Objective without enumeration.

    The zero-entry part is summed in closed form: ``sum(m)`` for Poisson
    (``f(0, m) = m``) and ``||M||^2`` via Gram matrices for Gaussian; stored
    entries are then corrected by ``f(x, m) - f(0, m)``.
    """
    loss = get_loss(loss)
    m = model.entries(x.coords)
    if loss.kind == "poisson":
        zero_part = model.total_sum()
    else:
        gram = np.ones((model.rank, model.rank))
        for f in model.factors:
            gram = gram * (f.T @ f)
        zero_part = float(gram.sum())
    correction = loss.value(x.values, m) - loss.value(0.0, m)
    return float(zero_part + correction.sum())


def estimated_loss(x: SparseTensor, model: KruskalModel, loss: LossFunction,
                   fnz: int, fz: int, rng: RngStream, *, rejection_cap: int = 1000) -> float:
    """Stratified estimate of the objective.

    ``(N/fnz) * sum f(x_i, m_i)`` over uniformly drawn stored entries plus
    ``((M-N)/fz) * sum f(0, m_i)`` over verified zero entries. Calling twice
    with the same ``rng`` evaluates the same sample set.
    """
    loss = get_loss(loss)
    n, total = x.nnz, x.total_entries
    if fnz < 0 or fz < 0:
        raise ConfigError("objective sample counts must be nonnegative")
    if fnz > 0 and n == 0:
        raise SamplingError("nonzero objective samples requested but the tensor is empty")
    if fz > 0 and total == n:
        raise SamplingError("zero objective samples requested but the tensor has no zeros")
    est = 0.0
    if fnz > 0:
        pos = draw_nonzero_positions(x, rng, np.arange(fnz))
        m = model.entries(x.coords[pos])
        est += (n / fnz) * float(loss.value(x.values[pos], m).sum())
    if fz > 0:
        if x.index_mode is None:
            x = x.build_index("sorted")
        coords = draw_zero_coords(x, rng, np.arange(fz), verify=True, rejection_cap=rejection_cap)
        m = model.entries(coords)
        est += ((total - n) / fz) * float(loss.value(0.0, m).sum())
    return est
