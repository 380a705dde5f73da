"""Stratified and semi-stratified gradient sampling, plus the fused kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .draws import draw_nonzero_positions, draw_zero_coords
from .exceptions import ConfigError, SamplingError
from .losses import LossFunction
from .rng import RngStream
from .tensor import (
    KruskalModel,
    SampledGradientTensor,
    SparseTensor,
    accumulate_mttkrp,
    gather_rows,
    leave_one_out,
    model_values,
    mttkrp,
)

SCHEMES = ("stratified", "semi-stratified")
SEARCH_MODES = ("sorted", "hashmap")


def _norm_scheme(scheme: str) -> str:
    s = scheme.lower().replace("_", "-")
    if s not in SCHEMES:
        raise ConfigError(f"unknown sampling scheme {scheme!r}; choose from {SCHEMES}")
    return s


@dataclass(frozen=True)
class SamplerConfig:
    """Per-iteration sample counts and sampling options.

    ``p`` nonzero and ``q`` zero samples are drawn with replacement.
    """

    scheme: str = "semi-stratified"
    p: int = 1000
    q: int = 1000
    search: str = "sorted"
    rejection_cap: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "scheme", _norm_scheme(self.scheme))
        if self.search not in SEARCH_MODES:
            raise ConfigError(f"unknown search mode {self.search!r}; choose from {SEARCH_MODES}")
        if self.p < 0 or self.q < 0:
            raise ConfigError("sample counts must be nonnegative")
        if self.p + self.q == 0:
            raise ConfigError("at least one sample per iteration is required (p + q > 0)")
        if self.rejection_cap < 1:
            raise ConfigError("rejection_cap must be at least 1")

    def with_counts(self, p: int, q: int) -> "SamplerConfig":
        return SamplerConfig(self.scheme, int(p), int(q), self.search, self.rejection_cap)


@dataclass
class SampleDraw:
    """Coordinates and data values of one batch of samples.

    ``coords`` are in the model's (global) index space; the first
    ``n_nonzero`` rows are nonzero samples. ``nz_weight`` and ``z_weight``
    are the unbiasing factors ``N/p`` and :func:`zero_weight`.
    """

    coords: np.ndarray
    xvals: np.ndarray
    n_nonzero: int
    nz_weight: float
    z_weight: float
    semi: bool

    def values(self, model: KruskalModel, loss: LossFunction, start=0, stop=None) -> np.ndarray:
        """Gradient-tensor values for entries ``start:stop``."""
        stop = self.coords.shape[0] if stop is None else stop
        rows = gather_rows(model, self.coords[start:stop])
        return self._values_from_rows(rows, loss, start, stop)

    def _values_from_rows(self, rows, loss, start, stop):
        m = model_values(rows)
        y = np.empty(stop - start)
        split = min(max(self.n_nonzero - start, 0), stop - start)
        if split:
            mn = m[:split]
            d = loss.deriv(self.xvals[start:start + split], mn)
            if self.semi:
                d = d - loss.deriv(0.0, mn)
            y[:split] = self.nz_weight * d
        if split < stop - start:
            y[split:] = self.z_weight * loss.deriv(0.0, m[split:])
        return y


def zero_weight(x: SparseTensor, cfg: SamplerConfig) -> float:
    """Unbiasing factor of a zero sample.

    Verified zeros are uniform over the ``M - N`` zero entries; unverified
    (semi-stratified) candidates are uniform over all ``M`` entries, and the
    nonzero-side correction removes the stored entries they hit.
    """
    if not cfg.q:
        return 0.0
    if cfg.scheme == "semi-stratified":
        return x.total_entries / cfg.q
    return (x.total_entries - x.nnz) / cfg.q


def draw_samples(x: SparseTensor, cfg: SamplerConfig, rng: RngStream, *,
                 nonzero_slots=None, zero_slots=None, offsets=None) -> SampleDraw:
    """Draw sample coordinates for the given slots.

    Slots default to ``0..p-1`` and ``0..q-1``. Weights always use the
    configured totals ``cfg.p`` / ``cfg.q``, so a caller evaluating a subset
    of slots gets that subset of the full sample. ``offsets`` shift local
    block coordinates into the model's index space.
    """
    if nonzero_slots is None:
        nonzero_slots = np.arange(cfg.p)
    if zero_slots is None:
        zero_slots = np.arange(cfg.q)
    nonzero_slots = np.asarray(nonzero_slots, dtype=np.uint64)
    zero_slots = np.asarray(zero_slots, dtype=np.uint64)
    if cfg.p > 0 and x.nnz == 0:
        raise SamplingError("nonzero samples requested (p > 0) but the tensor has no stored entries")
    semi = cfg.scheme == "semi-stratified"
    if not semi and cfg.q > 0:
        if x.nnz >= x.total_entries:
            raise SamplingError("zero samples requested but every entry of the tensor is nonzero")
        if x.index_mode is None:
            raise SamplingError("stratified zero sampling needs a nonzero index; call build_index()")

    pos = draw_nonzero_positions(x, rng, nonzero_slots)
    zc = draw_zero_coords(x, rng, zero_slots, verify=not semi, rejection_cap=cfg.rejection_cap)
    coords = np.concatenate([x.coords[pos], zc], axis=0)
    if offsets is not None:
        coords = coords + np.asarray(offsets, dtype=np.int64)
    xvals = np.concatenate([x.values[pos], np.zeros(zc.shape[0])])
    return SampleDraw(
        coords=coords,
        xvals=xvals,
        n_nonzero=pos.shape[0],
        nz_weight=x.nnz / cfg.p if cfg.p else 0.0,
        z_weight=zero_weight(x, cfg),
        semi=semi,
    )


def _as_sampled(draw: SampleDraw, model, loss) -> SampledGradientTensor:
    return SampledGradientTensor(
        draw.coords, draw.values(model, loss), model.dims,
        draw.n_nonzero, draw.coords.shape[0] - draw.n_nonzero,
    )


def sample_stratified(x: SparseTensor, model: KruskalModel, loss: LossFunction,
                      cfg: SamplerConfig, rng: RngStream, **slots) -> SampledGradientTensor:
    """Stratified sample: zero samples are verified absent from ``x``."""
    if cfg.scheme != "stratified":
        cfg = SamplerConfig("stratified", cfg.p, cfg.q, cfg.search, cfg.rejection_cap)
    return _as_sampled(draw_samples(x, cfg, rng, **slots), model, loss)


def sample_semi_stratified(x: SparseTensor, model: KruskalModel, loss: LossFunction,
                           cfg: SamplerConfig, rng: RngStream, **slots) -> SampledGradientTensor:
    """Semi-stratified sample: unverified zeros, corrected nonzero values."""
    if cfg.scheme != "semi-stratified":
        cfg = SamplerConfig("semi-stratified", cfg.p, cfg.q, cfg.search, cfg.rejection_cap)
    return _as_sampled(draw_samples(x, cfg, rng, **slots), model, loss)


def sample(x, model, loss, cfg: SamplerConfig, rng: RngStream, **slots) -> SampledGradientTensor:
    return _as_sampled(draw_samples(x, cfg, rng, **slots), model, loss)


def fused_sample_mttkrp(x: SparseTensor, model: KruskalModel, loss: LossFunction,
                        cfg: SamplerConfig, rng: RngStream, mode_outputs=None, *,
                        chunk_size: int = 2048, **slots) -> list[np.ndarray]:
    """Sample and accumulate all d MTTKRP outputs in one pass.

    Slots are drawn and consumed in chunks; per chunk the factor rows are
    gathered once and used for the model value, the gradient value and every mode's
    contribution. The gradient tensor is never assembled. Outputs are
    bitwise equal to ``mttkrp(sample_semi_stratified(...), model, k)``.
    """
    if cfg.scheme != "semi-stratified":
        raise ConfigError("fused sampling-MTTKRP supports only semi-stratified sampling")
    if mode_outputs is None:
        mode_outputs = [np.zeros((i, model.rank)) for i in model.dims]
    else:
        for g in mode_outputs:
            g[...] = 0.0
    nz_slots = slots.pop("nonzero_slots", None)
    z_slots = slots.pop("zero_slots", None)
    nz_slots = np.arange(cfg.p) if nz_slots is None else np.asarray(nz_slots)
    z_slots = np.arange(cfg.q) if z_slots is None else np.asarray(z_slots)
    empty = np.zeros(0, dtype=np.uint64)
    chunks = [(nz_slots[i:i + chunk_size], empty) for i in range(0, nz_slots.size, chunk_size)]
    chunks += [(empty, z_slots[i:i + chunk_size]) for i in range(0, z_slots.size, chunk_size)]
    for nz, z in chunks:
        draw = draw_samples(x, cfg, rng, nonzero_slots=nz, zero_slots=z, **slots)
        rows = gather_rows(model, draw.coords)
        y = draw._values_from_rows(rows, loss, 0, draw.coords.shape[0])
        for k in range(model.ndim):
            accumulate_mttkrp(mode_outputs[k], draw.coords[:, k], y, leave_one_out(rows, k))
    return mode_outputs


def sampled_gradient(x, model, loss, cfg: SamplerConfig, rng: RngStream, *,
                     fused: bool = False, **slots) -> np.ndarray:
    """Flat stochastic gradient in the model's contiguous layout."""
    if fused:
        mats = fused_sample_mttkrp(x, model, loss, cfg, rng, **slots)
    else:
        y = sample(x, model, loss, cfg, rng, **slots)
        mats = [mttkrp(y, model, k) for k in range(model.ndim)]
    return np.concatenate([g.reshape(-1) for g in mats])
