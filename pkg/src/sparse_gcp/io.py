"""FROSTT text I/O, Kruskal model files and synthetic count tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .exceptions import ConfigError, TensorFormatError
from .losses import LOSS_KINDS
from .tensor import KruskalModel, SparseTensor, linear_index


def load_frostt(path, dims=None) -> SparseTensor:
    """Read a FROSTT coordinate file (1-based indices, ``#`` comments).

    Parameters
    ----------
    path : str or path-like
    dims : sequence of int, optional
        Mode sizes; inferred as the per-mode maximum index when omitted.

    Raises
    ------
    TensorFormatError
        Malformed line, index below 1, non-finite value, inconsistent order,
        index beyond ``dims`` or duplicate coordinates. Messages name the line.
    """
    coords, values, lines = [], [], []
    order = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) < 2:
                raise TensorFormatError(f"line {lineno}: expected indices and a value")
            if order is None:
                order = len(parts) - 1
            elif len(parts) - 1 != order:
                raise TensorFormatError(
                    f"line {lineno}: expected {order} indices, found {len(parts) - 1}")
            try:
                idx = [int(p) for p in parts[:-1]]
                val = float(parts[-1])
            except ValueError:
                raise TensorFormatError(f"line {lineno}: cannot parse {text!r}") from None
            if min(idx) < 1:
                raise TensorFormatError(f"line {lineno}: indices are 1-based, found {min(idx)}")
            if not np.isfinite(val):
                raise TensorFormatError(f"line {lineno}: non-finite value {parts[-1]}")
            coords.append(idx)
            values.append(val)
            lines.append(lineno)
    if order is None:
        if dims is None:
            raise TensorFormatError(f"{path}: no entries and no dims given")
        return SparseTensor(np.zeros((0, len(dims)), dtype=np.int64), np.zeros(0), dims)
    c = np.asarray(coords, dtype=np.int64) - 1
    if dims is None:
        dims = tuple(int(v) + 1 for v in c.max(axis=0))
    else:
        dims = tuple(int(v) for v in dims)
        if len(dims) != order:
            raise TensorFormatError(f"--dims has {len(dims)} modes but the file has {order}")
        over = np.nonzero((c >= np.asarray(dims)).any(axis=1))[0]
        if over.size:
            raise TensorFormatError(f"line {lines[over[0]]}: index exceeds dims {dims}")
    lin = linear_index(c, dims)
    _, first, counts = np.unique(lin, return_index=True, return_counts=True)
    if (counts > 1).any():
        dup = lin[first[np.argmax(counts > 1)]]
        hits = np.nonzero(lin == dup)[0]
        raise TensorFormatError(
            f"line {lines[hits[1]]}: duplicate coordinates (first seen on line {lines[hits[0]]})")
    return SparseTensor(c, np.asarray(values), dims)


def save_frostt(x: SparseTensor, path) -> None:
    with open(path, "w") as fh:
        fh.write("# " + " ".join(str(d) for d in x.dims) + "\n")
        for c, v in zip(x.coords + 1, x.values):
            fh.write(" ".join(str(int(i)) for i in c) + " " + repr(float(v)) + "\n")


def save_model(model: KruskalModel, path) -> None:
    """Text format: ``d R`` then the dims, then every factor row-major."""
    with open(path, "w") as fh:
        fh.write(f"{model.ndim} {model.rank}\n")
        fh.write(" ".join(str(i) for i in model.dims) + "\n")
        for f in model.factors:
            for row in f:
                fh.write(" ".join("%.17g" % v for v in row) + "\n")


def load_model(path) -> KruskalModel:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    try:
        d, rank = int(lines[0][0]), int(lines[0][1])
        dims = tuple(int(v) for v in lines[1])
    except (IndexError, ValueError):
        raise TensorFormatError(f"{path}: bad model header") from None
    if len(lines[0]) != 2 or len(dims) != d:
        raise TensorFormatError(f"{path}: header mismatch (d={d}, dims={dims})")
    body = lines[2:]
    if len(body) != sum(dims):
        raise TensorFormatError(f"{path}: expected {sum(dims)} factor rows, found {len(body)}")
    if any(len(r) != rank for r in body):
        raise TensorFormatError(f"{path}: every factor row needs {rank} values")
    data = np.array([[float(v) for v in r] for r in body]).reshape(-1)
    return KruskalModel(dims, rank, data)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic low-rank tensor.

    ``density`` is the target expected fraction of nonzero entries for
    Poisson data; ``boost_fraction`` of factor entries are multiplied by
    ``boost`` so a few entries dominate. ``noise_std`` applies to Gaussian data.
    """

    dims: tuple
    rank: int
    loss: str = "poisson"
    seed: int = 0
    density: float = 0.01
    boost: float = 10.0
    boost_fraction: float = 0.2
    noise_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if not self.dims or min(self.dims) < 1 or self.rank < 1:
            raise ConfigError("synthetic dims and rank must be positive")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError("density must lie in (0, 1]")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.boost < 1 or not 0 <= self.boost_fraction <= 1 or self.noise_std < 0:
            raise ConfigError("invalid boost or noise settings")


def _boosted_factors(spec: SyntheticSpec, rng: np.random.Generator) -> list[np.ndarray]:
    factors = []
    for n in spec.dims:
        f = rng.uniform(0.0, 1.0, (n, spec.rank))
        f[rng.uniform(size=f.shape) < spec.boost_fraction] *= spec.boost
        factors.append(f / f.sum(axis=0))
    weights = rng.uniform(0.5, 1.5, spec.rank)
    factors[0] = factors[0] * weights
    return factors


def generate_synthetic(spec: SyntheticSpec, guard: int = 10**8) -> tuple[SparseTensor, KruskalModel]:
    """Draw a sparse tensor from a random nonnegative low-rank model.

    Poisson: the model is scaled so that the expected number of nonzeros,
    ``sum(1 - exp(-m))``, equals ``density * M``; entries are Poisson with
    mean ``m``. Gaussian: entries are ``m + noise_std * N(0, 1)`` and only
    exact zeros are omitted. Returns the data and the generating model.
    """
    total = int(np.prod(spec.dims, dtype=np.float64))
    if total > guard:
        raise ConfigError(f"synthetic generation is dense; {total} entries exceed {guard}")
    rng = np.random.default_rng(spec.seed)
    factors = _boosted_factors(spec, rng)
    truth = KruskalModel.from_factors(factors)
    m = truth.full(guard)
    if spec.loss == "poisson":
        target = spec.density * total

        def excess(log_c):
            return float(-np.expm1(-np.exp(log_c) * m).sum()) - target

        reachable = float((m > 0).sum())
        if target >= reachable:
            raise ConfigError(f"density {spec.density} unreachable: only {int(reachable)} "
                              "entries have positive mean")
        lo, hi = -60.0, 60.0
        if excess(lo) > 0 or excess(hi) < 0:
            raise ConfigError(f"density {spec.density} unreachable for this model")
        scale = float(np.exp(brentq(excess, lo, hi, xtol=1e-12)))
        truth.data *= scale ** (1.0 / truth.ndim)
    return draw_from_model(truth, spec.loss, rng, noise_std=spec.noise_std, guard=guard), truth


def draw_from_model(model: KruskalModel, loss: str, rng: np.random.Generator, *,
                    noise_std: float = 1.0, guard: int = 10**8) -> SparseTensor:
    """Sample data entrywise around the model mean, dropping zeros."""
    m = model.full(guard)
    if loss == "poisson":
        if (m < 0).any():
            raise ConfigError("Poisson data needs a nonnegative model")
        dense = rng.poisson(m).astype(np.float64)
    else:
        dense = m + noise_std * rng.standard_normal(m.shape) if noise_std else m.copy()
    return SparseTensor.from_dense(dense)


def init_model(x: SparseTensor, rank: int, seed: int = 0) -> KruskalModel:
    """Uniform random start scaled so the model total matches the data total."""
    rng = np.random.default_rng(seed)
    model = KruskalModel.random(x.dims, rank, rng, 0.0, 1.0)
    target = float(np.abs(x.values).sum())
    current = model.total_sum()
    if target > 0 and current > 0:
        model.data *= (target / current) ** (1.0 / model.ndim)
    return model

