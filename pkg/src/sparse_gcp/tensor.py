"""Sparse coordinate tensors, Kruskal models and MTTKRP."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .exceptions import OracleGuardError, TensorFormatError

DENSE_GUARD = 10**6
_INT64_MAX = 2**63 - 1


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(i) for i in dims)
    if not dims:
        raise TensorFormatError("a tensor needs at least one mode")
    if any(i < 1 for i in dims):
        raise TensorFormatError(f"dimensions must be positive, got {dims}")
    total = math.prod(dims)
    if total > _INT64_MAX:
        raise TensorFormatError(
            f"total entry count {total} of dims {dims} overflows a 64-bit index"
        )
    return dims


def linear_index(coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Row-major linear index; ordering matches lexicographic coordinate order."""
    coords = np.asarray(coords, dtype=np.int64)
    lin = np.zeros(coords.shape[0], dtype=np.int64)
    for k, size in enumerate(dims):
        lin *= size
        lin += coords[:, k]
    return lin


def unravel(lin: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    return np.stack(np.unravel_index(np.asarray(lin, dtype=np.int64), dims), axis=1)


class SparseTensor:
    """Coordinate-format d-way tensor with 0-based indices.

    Parameters
    ----------
    coords : array_like of int, shape (N, d)
    values : array_like of float, shape (N,)
    dims : sequence of int
        Mode sizes ``I_1..I_d``.

    Notes
    -----
    Duplicate coordinates are not rejected here (that costs a sort); they are
    rejected by :meth:`build_index` and by the file loader.
    """

    def __init__(self, coords, values, dims):
        self.dims = _check_dims(dims)
        d = len(self.dims)
        coords = np.asarray(coords, dtype=np.int64)
        if coords.size == 0:
            coords = coords.reshape(0, d)
        if coords.ndim != 2 or coords.shape[1] != d:
            raise TensorFormatError(
                f"coords must have shape (N, {d}), got {coords.shape}"
            )
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != coords.shape[0]:
            raise TensorFormatError(
                f"{coords.shape[0]} coordinates but {values.shape[0]} values"
            )
        if coords.size and (
            (coords < 0).any() or (coords >= np.asarray(self.dims)).any()
        ):
            bad = int(np.flatnonzero(
                ((coords < 0) | (coords >= np.asarray(self.dims))).any(axis=1)
            )[0])
            raise TensorFormatError(
                f"entry {bad} has coordinates {tuple(coords[bad])} outside dims {self.dims}"
            )
        if not np.isfinite(values).all():
            raise TensorFormatError("stored values must be finite")
        self.coords = coords
        self.values = values
        self.index_mode: str | None = None
        self._sorted_lin: np.ndarray | None = None
        self._table: dict[int, int] | None = None

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def nnz(self) -> int:
        return self.values.shape[0]

    @property
    def total_entries(self) -> int:
        return math.prod(self.dims)

    def __repr__(self):
        shape = "x".join(map(str, self.dims))
        return f"SparseTensor({shape}, nnz={self.nnz}, index={self.index_mode})"

    def copy(self) -> "SparseTensor":
        out = SparseTensor(self.coords.copy(), self.values.copy(), self.dims)
        out.index_mode = self.index_mode
        out._sorted_lin = self._sorted_lin
        out._table = self._table
        return out

    def equals(self, other: "SparseTensor") -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.values, other.values)
        )

    # -- nonzero search ------------------------------------------------

    def build_index(self, mode: str = "sorted") -> "SparseTensor":
        """Return a copy carrying a membership index.

        ``"sorted"`` reorders the entries lexicographically (stable, so an
        already-sorted tensor keeps its order) and answers queries by binary
        search. ``"hashmap"`` keeps the entry order and uses a dict keyed by
        linear index.
        """
        lin = linear_index(self.coords, self.dims)
        if mode == "sorted":
            order = np.argsort(lin, kind="stable")
            lin_sorted = lin[order]
            dup = np.flatnonzero(lin_sorted[1:] == lin_sorted[:-1])
            if dup.size:
                c = unravel(lin_sorted[dup[:1]], self.dims)[0]
                raise TensorFormatError(f"duplicate coordinate {tuple(int(i) for i in c)}")
            out = SparseTensor(self.coords[order], self.values[order], self.dims)
            out._sorted_lin = lin_sorted
        elif mode == "hashmap":
            table = {}
            for pos, key in enumerate(lin.tolist()):
                if key in table:
                    c = unravel(np.array([key]), self.dims)[0]
                    raise TensorFormatError(f"duplicate coordinate {tuple(int(i) for i in c)}")
                table[key] = pos
            out = SparseTensor(self.coords, self.values, self.dims)
            out._table = table
        else:
            raise ValueError(f"unknown index mode {mode!r}")
        out.index_mode = mode
        return out

    def contains(self, coords) -> np.ndarray:
        """Boolean membership of each coordinate row among the stored entries."""
        if self.index_mode is None:
            raise TensorFormatError("tensor has no nonzero index; call build_index()")
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.ndim)
        lin = linear_index(coords, self.dims)
        if self.index_mode == "sorted":
            pos = np.searchsorted(self._sorted_lin, lin)
            pos_c = np.minimum(pos, max(self.nnz - 1, 0))
            if self.nnz == 0:
                return np.zeros(lin.shape[0], dtype=bool)
            return self._sorted_lin[pos_c] == lin
        table = self._table
        return np.fromiter((k in table for k in lin.tolist()), dtype=bool, count=lin.shape[0])

    # -- dense conversion -----------------------------------------------

    def to_dense(self, guard: int = DENSE_GUARD) -> np.ndarray:
        if self.total_entries > guard:
            raise OracleGuardError(
                f"refusing to densify {self.total_entries} entries (guard {guard})"
            )
        out = np.zeros(self.dims)
        out[tuple(self.coords.T)] = self.values
        return out

    @classmethod
    def from_dense(cls, array) -> "SparseTensor":
        array = np.asarray(array, dtype=np.float64)
        coords = np.argwhere(array != 0)
        return cls(coords, array[tuple(coords.T)], array.shape)


def build_nnz_index(x: SparseTensor, mode: str = "sorted") -> SparseTensor:
    return x.build_index(mode)


class SampledGradientTensor:
    """Stochastic gradient tensor: exactly ``p + q`` weighted entries.

    Nonzero samples come first (in slot order), then zero samples.
    Duplicate coordinates are allowed.
    """

    def __init__(self, coords, values, dims, p: int, q: int):
        self.dims = tuple(int(i) for i in dims)
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(self.dims))
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        self.p = int(p)
        self.q = int(q)
        if self.coords.shape[0] != self.p + self.q or self.values.shape[0] != self.p + self.q:
            raise ValueError(
                f"sampled tensor must hold p+q={self.p + self.q} entries, "
                f"got {self.coords.shape[0]}"
            )

    @property
    def nnz(self) -> int:
        return self.values.shape[0]

    def __repr__(self):
        return f"SampledGradientTensor(dims={self.dims}, p={self.p}, q={self.q})"


class KruskalModel:
    """Rank-R CP model stored in one contiguous coefficient array.

    ``factors[k]`` is a writable ``(I_k, R)`` view into ``data`` starting at
    ``offsets[k]``; the views tile ``data`` exactly.
    """

    def __init__(self, dims, rank: int, data=None):
        self.dims = _check_dims(dims)
        rank = int(rank)
        if rank < 1:
            raise ValueError(f"rank must be positive, got {rank}")
        self.rank = rank
        sizes = [i * rank for i in self.dims]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        n = int(self.offsets[-1])
        if data is None:
            data = np.zeros(n)
        else:
            data = np.ascontiguousarray(data, dtype=np.float64).reshape(-1)
            if data.shape[0] != n:
                raise ValueError(f"expected {n} coefficients, got {data.shape[0]}")
        self.data = data
        self.factors = [
            self.data[self.offsets[k]:self.offsets[k + 1]].reshape(i, rank)
            for k, i in enumerate(self.dims)
        ]

    @classmethod
    def from_factors(cls, factors) -> "KruskalModel":
        factors = [np.asarray(f, dtype=np.float64) for f in factors]
        if not factors or any(f.ndim != 2 for f in factors):
            raise ValueError("factors must be a non-empty list of matrices")
        rank = factors[0].shape[1]
        if any(f.shape[1] != rank for f in factors):
            raise ValueError("all factor matrices need the same number of columns")
        data = np.concatenate([f.reshape(-1) for f in factors])
        return cls([f.shape[0] for f in factors], rank, data)

    @classmethod
    def random(cls, dims, rank: int, rng: np.random.Generator, low=0.0, high=1.0):
        model = cls(dims, rank)
        model.data[:] = rng.uniform(low, high, model.data.shape[0])
        return model

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def copy(self) -> "KruskalModel":
        return KruskalModel(self.dims, self.rank, self.data.copy())

    def __repr__(self):
        shape = "x".join(map(str, self.dims))
        return f"KruskalModel({shape}, rank={self.rank})"

    def check_finite(self):
        if not np.isfinite(self.data).all():
            raise FloatingPointError("model has non-finite coefficients")

    def view_of(self, mode: int, row: int, col: int) -> int:
        """Flat offset of coefficient ``A^(mode)[row, col]``."""
        return int(self.offsets[mode]) + row * self.rank + col

    def flat(self, matrices) -> np.ndarray:
        """Pack a list of factor-shaped matrices into this model's layout."""
        if isinstance(matrices, np.ndarray) and matrices.ndim == 1:
            if matrices.shape[0] != self.size:
                raise ValueError("flat array length does not match the model")
            return matrices
        if len(matrices) != self.ndim:
            raise ValueError(f"expected {self.ndim} matrices, got {len(matrices)}")
        for k, g in enumerate(matrices):
            if np.shape(g) != (self.dims[k], self.rank):
                raise ValueError(
                    f"mode {k} matrix has shape {np.shape(g)}, "
                    f"expected {(self.dims[k], self.rank)}"
                )
        return np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1) for g in matrices])

    def unflat(self, flat: np.ndarray) -> list[np.ndarray]:
        return [
            flat[self.offsets[k]:self.offsets[k + 1]].reshape(i, self.rank)
            for k, i in enumerate(self.dims)
        ]

    def full(self, guard: int = DENSE_GUARD) -> np.ndarray:
        """Dense model tensor (test oracle; guarded)."""
        if math.prod(self.dims) > guard:
            raise OracleGuardError(
                f"refusing to densify {math.prod(self.dims)} entries (guard {guard})"
            )
        letters = "abcdefghijklmnopqrstuvwxyz"[: self.ndim]
        spec = ",".join(f"{c}z" for c in letters) + "->" + letters
        return np.einsum(spec, *self.factors)

    def entries(self, coords) -> np.ndarray:
        """Vectorized model entries at coordinate rows."""
        return model_values(gather_rows(self, coords))

    def total_sum(self) -> float:
        """Sum of all model entries, without densifying."""
        prod = np.ones(self.rank)
        for f in self.factors:
            prod = prod * f.sum(axis=0)
        return float(prod.sum())


# -- shared kernels --------------------------------------------------------
# Sampler, fused kernel and MTTKRP all go through these helpers so the
# floating-point operation order is identical on every path.


def gather_rows(model: KruskalModel, coords: np.ndarray) -> list[np.ndarray]:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, model.ndim)
    return [model.factors[k][coords[:, k]] for k in range(model.ndim)]


def model_values(rows: list[np.ndarray]) -> np.ndarray:
    prod = rows[0].copy()
    for r in rows[1:]:
        prod *= r
    return prod.sum(axis=1)


def leave_one_out(rows: list[np.ndarray], mode: int) -> np.ndarray:
    others = [r for k, r in enumerate(rows) if k != mode]
    if not others:
        return np.ones_like(rows[mode])
    prod = others[0].copy()
    for r in others[1:]:
        prod *= r
    return prod


def accumulate_mttkrp(out: np.ndarray, rows_k: np.ndarray, values: np.ndarray, loo: np.ndarray):
    np.add.at(out, rows_k, values[:, None] * loo)


def model_entry(model: KruskalModel, coords) -> float:
    """Single model entry ``sum_j prod_k A^(k)[i_k, j]``."""
    coords = tuple(int(c) for c in coords)
    if len(coords) != model.ndim:
        raise IndexError(f"expected {model.ndim} coordinates, got {len(coords)}")
    for k, (c, size) in enumerate(zip(coords, model.dims)):
        if not 0 <= c < size:
            raise IndexError(f"coordinate {c} out of range for mode {k} of size {size}")
    return float(model.entries(np.array([coords]))[0])


def mttkrp(src, model: KruskalModel, mode: int) -> np.ndarray:
    """Sparse MTTKRP ``G = Y_(k) Z_k^T`` over the entries of ``src``.

    Contributions are accumulated in entry-list order.
    """
    if not 0 <= mode < model.ndim:
        raise ValueError(f"mode {mode} out of range for a {model.ndim}-way model")
    if tuple(src.dims) != model.dims:
        raise ValueError(f"tensor dims {tuple(src.dims)} do not match model dims {model.dims}")
    out = np.zeros((model.dims[mode], model.rank))
    if src.nnz == 0:
        return out
    rows = gather_rows(model, src.coords)
    accumulate_mttkrp(out, src.coords[:, mode], src.values, leave_one_out(rows, mode))
    return out


def dense_gradient_oracle(x: SparseTensor, model: KruskalModel, loss, mode: int,
                          guard: int = DENSE_GUARD) -> np.ndarray:
    """Exact mode-k gradient: materializes ``df/dm`` at every entry, then MTTKRP."""
    if x.total_entries > guard:
        raise OracleGuardError(
            f"dense gradient needs {x.total_entries} entries (guard {guard})"
        )
    dense_x = x.to_dense(guard)
    coords = np.argwhere(np.ones(x.dims, dtype=bool))
    m = model.full(guard)[tuple(coords.T)]
    y = loss.deriv(dense_x[tuple(coords.T)], m)
    full_y = SampledGradientTensor(coords, y, x.dims, coords.shape[0], 0)
    return mttkrp(full_y, model, mode)
