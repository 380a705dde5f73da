"""Slot-addressed coordinate draws shared by gradient and objective sampling.

Nonzero slot ``s`` reads draw 0 of substream ``"nz"``; zero slot ``s`` at
rejection attempt ``a`` reads draws ``a*d .. a*d+d-1`` of substream ``"z"``.
Semi-stratified zero samples are therefore the attempt-0 candidates of
stratified ones.
"""

from __future__ import annotations

import numpy as np

from .exceptions import SamplingError
from .rng import RngStream
from .tensor import SparseTensor


def draw_nonzero_positions(x: SparseTensor, rng: RngStream, slots: np.ndarray) -> np.ndarray:
    """Uniform positions (with replacement) into the stored entries of ``x``."""
    slots = np.asarray(slots, dtype=np.uint64)
    if slots.size == 0:
        return np.zeros(0, dtype=np.int64)
    if x.nnz == 0:
        raise SamplingError("cannot sample nonzeros from a tensor with no stored entries")
    return rng.substream("nz").integers(slots, 0, x.nnz)


def _candidates(stream: RngStream, slots: np.ndarray, attempt: int, dims) -> np.ndarray:
    d = len(dims)
    out = np.empty((slots.shape[0], d), dtype=np.int64)
    for k, size in enumerate(dims):
        out[:, k] = stream.integers(slots, attempt * d + k, size)
    return out


def draw_zero_coords(x: SparseTensor, rng: RngStream, slots: np.ndarray, *,
                     verify: bool, rejection_cap: int = 1000) -> np.ndarray:
    """Uniform coordinates for zero samples.

    With ``verify`` each slot repeats until its candidate is absent from
    ``x`` (needs an index on ``x``); without it the first candidate is kept.
    """
    slots = np.asarray(slots, dtype=np.uint64)
    d = x.ndim
    if slots.size == 0:
        return np.zeros((0, d), dtype=np.int64)
    stream = rng.substream("z")
    coords = _candidates(stream, slots, 0, x.dims)
    if not verify:
        return coords
    if x.nnz >= x.total_entries:
        raise SamplingError("zero samples requested but the tensor has no zero entries")
    pending = np.flatnonzero(x.contains(coords))
    attempt = 1
    while pending.size:
        if attempt >= rejection_cap:
            raise SamplingError(
                f"zero-sample slot {int(slots[pending[0]])} found no zero entry "
                f"after {rejection_cap} attempts"
            )
        cand = _candidates(stream, slots[pending], attempt, x.dims)
        coords[pending] = cand
        pending = pending[x.contains(cand)]
        attempt += 1
    return coords
