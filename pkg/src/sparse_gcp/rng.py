"""Counter-based random streams.

Every random number is a pure function of ``(seed, stream, slot, draw)``,
so a sample slot produces the same values no matter which worker, chunk or
code path evaluates it. Mixing is done with the SplitMix64 finalizer,
vectorized over ``uint64`` arrays.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_TWO_M53 = 1.0 / (1 << 53)


def _mix(z):
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _fold(*keys) -> int:
    h = np.array([0], dtype=np.uint64)
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(key.encode(), "little") & _MASK64
        h = _mix(h ^ np.uint64(int(key) & _MASK64))
    return int(h[0])


class RngStream:
    """Addressable stream of uniform variates.

    Parameters
    ----------
    seed : int
        64-bit user seed.
    stream_id : int
        64-bit stream address. Use :meth:`substream` to derive ids from
        structured keys such as ``("grad", iteration, worker)``.
    """

    __slots__ = ("seed", "stream_id", "_key")

    def __init__(self, seed: int = 0, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._key = np.uint64(_fold(self.seed, self.stream_id))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id:#x})"

    def __eq__(self, other):
        return (
            isinstance(other, RngStream)
            and self.seed == other.seed
            and self.stream_id == other.stream_id
        )

    def __hash__(self):
        return hash((self.seed, self.stream_id))

    def substream(self, *keys) -> "RngStream":
        """Derive a child stream; keys may be ints or short strings."""
        return RngStream(self.seed, _fold(self.stream_id, *keys))

    def bits(self, slots, draw: int) -> np.ndarray:
        slots = np.asarray(slots, dtype=np.uint64)
        with np.errstate(over="ignore"):
            h = _mix(self._key ^ _mix(slots * _GOLDEN))
            return _mix(h ^ np.uint64(int(draw) & _MASK64))

    def uniform(self, slots, draw: int) -> np.ndarray:
        """Uniform doubles in ``[0, 1)`` with 53 random bits, one per slot."""
        return (self.bits(slots, draw) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def integers(self, slots, draw: int, n: int) -> np.ndarray:
        """Integers in ``[0, n)``, one per slot."""
        if n <= 0:
            raise ValueError("n must be positive")
        out = np.floor(self.uniform(slots, draw) * n).astype(np.int64)
        np.minimum(out, n - 1, out=out)
        return out
