"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ConfigError
from .sampler import SCHEMES
from .tensor import SparseTensor

LAYOUTS = ("all-reduce", "two-sided")
METHODS = ("sync", "local-sgd", "fedadam")


def check_sparse_tensor(x, dims=None) -> SparseTensor:
    """Accept a :class:`SparseTensor`, a dense array or a ``(coords, values)`` pair."""
    if isinstance(x, SparseTensor):
        return x
    if isinstance(x, tuple) and len(x) == 2:
        coords, values = x
        coords = np.asarray(coords, dtype=np.int64)
        if dims is None:
            dims = tuple(int(v) + 1 for v in coords.max(axis=0))
        return SparseTensor(coords, values, dims)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < 2:
        raise ConfigError(f"tensor data must have at least 2 modes, got shape {arr.shape}")
    return SparseTensor.from_dense(arr)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_seed(seed) -> int:
    if seed is None:
        return 0
    return check_positive_int(seed, "seed", minimum=0)


def check_choice(value: str, choices, name: str) -> str:
    v = str(value).lower().replace("_", "-")
    if v not in choices:
        raise ConfigError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return v


def check_run_flags(*, sampling: str, fused: bool, method: str = "sync",
                    scheme: str = "all-reduce", workers: int = 1) -> None:
    """Reject flag combinations that cannot run, before any work starts."""
    sampling = check_choice(sampling, SCHEMES, "sampling")
    method = check_choice(method, METHODS, "method")
    scheme = check_choice(scheme, LAYOUTS, "scheme")
    check_positive_int(workers, "workers")
    if fused and sampling != "semi-stratified":
        raise ConfigError("--fused on requires --sampling semi-stratified")
    if fused and scheme == "two-sided":
        raise ConfigError("the two-sided scheme cannot use the fused kernel")
    if method != "sync" and scheme == "two-sided":
        raise ConfigError("federated methods exchange whole models; --scheme two-sided "
                          "applies only to --method sync")
