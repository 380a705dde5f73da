"""Quick self-checks of the numerical kernels against brute-force references."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import khatri_rao

from .losses import LossFunction
from .optimizer import AdamState, adam_update
from .rng import RngStream
from .sampler import SamplerConfig, fused_sample_mttkrp, sample_semi_stratified
from .tensor import KruskalModel, SparseTensor, dense_gradient_oracle, mttkrp


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-k unfolding with the remaining modes in increasing order, row-major."""
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def brute_mttkrp(dense: np.ndarray, factors, mode: int) -> np.ndarray:
    """``X_(k) @ KR`` where the Khatri-Rao product matches :func:`unfold`."""
    others = [f for j, f in enumerate(factors) if j != mode]
    kr = others[0]
    for f in others[1:]:
        kr = khatri_rao(kr, f)
    return unfold(dense, mode) @ kr


def _fixture(dims, rank, seed, density=0.4):
    rng = np.random.default_rng(seed)
    dense = rng.poisson(1.0, dims) * (rng.uniform(size=dims) < density)
    if not dense.any():
        dense.flat[0] = 1.0
    model = KruskalModel.random(dims, rank, rng, 0.1, 1.0)
    return SparseTensor.from_dense(dense.astype(float)), model


def check_mttkrp(seed: int = 0) -> CheckResult:
    worst = 0.0
    for dims in ((4, 3, 2), (3, 3, 3, 2)):
        x, model = _fixture(dims, 3, seed)
        for k in range(len(dims)):
            ref = brute_mttkrp(x.to_dense(), model.factors, k)
            worst = max(worst, float(np.abs(mttkrp(x, model, k) - ref).max()))
    return CheckResult("mttkrp", worst <= 1e-12, f"max abs diff {worst:.3g}")


def check_fused(seed: int = 0) -> CheckResult:
    x, model = _fixture((5, 4, 3), 3, seed)
    loss = LossFunction("poisson")
    cfg = SamplerConfig("semi-stratified", 50, 50)
    rng = RngStream(seed).substream("check")
    fused = fused_sample_mttkrp(x, model, loss, cfg, rng, chunk_size=7)
    y = sample_semi_stratified(x, model, loss, cfg, rng)
    same = all(np.array_equal(f, mttkrp(y, model, k)) for k, f in enumerate(fused))
    return CheckResult("fused", same, "bitwise equal" if same else "outputs differ")


def check_gradient(seed: int = 0, reps: int = 2000) -> CheckResult:
    x, model = _fixture((5, 4, 3), 2, seed)
    loss = LossFunction("poisson")
    cfg = SamplerConfig("semi-stratified", 20, 20)
    root = RngStream(seed).substream("unbiased")
    acc = [np.zeros((i, model.rank)) for i in model.dims]
    for r in range(reps):
        y = sample_semi_stratified(x, model, loss, cfg, root.substream(r))
        for k in range(model.ndim):
            acc[k] += mttkrp(y, model, k)
    worst = 0.0
    for k in range(model.ndim):
        ref = dense_gradient_oracle(x, model, loss, k)
        worst = max(worst, float(np.linalg.norm(acc[k] / reps - ref) / np.linalg.norm(ref)))
    return CheckResult("gradient", worst < 0.05, f"max relative error {worst:.3g}")


def check_adam(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = KruskalModel.random((3, 2), 2, rng, -1.0, 1.0)
    state = AdamState.for_model(model, rate=0.01, lower_bound=-0.5)
    a = model.data.copy()
    b = np.zeros_like(a)
    c = np.zeros_like(a)
    worst = 0.0
    for t in range(1, 21):
        g = rng.standard_normal(a.size)
        adam_update(model, g, state)
        b = 0.9 * b + 0.1 * g
        c = 0.999 * c + 0.001 * g * g
        a = np.maximum(a - 0.01 * (b / (1 - 0.9 ** t)) / np.sqrt(c / (1 - 0.999 ** t) + 1e-8), -0.5)
        worst = max(worst, float(np.abs(model.data - a).max()))
    return CheckResult("adam", worst <= 1e-14, f"max abs diff {worst:.3g}")


def run_all(seed: int = 0) -> list[CheckResult]:
    return [check_mttkrp(seed), check_fused(seed), check_gradient(seed), check_adam(seed)]
