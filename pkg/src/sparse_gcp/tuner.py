"""Latin hypercube hyperparameter studies with Spearman sensitivity reports."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc, rankdata

from .exceptions import ConfigError, GCPError
from .federated import FederatedConfig, run_federated
from .losses import exact_loss, get_loss
from .optimizer import AdamState, EpochConfig, run_gcp_adam
from .sampler import SamplerConfig
from .tensor import KruskalModel, SparseTensor

logger = logging.getLogger(__name__)

SCALES = ("linear", "log10", "int_log2")
APPLICABILITY = ("both", "fedadam_only")
STUDY_METHODS = ("gcp-sgd", "gcp-fedadam")


@dataclass(frozen=True)
class Param:
    """One uncertain parameter.

    ``log10`` stratifies in exponent space. ``int_log2`` stratifies in
    ``log2`` space and rounds the mapped value to the nearest integer.
    """

    name: str
    lower: float
    upper: float
    scale: str = "linear"
    applicability: str = "both"

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"{self.name}: unknown scale {self.scale!r}; choose from {SCALES}")
        if self.applicability not in APPLICABILITY:
            raise ConfigError(f"{self.name}: applicability must be one of {APPLICABILITY}")
        if not self.lower < self.upper:
            raise ConfigError(f"{self.name}: lower bound must be below upper bound")
        if self.scale != "linear" and self.lower <= 0:
            raise ConfigError(f"{self.name}: {self.scale} scale needs positive bounds")

    def from_unit(self, u):
        """Map unit-interval values to parameter values."""
        u = np.asarray(u, dtype=np.float64)
        if self.scale == "linear":
            return self.lower + u * (self.upper - self.lower)
        if self.scale == "log10":
            lo, hi = math.log10(self.lower), math.log10(self.upper)
            return 10.0 ** (lo + u * (hi - lo))
        lo, hi = math.log2(self.lower), math.log2(self.upper)
        return np.clip(np.rint(2.0 ** (lo + u * (hi - lo))), self.lower, self.upper)


class ParamSpace(list):
    """Ordered list of :class:`Param` with name lookup."""

    def __init__(self, params=()):
        super().__init__(params)
        names = [p.name for p in self]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in space")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self]

    def for_method(self, method: str) -> "ParamSpace":
        if method == "gcp-fedadam":
            return self
        return ParamSpace([p for p in self if p.applicability == "both"])


def default_space() -> ParamSpace:
    """Bounds of the initial study; power-of-ten ranges are log-scaled."""
    return ParamSpace([
        Param("rate", 10 ** -5.5, 10 ** -0.5, "log10"),
        Param("decay", 10 ** -3.5, 10 ** -0.5, "log10"),
        Param("adam-beta1", 0.0, 1.0, "linear"),
        Param("adam-beta2", 0.9, 0.99999, "linear"),
        Param("adam-eps", 1e-16, 1e-10, "log10"),
        Param("meta-rate", 10 ** -5.5, 10 ** -0.5, "log10", "fedadam_only"),
        Param("downpour-iterations", 1, 256, "int_log2", "fedadam_only"),
    ])


def parse_space_file(path) -> ParamSpace:
    """Read ``name: lower,upper,scale[,applicability]`` lines (``#`` comments)."""
    params = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if ":" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'name: lower,upper,scale'")
            name, rest = (s.strip() for s in text.split(":", 1))
            fields = [f.strip() for f in rest.split(",")]
            if len(fields) not in (3, 4):
                raise ConfigError(f"{path}:{lineno}: expected 3 or 4 comma-separated fields")
            try:
                lower, upper = float(fields[0]), float(fields[1])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bounds must be numbers") from None
            params.append(Param(name, lower, upper, *fields[2:]))
    if not params:
        raise ConfigError(f"{path}: no parameters")
    return ParamSpace(params)


@dataclass
class LhsDesign:
    """``values[i, j]`` is sample i of parameter j; ``strata`` the unit-cube cell."""

    names: list[str]
    unit: np.ndarray
    values: np.ndarray
    strata: np.ndarray
    seed: int | None

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def sample(self, i: int) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values[i])}


def lhs_generate(space: ParamSpace, s: int, seed=None) -> LhsDesign:
    """Latin hypercube design of ``s`` samples over ``space``.

    Each column of the unit design holds one point in each of the ``s``
    equal-width strata; the scale mapping is applied afterwards, so
    log-scaled parameters are stratified in exponent space.
    """
    if s < 1:
        raise ConfigError("LHS needs at least one sample")
    rng = np.random.default_rng(seed)
    unit = qmc.LatinHypercube(d=len(space), seed=rng).random(s)
    strata = np.minimum(np.floor(unit * s).astype(np.int64), s - 1)
    values = np.column_stack([p.from_unit(unit[:, j]) for j, p in enumerate(space)]) \
        if len(space) else np.zeros((s, 0))
    return LhsDesign(space.names, unit, values, strata, seed)


def spearman_rank_correlation(xs, ys) -> float | None:
    """Pearson correlation of average ranks.

    Returns ``None`` when either rank vector is constant (no signal).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-d sequences of equal length")
    if xs.size < 2:
        raise ValueError("rank correlation needs at least two observations")
    rx = rankdata(xs) - (xs.size + 1) / 2.0
    ry = rankdata(ys) - (ys.size + 1) / 2.0
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        return None
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


@dataclass
class StudyFixture:
    """Problem instance and run budget shared by every trial."""

    x: SparseTensor
    rank: int
    loss: str = "poisson"
    epochs: int = 5
    iters_per_epoch: int = 20
    p: int = 200
    q: int = 200
    fnz: int | None = None
    fz: int | None = None
    n_workers: int = 2
    scheme: str = "semi-stratified"


@dataclass
class Trial:
    stage: int
    sample: int
    start: int
    method: str
    params: dict
    seed: int
    loss: float = float("nan")
    elapsed_s: float = 0.0
    failed: bool = False
    error: str = ""
    rel_error: float = float("nan")


TrialFn = Callable[[StudyFixture, str, dict, KruskalModel, int], float]


def _split_params(params: dict):
    client = {}
    for key, attr in (("rate", "rate"), ("decay", "decay"), ("adam-beta1", "beta1"),
                      ("adam-beta2", "beta2"), ("adam-eps", "eps")):
        if key in params:
            client[attr] = float(params[key])
    fed = {}
    if "meta-rate" in params:
        fed["meta_rate"] = float(params["meta-rate"])
    if "downpour-iterations" in params:
        fed["tau"] = max(1, int(round(params["downpour-iterations"])))
    return client, fed


def run_trial(fixture: StudyFixture, method: str, params: dict, model0: KruskalModel,
              seed: int) -> float:
    """Fit with the given hyperparameters and return the exact final objective."""
    loss = get_loss(fixture.loss)
    cfg = SamplerConfig(fixture.scheme, fixture.p, fixture.q)
    epoch_cfg = EpochConfig(fixture.epochs, fixture.iters_per_epoch)
    client, fed = _split_params(params)
    if method == "gcp-sgd":
        state = AdamState.for_model(model0, lower_bound=loss.lower_bound, **client)
        model, _ = run_gcp_adam(fixture.x, model0, loss, cfg, epoch_cfg, state=state, seed=seed,
                                fnz=fixture.fnz, fz=fixture.fz, timing=False)
    elif method == "gcp-fedadam":
        model, _ = run_federated(fixture.x, model0, loss, cfg, epoch_cfg, FederatedConfig(**fed),
                                 method="fedadam", n_workers=fixture.n_workers,
                                 client_params=client, seed=seed, fnz=fixture.fnz,
                                 fz=fixture.fz, timing=False)
    else:
        raise ConfigError(f"unknown study method {method!r}")
    return exact_loss(fixture.x, model, loss)


def _derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class StudyReport:
    trials: list[Trial]
    stage_sizes: list[int]
    names: list[str]
    global_min: float
    failures: int
    # (stage, method, param) -> coefficient or None
    correlations: dict = field(default_factory=dict)

    def coefficient(self, stage: int, method: str, name: str):
        return self.correlations.get((stage, method, name))

    def write_trials_csv(self, path) -> None:
        cols = ["stage", "sample", "start", "method", "seed", *self.names,
                "loss", "rel_error", "elapsed_s", "failed"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for t in self.trials:
                w.writerow([t.stage, t.sample, t.start, t.method, t.seed,
                            *[repr(t.params[n]) if n in t.params else "" for n in self.names],
                            repr(t.loss), repr(t.rel_error), f"{t.elapsed_s:.6f}", int(t.failed)])

    def summary_rows(self) -> list[list[str]]:
        rows = []
        for (stage, method, name), rho in sorted(self.correlations.items()):
            rows.append([str(stage), method, name, "nan" if rho is None else f"{rho:.6f}"])
        return rows

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "method", "param", "spearman"])
            w.writerows(self.summary_rows())

    def summary_table(self) -> str:
        rows = [["stage", "method", "param", "spearman"], *self.summary_rows()]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def run_study(space: ParamSpace, fixture: StudyFixture, s0: int | None = None, n_starts: int = 1,
              stages: int = 2, *, seed: int = 0, methods=STUDY_METHODS,
              trial_fn: TrialFn | None = None, timing: bool = True) -> StudyReport:
    """Multi-stage LHS study; the sample count doubles every stage.

    Every LHS sample is run with each method from ``n_starts`` shared starting
    models. The tensor-sampling seed depends on (seed, stage, sample, start)
    and is shared by the methods. Failed runs are counted and excluded.
    Relative errors are taken against the minimum over all successful runs,
    and Spearman coefficients are computed per stage, method and parameter.
    """
    if stages < 1 or n_starts < 1:
        raise ConfigError("stages and starts must be at least 1")
    s0 = 2 * len(space) if s0 is None else int(s0)
    if s0 < 1:
        raise ConfigError("initial sample count must be positive")
    trial_fn = trial_fn or run_trial
    starts = []
    for j in range(n_starts):
        rng = np.random.default_rng(_derive_seed(seed, 1, j))
        starts.append(KruskalModel.random(fixture.x.dims, fixture.rank, rng, 0.0, 1.0))

    trials, sizes = [], []
    for stage in range(stages):
        s = s0 * 2 ** stage
        sizes.append(s)
        design = lhs_generate(space, s, seed=_derive_seed(seed, 2, stage))
        for i in range(s):
            params = design.sample(i)
            for j in range(n_starts):
                tseed = _derive_seed(seed, 3, stage, i, j)
                for method in methods:
                    used = {n: params[n] for n in space.for_method(method).names}
                    t = Trial(stage, i, j, method, used, tseed)
                    t0 = time.perf_counter()
                    try:
                        t.loss = float(trial_fn(fixture, method, used, starts[j], tseed))
                        if not np.isfinite(t.loss):
                            raise GCPError("non-finite final loss")
                    except (GCPError, ValueError, FloatingPointError) as exc:
                        t.failed, t.error = True, str(exc)
                        logger.warning("trial stage=%d sample=%d start=%d %s failed: %s",
                                       stage, i, j, method, exc)
                    t.elapsed_s = time.perf_counter() - t0 if timing else 0.0
                    trials.append(t)

    ok = [t for t in trials if not t.failed]
    gmin = min((t.loss for t in ok), default=float("nan"))
    denom = max(abs(gmin), 1e-12)
    for t in ok:
        t.rel_error = (t.loss - gmin) / denom
    report = StudyReport(trials, sizes, space.names, gmin, len(trials) - len(ok))
    for stage in range(stages):
        for method in methods:
            group = [t for t in ok if t.stage == stage and t.method == method]
            for name in space.for_method(method).names:
                if len(group) < 2:
                    report.correlations[(stage, method, name)] = None
                    continue
                report.correlations[(stage, method, name)] = spearman_rank_correlation(
                    [t.params[name] for t in group], [t.rel_error for t in group])
    return report
