"""Scikit-learn style wrapper around the GCP solvers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .distsim import DistributedSimulator
from .exceptions import ConfigError
from .federated import FederatedConfig, run_federated
from .io import init_model
from .losses import LossFunction, exact_loss
from .optimizer import AdamState, EpochConfig, default_sample_counts, run_gcp_adam
from .sampler import SamplerConfig
from .tensor import KruskalModel
from .validation import check_positive_int, check_run_flags, check_seed, check_sparse_tensor


class GCPDecomposition(BaseEstimator):
    """Stochastic generalized CP decomposition of a sparse tensor.

    Parameters
    ----------
    rank : int
        Number of rank-one components.
    loss : {"poisson", "gaussian"}
    sampling : {"semi-stratified", "stratified"}
    fused : bool
        Use the fused sampling-MTTKRP kernel (semi-stratified only).
    gnzs, gzs, fnzs, fzs : int, optional
        Gradient and objective sample counts; defaults scale with nnz.
    epochs, epoch_iters, max_fails : int
        Annealing budget.
    rate, decay, beta1, beta2, eps : float
        Client Adam settings.
    method : {"sync", "local-sgd", "fedadam"}
    workers : int
        Simulated worker count.
    scheme : {"all-reduce", "two-sided"}
        Factor distribution for ``method="sync"``.
    downpour_iters, meta_rate
        Federated synchronization period (epochs) and server rate.
    seed : int
        Controls initialization and every sampled quantity.

    Attributes
    ----------
    model_ : KruskalModel
    factors_ : list of ndarray
    trace_ : list of TraceRecord
    ledger_ : CommLedger or None
        Communication counts when the distributed simulator was used.
    loss_ : float
        Exact objective of ``model_`` on the training tensor.
    """

    def __init__(self, rank=5, *, loss="poisson", sampling="semi-stratified", fused=False,
                 gnzs=None, gzs=None, fnzs=None, fzs=None, epochs=20, epoch_iters=100,
                 max_fails=3, rate=1e-3, decay=0.1, beta1=0.9, beta2=0.999, eps=1e-8,
                 method="sync", workers=1, scheme="all-reduce", downpour_iters=1,
                 meta_rate=None, seed=0, timing=False):
        self.rank = rank
        self.loss = loss
        self.sampling = sampling
        self.fused = fused
        self.gnzs = gnzs
        self.gzs = gzs
        self.fnzs = fnzs
        self.fzs = fzs
        self.epochs = epochs
        self.epoch_iters = epoch_iters
        self.max_fails = max_fails
        self.rate = rate
        self.decay = decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.method = method
        self.workers = workers
        self.scheme = scheme
        self.downpour_iters = downpour_iters
        self.meta_rate = meta_rate
        self.seed = seed
        self.timing = timing

    def _validate(self):
        check_positive_int(self.rank, "rank")
        check_run_flags(sampling=self.sampling, fused=bool(self.fused), method=self.method,
                        scheme=self.scheme, workers=self.workers)
        return check_seed(self.seed)

    def fit(self, X, y=None, init: KruskalModel | None = None):
        """Fit to a sparse tensor (``SparseTensor``, dense array or ``(coords, values)``)."""
        seed = self._validate()
        x = check_sparse_tensor(X)
        loss = LossFunction(self.loss)
        gnzs, gzs, fnzs, fzs = default_sample_counts(x, self.gnzs, self.gzs, self.fnzs, self.fzs)
        cfg = SamplerConfig(self.sampling, gnzs, gzs)
        epoch_cfg = EpochConfig(self.epochs, self.epoch_iters, self.max_fails)
        model0 = init if init is not None else init_model(x, self.rank, seed)
        if model0.dims != x.dims or model0.rank != self.rank:
            raise ConfigError("initial model does not match the tensor dims and rank")
        adam = dict(rate=self.rate, decay=self.decay, beta1=self.beta1, beta2=self.beta2,
                    eps=self.eps, lower_bound=loss.lower_bound)
        method = self.method.lower().replace("_", "-")
        self.ledger_ = None
        if method == "sync":
            topo = None
            if self.workers > 1 or self.scheme != "all-reduce":
                topo = DistributedSimulator(x, self.workers, scheme=self.scheme)
            state = AdamState.for_model(model0, **adam)
            model, trace = run_gcp_adam(x, model0, loss, cfg, epoch_cfg, topo, state=state,
                                        seed=seed, fused=bool(self.fused), fnz=fnzs, fz=fzs,
                                        timing=self.timing)
            if topo is not None:
                self.ledger_ = topo.ledger
        else:
            fed = FederatedConfig(tau=self.downpour_iters, meta_rate=self.meta_rate)
            model, trace = run_federated(x, model0, loss, cfg, epoch_cfg, fed, method=method,
                                         n_workers=self.workers, client_params=adam, seed=seed,
                                         fused=bool(self.fused), fnz=fnzs, fz=fzs,
                                         timing=self.timing)
        self.model_ = model
        self.factors_ = [f.copy() for f in model.factors]
        self.trace_ = trace
        self.n_iter_ = trace.info.iterations
        self.loss_ = exact_loss(x, model, loss)
        self.dims_ = x.dims
        return self

    def transform(self, X=None):
        """Return the fitted factor matrices (``X`` is only checked for shape)."""
        check_is_fitted(self, "model_")
        if X is not None and check_sparse_tensor(X).dims != self.dims_:
            raise ConfigError("tensor dims differ from the fitted dims")
        return [f.copy() for f in self.model_.factors]

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform()

    def predict(self, coords) -> np.ndarray:
        """Model values at 0-based multi-indices (rows of ``coords``)."""
        check_is_fitted(self, "model_")
        coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        if coords.shape[1] != self.model_.ndim:
            raise ConfigError(f"coords need {self.model_.ndim} columns")
        if (coords < 0).any() or (coords >= np.asarray(self.dims_)).any():
            raise IndexError("coordinates out of range")
        return self.model_.entries(coords)

    def score(self, X, y=None) -> float:
        """Negative exact objective (larger is better)."""
        check_is_fitted(self, "model_")
        x = check_sparse_tensor(X)
        return -exact_loss(x, self.model_, LossFunction(self.loss))
