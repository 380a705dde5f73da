"""In-process simulation of medium-grained distributed GCP.

Workers sit on a d-way processor grid; worker ``w`` owns one tensor block.
Factor matrices are laid out either with the *all-reduce* scheme (mode-k rows
of a block replicated over its slice communicator, gradients summed with an
all-reduce) or the *two-sided* scheme (every row owned once; workers import
the rows their samples touch and export partial gradient rows to owners).

Everything is deterministic: the message bus delivers per destination in
(sender rank, sequence number) order and every reduction runs in rank order.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, SimulationError
from .losses import LossFunction
from .optimizer import sum_in_order
from .rng import RngStream
from .sampler import SampleDraw, SamplerConfig, draw_samples, zero_weight
from .tensor import KruskalModel, SampledGradientTensor, SparseTensor, mttkrp

SCHEMES = ("all-reduce", "two-sided")
LEDGER_COLUMNS = ("iter", "mode", "scalars_reduced", "rows_imported", "rows_exported", "setup_msgs")


def split_points(size: int, parts: int) -> tuple[int, ...]:
    """Near-uniform contiguous split of ``[0, size)``; the first ``size % parts``
    pieces get one extra element."""
    base, extra = divmod(size, parts)
    pts = [0]
    for i in range(parts):
        pts.append(pts[-1] + base + (1 if i < extra else 0))
    return tuple(pts)


@dataclass(frozen=True)
class ProcessorGrid:
    counts: tuple[int, ...]
    dims: tuple[int, ...]
    boundaries: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        dims = tuple(int(i) for i in self.dims)
        if len(counts) != len(dims):
            raise ConfigError(f"grid {counts} does not match a {len(dims)}-way tensor")
        if any(c < 1 for c in counts):
            raise ConfigError(f"grid counts must be positive, got {counts}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "boundaries",
                           tuple(split_points(i, c) for i, c in zip(dims, counts)))

    @property
    def n_workers(self) -> int:
        return math.prod(self.counts)

    def coords_of(self, rank: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(rank, self.counts))

    def rank_of(self, grid_coords) -> int:
        return int(np.ravel_multi_index(tuple(grid_coords), self.counts))

    def block_range(self, rank: int, mode: int) -> tuple[int, int]:
        g = self.coords_of(rank)[mode]
        b = self.boundaries[mode]
        return b[g], b[g + 1]

    def block_of_coords(self, coords: np.ndarray) -> np.ndarray:
        """Owning worker rank of each coordinate row."""
        coords = np.asarray(coords, dtype=np.int64)
        g = [np.searchsorted(np.asarray(b[1:-1]), coords[:, k], side="right")
             for k, b in enumerate(self.boundaries)]
        if coords.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return np.ravel_multi_index(tuple(g), self.counts).astype(np.int64)

    def slice_members(self, mode: int, block: int) -> list[int]:
        """Ranks whose grid index in ``mode`` equals ``block`` (rank order)."""
        return [r for r in range(self.n_workers) if self.coords_of(r)[mode] == block]

    def fiber_members(self, rank: int, mode: int) -> list[int]:
        g = self.coords_of(rank)
        return [r for r in range(self.n_workers)
                if all(c == g[k] for k, c in enumerate(self.coords_of(r)) if k != mode)]


def grid_storage(counts, dims) -> int:
    """Total replicated factor storage (in rows) under the all-reduce scheme."""
    p = math.prod(counts)
    return sum(i * (p // n) for i, n in zip(dims, counts))


def _divisor_tuples(p: int, d: int):
    divisors = [k for k in range(1, p + 1) if p % k == 0]
    for tup in itertools.product(divisors, repeat=d):
        if math.prod(tup) == p:
            yield tup


def grid_factorization(n_workers: int, dims) -> ProcessorGrid:
    """Processor grid minimizing all-reduce factor storage.

    Enumerates every ordered tuple of divisors of ``n_workers`` whose product
    is ``n_workers``; ties go to the lexicographically smallest tuple.
    """
    if n_workers < 1:
        raise ConfigError("worker count must be at least 1")
    dims = tuple(int(i) for i in dims)
    best = min(_divisor_tuples(n_workers, len(dims)), key=lambda t: (grid_storage(t, dims), t))
    return ProcessorGrid(best, dims)


@dataclass
class TensorBlock:
    rank: int
    offsets: tuple[int, ...]
    dims: tuple[int, ...]
    tensor: SparseTensor | None
    global_ids: np.ndarray

    @property
    def nnz(self) -> int:
        return 0 if self.tensor is None else self.tensor.nnz

    @property
    def total_entries(self) -> int:
        return math.prod(self.dims)

    def globalized(self) -> tuple[np.ndarray, np.ndarray]:
        if self.tensor is None:
            return np.zeros((0, len(self.dims)), dtype=np.int64), np.zeros(0)
        return self.tensor.coords + np.asarray(self.offsets), self.tensor.values


def partition_tensor(x: SparseTensor, grid: ProcessorGrid) -> list[TensorBlock]:
    """Split ``x`` into per-worker blocks with block-local coordinates.

    Entry order within a block follows the order in ``x``. A block with zero
    extent in some mode has ``tensor=None``.
    """
    if grid.dims != x.dims:
        raise ConfigError(f"grid dims {grid.dims} do not match tensor dims {x.dims}")
    owner = grid.block_of_coords(x.coords)
    blocks = []
    for r in range(grid.n_workers):
        ids = np.flatnonzero(owner == r)
        ranges = [grid.block_range(r, k) for k in range(x.ndim)]
        offsets = tuple(lo for lo, _ in ranges)
        dims = tuple(hi - lo for lo, hi in ranges)
        tensor = None
        if all(i > 0 for i in dims):
            tensor = SparseTensor(x.coords[ids] - np.asarray(offsets), x.values[ids], dims)
            if x.index_mode is not None:
                tensor = tensor.build_index(x.index_mode)
        blocks.append(TensorBlock(r, offsets, dims, tensor, ids))
    return blocks


def allocate_samples(p: int, q: int, n_workers: int) -> list[tuple[int, int]]:
    """Spread ``p`` and ``q`` over workers; remainders go to the lowest ranks."""
    if n_workers < 1:
        raise ConfigError("worker count must be at least 1")

    def spread(total):
        base, extra = divmod(int(total), n_workers)
        return [base + (1 if w < extra else 0) for w in range(n_workers)]

    return list(zip(spread(p), spread(q)))


def slot_ranges(counts: list[int]) -> list[np.ndarray]:
    starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return [np.arange(starts[w], starts[w + 1]) for w in range(len(counts))]


@dataclass
class LedgerRow:
    iter: int
    mode: int
    scalars_reduced: int = 0
    rows_imported: int = 0
    rows_exported: int = 0
    setup_msgs: int = 0


class CommLedger:
    """Per-(iteration, mode) communication counters."""

    def __init__(self):
        self._rows: dict[tuple[int, int], LedgerRow] = {}

    def record(self, iteration: int, mode: int, *, scalars: int = 0, imported: int = 0,
               exported: int = 0, setup: int = 0) -> None:
        if min(scalars, imported, exported, setup) < 0:
            raise SimulationError("ledger increments must be nonnegative")
        row = self._rows.setdefault((iteration, mode), LedgerRow(iteration, mode))
        row.scalars_reduced += scalars
        row.rows_imported += imported
        row.rows_exported += exported
        row.setup_msgs += setup

    @property
    def rows(self) -> list[LedgerRow]:
        return [self._rows[k] for k in sorted(self._rows)]

    def totals(self) -> dict[str, int]:
        out = dict.fromkeys(LEDGER_COLUMNS[2:], 0)
        for r in self._rows.values():
            for c in out:
                out[c] += getattr(r, c)
        return out

    def per_iteration(self, column: str) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for r in self._rows.values():
            out[r.iter] += getattr(r, column)
        return dict(out)

    def __len__(self):
        return len(self._rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LEDGER_COLUMNS)
            for r in self.rows:
                w.writerow([getattr(r, c) for c in LEDGER_COLUMNS])


class MessageBus:
    """Deterministic in-process point-to-point transport."""

    def __init__(self):
        self._queues: dict[int, list] = defaultdict(list)
        self._seq: dict[int, int] = defaultdict(int)
        self.sent = 0

    def send(self, src: int, dst: int, tag, payload) -> None:
        seq = self._seq[src]
        self._seq[src] += 1
        self._queues[dst].append((src, seq, tag, payload))
        self.sent += 1

    def deliver(self, dst: int, tag=None) -> list[tuple[int, object]]:
        """Pop messages for ``dst`` (optionally one tag), ordered by (sender, seq)."""
        queue = self._queues[dst]
        take = [m for m in queue if tag is None or m[2] == tag]
        self._queues[dst] = [m for m in queue if not (tag is None or m[2] == tag)]
        take.sort(key=lambda m: (m[0], m[1]))
        return [(src, payload) for src, _, _, payload in take]

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())


class WorkerTopology:
    """Grid plus factor-row ownership for one distribution scheme."""

    def __init__(self, grid: ProcessorGrid, scheme: str = "all-reduce"):
        scheme = scheme.lower().replace("_", "-")
        if scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
        self.grid = grid
        self.scheme = scheme
        self.n_workers = grid.n_workers
        self.row_owner = [self._two_sided_owners(k) for k in range(len(grid.dims))]

    def _two_sided_owners(self, mode: int) -> np.ndarray:
        owner = np.full(self.grid.dims[mode], -1, dtype=np.int64)
        b = self.grid.boundaries[mode]
        for blk in range(self.grid.counts[mode]):
            members = self.grid.slice_members(mode, blk)
            pts = split_points(b[blk + 1] - b[blk], len(members))
            for j, r in enumerate(members):
                owner[b[blk] + pts[j]:b[blk] + pts[j + 1]] = r
        return owner

    def owned_rows(self, rank: int, mode: int) -> np.ndarray:
        """Rows of factor ``mode`` held by ``rank`` under this scheme."""
        if self.scheme == "all-reduce":
            lo, hi = self.grid.block_range(rank, mode)
            return np.arange(lo, hi)
        return np.flatnonzero(self.row_owner[mode] == rank)

    def local_table(self, model: KruskalModel, rank: int) -> KruskalModel:
        """Copy of ``model`` with only the rows ``rank`` holds; the rest are NaN."""
        table = KruskalModel(model.dims, model.rank, np.full(model.size, np.nan))
        for k in range(model.ndim):
            rows = self.owned_rows(rank, k)
            table.factors[k][rows] = model.factors[k][rows]
        return table


def allreduce_gradient(topology: WorkerTopology, partials, mode: int,
                       ledger: CommLedger | None = None, iteration: int = 0) -> list[np.ndarray]:
    """Sum block-row partial gradients over each slice communicator.

    ``partials[w]`` holds worker ``w``'s mode-``mode`` contribution for the
    rows of its block. Every member gets the same summed array. Each member
    of a slice with more than one worker adds one dense block to the volume.
    """
    if topology.scheme != "all-reduce":
        raise ConfigError("allreduce_gradient requires the all-reduce scheme")
    grid = topology.grid
    if len(partials) != grid.n_workers:
        raise SimulationError(f"expected {grid.n_workers} partial gradients, got {len(partials)}")
    out: list = [None] * grid.n_workers
    volume = 0
    for blk in range(grid.counts[mode]):
        members = grid.slice_members(mode, blk)
        total = sum_in_order([partials[w] for w in members])
        if len(members) > 1:
            volume += len(members) * total.size
        for w in members:
            out[w] = total.copy()
    if ledger is not None:
        ledger.record(iteration, mode, scalars=volume)
    return out


def two_sided_import(topology: WorkerTopology, model: KruskalModel, worker_coords,
                     ledger: CommLedger | None = None, iteration: int = 0,
                     bus: MessageBus | None = None) -> list[KruskalModel]:
    """Fetch the off-worker factor rows each worker's samples touch.

    Each worker sends one request per (owner, mode) with a nonempty row set
    (counted as setup); owners reply with the row values. Returns per-worker
    local tables holding owned plus imported rows, NaN elsewhere.
    """
    if topology.scheme != "two-sided":
        raise ConfigError("two_sided_import requires the two-sided scheme")
    bus = bus or MessageBus()
    d = model.ndim
    for w, coords in enumerate(worker_coords):
        for k in range(d):
            need = np.unique(coords[:, k])
            owners = topology.row_owner[k][need]
            if (owners < 0).any():
                raise SimulationError(f"mode {k} row {int(need[owners < 0][0])} has no owner")
            dests = np.unique(owners[owners != w]).tolist()
            for o in dests:
                bus.send(w, o, ("req", k), need[owners == o])
            if ledger is not None:
                ledger.record(iteration, k, setup=len(dests))
    for o in range(topology.n_workers):
        for k in range(d):
            for src, rows in bus.deliver(o, ("req", k)):
                if (topology.row_owner[k][rows] != o).any():
                    raise SimulationError(f"worker {o} asked for mode {k} rows it does not own")
                bus.send(o, src, ("rows", k), (rows, model.factors[k][rows].copy()))
    tables = []
    for w in range(topology.n_workers):
        table = topology.local_table(model, w)
        for k in range(d):
            count = 0
            for _, (rows, vals) in bus.deliver(w, ("rows", k)):
                table.factors[k][rows] = vals
                count += rows.size
            if ledger is not None:
                ledger.record(iteration, k, imported=count)
        tables.append(table)
    return tables


def two_sided_exchange(topology: WorkerTopology, tables, worker_samples, mode: int,
                       ledger: CommLedger | None = None, iteration: int = 0,
                       bus: MessageBus | None = None) -> np.ndarray:
    """Local MTTKRP, export of non-owned partial rows, owner-side reduction.

    Owners add contributions in sender-rank order (their own included at
    their rank position). Returns the globalized ``(I_k, R)`` gradient.
    """
    if topology.scheme != "two-sided":
        raise ConfigError("two_sided_exchange requires the two-sided scheme")
    bus = bus or MessageBus()
    owner_of = topology.row_owner[mode]
    dims = tables[0].dims
    rank = tables[0].rank
    local: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for w, samples in enumerate(worker_samples):
        partial = mttkrp(samples, tables[w], mode)
        touched = np.unique(samples.coords[:, mode])
        if not np.isfinite(partial[touched]).all():
            raise SimulationError(f"worker {w} used a factor row it neither owns nor imported")
        owners = owner_of[touched]
        mine = touched[owners == w]
        local[w] = (mine, partial[mine])
        exported = 0
        dests = np.unique(owners[owners != w]).tolist()
        for o in dests:
            rows = touched[owners == o]
            bus.send(w, o, ("export", mode), (rows, partial[rows]))
            exported += rows.size
        if ledger is not None:
            ledger.record(iteration, mode, exported=int(exported), setup=len(dests))
    out = np.zeros((dims[mode], rank))
    for o in range(topology.n_workers):
        incoming = dict(bus.deliver(o, ("export", mode)))
        acc: dict[int, np.ndarray] = {}
        for src in range(topology.n_workers):
            if src == o:
                rows, vals = local[o]
            elif src in incoming:
                rows, vals = incoming[src]
            else:
                continue
            for r, v in zip(rows.tolist(), vals):
                if r in acc:
                    acc[r] = acc[r] + v
                else:
                    acc[r] = v.copy()
        for r, v in acc.items():
            out[r] = v
    return out


class DistributedSimulator:
    """Synchronous gradient computation on a simulated processor grid.

    Parameters
    ----------
    x : SparseTensor
        Global data tensor.
    n_workers : int, optional
        Worker count; the grid comes from :func:`grid_factorization`.
    grid : ProcessorGrid, optional
        Explicit grid (overrides ``n_workers``).
    scheme : {"all-reduce", "two-sided"}
    sample_layout : {"global", "local"}
        ``"global"``: sample slots are numbered globally, worker ``w``
        generates its allocated slot range and routes each sample to the
        block owner, so the sample set (and the trajectory, up to summation
        order) does not depend on the worker count. ``"local"``: each worker
        samples only its own block with per-block weights.
    """

    def __init__(self, x: SparseTensor, n_workers: int = 1, *, grid: ProcessorGrid | None = None,
                 scheme: str = "all-reduce", sample_layout: str = "global"):
        self.grid = grid or grid_factorization(n_workers, x.dims)
        self.topology = WorkerTopology(self.grid, scheme)
        if sample_layout not in ("global", "local"):
            raise ConfigError(f"unknown sample layout {sample_layout!r}")
        self.sample_layout = sample_layout
        self.blocks = partition_tensor(x, self.grid)
        self.ledger = CommLedger()
        self.bus = MessageBus()

    @property
    def n_workers(self) -> int:
        return self.grid.n_workers

    @property
    def scheme(self) -> str:
        return self.topology.scheme

    # -- sampling --------------------------------------------------------

    def _routed_draws(self, x, cfg, rng) -> list[SampleDraw]:
        alloc = allocate_samples(cfg.p, cfg.q, self.n_workers)
        nz_slots = slot_ranges([a for a, _ in alloc])
        z_slots = slot_ranges([b for _, b in alloc])
        for w in range(self.n_workers):
            draw = draw_samples(x, cfg, rng, nonzero_slots=nz_slots[w], zero_slots=z_slots[w])
            owner = self.grid.block_of_coords(draw.coords)
            kind = np.arange(draw.coords.shape[0]) >= draw.n_nonzero
            for dst in np.unique(owner).tolist():
                for tag in (0, 1):
                    sel = (owner == dst) & (kind == bool(tag))
                    if sel.any():
                        self.bus.send(w, dst, ("samples", tag),
                                      (draw.coords[sel], draw.xvals[sel]))
        nz_weight = x.nnz / cfg.p if cfg.p else 0.0
        z_weight = zero_weight(x, cfg)
        semi = cfg.scheme == "semi-stratified"
        out = []
        for w in range(self.n_workers):
            parts, n_nz = [], 0
            for tag in (0, 1):
                for _, (c, v) in self.bus.deliver(w, ("samples", tag)):
                    parts.append((c, v))
                    if tag == 0:
                        n_nz += c.shape[0]
            coords = (np.concatenate([c for c, _ in parts]) if parts
                      else np.zeros((0, x.ndim), dtype=np.int64))
            xvals = np.concatenate([v for _, v in parts]) if parts else np.zeros(0)
            out.append(SampleDraw(coords, xvals, n_nz, nz_weight, z_weight, semi))
        return out

    def _local_draws(self, cfg, root: RngStream, iteration: int) -> list[SampleDraw]:
        alloc = allocate_samples(cfg.p, cfg.q, self.n_workers)
        out = []
        for w, blk in enumerate(self.blocks):
            p_w, q_w = alloc[w]
            if blk.nnz == 0:
                p_w = 0
            if blk.total_entries == blk.nnz:
                q_w = 0
            if p_w + q_w == 0:
                d = len(blk.dims)
                out.append(SampleDraw(np.zeros((0, d), dtype=np.int64), np.zeros(0), 0, 0.0, 0.0,
                                      cfg.scheme == "semi-stratified"))
                continue
            rng = root.substream("grad", iteration, w)
            data = blk.tensor
            if cfg.scheme == "stratified" and q_w and data.index_mode is None:
                data = blk.tensor = data.build_index(cfg.search)
            out.append(draw_samples(data, cfg.with_counts(p_w, q_w), rng,
                                    offsets=blk.offsets))
        return out

    def worker_draws(self, x, cfg: SamplerConfig, seed: int, iteration: int) -> list[SampleDraw]:
        root = RngStream(seed)
        if self.sample_layout == "global":
            return self._routed_draws(x, cfg, root.substream("grad", iteration, 0))
        return self._local_draws(cfg, root, iteration)

    # -- gradient --------------------------------------------------------

    def gradient(self, model: KruskalModel, draws: list[SampleDraw], loss: LossFunction,
                 iteration: int = 0) -> np.ndarray:
        """Globalized flat gradient for one iteration; updates the ledger."""
        topo = self.topology
        if topo.scheme == "all-reduce":
            tables = [topo.local_table(model, w) for w in range(self.n_workers)]
        else:
            tables = two_sided_import(topo, model, [d.coords for d in draws],
                                      self.ledger, iteration, self.bus)
        samples = []
        for w, d in enumerate(draws):
            vals = d.values(tables[w], loss)
            if not np.isfinite(vals).all():
                raise SimulationError(f"worker {w} evaluated a model entry from a row it does not hold")
            samples.append(SampledGradientTensor(d.coords, vals, model.dims, d.n_nonzero,
                                                 d.coords.shape[0] - d.n_nonzero))
        mats = []
        for k in range(model.ndim):
            if topo.scheme == "all-reduce":
                partials = []
                for w, s in enumerate(samples):
                    lo, hi = self.grid.block_range(w, k)
                    partials.append(mttkrp(s, tables[w], k)[lo:hi])
                reduced = allreduce_gradient(topo, partials, k, self.ledger, iteration)
                g = np.zeros((model.dims[k], model.rank))
                for blk in range(self.grid.counts[k]):
                    first = self.grid.slice_members(k, blk)[0]
                    lo, hi = self.grid.block_range(first, k)
                    g[lo:hi] = reduced[first]
                mats.append(g)
            else:
                mats.append(two_sided_exchange(topo, tables, samples, k, self.ledger,
                                               iteration, self.bus))
        flat = np.concatenate([g.reshape(-1) for g in mats])
        if not np.isfinite(flat).all():
            raise SimulationError("non-finite gradient after reduction")
        return flat

    def gradient_fn(self, x, loss, cfg: SamplerConfig, seed: int, *, fused: bool = False):
        """Adapter for :func:`optimizer.run_gcp_adam`.

        ``fused`` has no effect here: routed samples are materialized at their
        owners, and the fused kernel is bitwise equal to the materialized path.
        """
        if self.topology.scheme == "two-sided" and fused:
            raise ConfigError("the two-sided scheme cannot use fused sampling-MTTKRP")
        if cfg.scheme == "stratified" and x.index_mode is None:
            x = x.build_index(cfg.search)

        def grad(model, iteration):
            draws = self.worker_draws(x, cfg, seed, iteration)
            return self.gradient(model, draws, loss, iteration)

        return grad
