"""Pre-computed, coalesced correlated noise for sparse embedding tables.

Entries are split by access frequency. Hot entries keep the per-iteration
noise path. For every cold entry, the correlated noises of all iterations
are pre-computed tile by tile and summed between accesses, so the table
only receives one aggregated vector right before each access and one at
the end of training.

Store layout is CSC with one column per iteration. Column ``c`` holds the
events applied at the end of iteration ``c``: for an access at iteration
``t > 0`` the event sits in column ``t - 1`` and aggregates the noises since
the entry's previous access (inclusive) up to ``t`` (exclusive). Every cold
entry also has a final event in column ``n - 1`` covering its last access
through the end of training. An access at iteration 0 owes nothing and
creates no event.
"""
from __future__ import annotations

import hashlib
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InfeasibleError, StateError, ValidationError
from .fileio import atomic_write_bytes, code_dtype, dtype_code
from .mixing import MixingMatrix
from .noise import NoisePlan, prepared_rows
from .trace import AccessTrace, FrequencyStats

STORE_MAGIC = b"CNS1"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sIB3xQQIQ32s32sQ")


# -- hot/cold -----------------------------------------------------------------

@dataclass(frozen=True)
class HotColdSplit:
    threshold: float
    hot: np.ndarray
    #: exact cold-event count implied by the trace
    predicted_nnz: int
    #: event count with every entry cold, for the reduction ratio
    all_cold_nnz: int
    iterations: int

    @property
    def num_entries(self) -> int:
        return self.hot.size

    @property
    def hot_fraction(self) -> float:
        return float(self.hot.mean()) if self.hot.size else 0.0

    @property
    def cold_entries(self) -> np.ndarray:
        return np.flatnonzero(~self.hot)

    @property
    def hot_entries(self) -> np.ndarray:
        return np.flatnonzero(self.hot)

    @property
    def predicted_avg_noise_entries(self) -> float:
        return self.predicted_nnz / self.iterations

    @property
    def reduction(self) -> float:
        """``avg_noise_entries`` without splitting over with it."""
        return self.all_cold_nnz / self.predicted_nnz if self.predicted_nnz else math.inf

    def digest(self) -> bytes:
        return hashlib.sha256(np.packbits(self.hot).tobytes()
                              + np.int64(self.hot.size).tobytes()).digest()


def _event_counts(stats: FrequencyStats) -> np.ndarray:
    return stats.counts - stats.accessed_at_zero.astype(np.int64) + 1


def split_hot_cold(stats: FrequencyStats, threshold: float) -> HotColdSplit:
    """Entries with ``count >= threshold`` are hot; ``threshold=inf`` makes all cold."""
    hot = stats.counts >= threshold
    per_entry = _event_counts(stats)
    return HotColdSplit(
        threshold=float(threshold),
        hot=hot,
        predicted_nnz=int(per_entry[~hot].sum()),
        all_cold_nnz=int(per_entry.sum()),
        iterations=stats.iterations,
    )


def threshold_sweep(stats: FrequencyStats, thresholds) -> list[dict]:
    rows = []
    for th in thresholds:
        s = split_hot_cold(stats, th)
        rows.append({
            "threshold": float(th),
            "hot_fraction": s.hot_fraction,
            "predicted_nnz": s.predicted_nnz,
            "avg_noise_entries": s.predicted_avg_noise_entries,
        })
    return rows


# -- schedule -----------------------------------------------------------------

@dataclass(frozen=True)
class CoalescingSchedule:
    """Event layout for cold entries: CSC columns plus each event's start step.

    Event ``i`` in column ``c`` for entry ``row_idx[i]`` aggregates noises of
    iterations ``[start[i], c + 1)``.
    """
    n: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    start: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.row_idx.size)

    def column_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.col_ptr))

    def events_of(self, entry: int) -> list[tuple[int, int, int]]:
        """``(column, start, stop)`` triples for one entry, in flush order."""
        idx = np.flatnonzero(self.row_idx == entry)
        cols = self.column_of()[idx]
        return [(int(c), int(self.start[i]), int(c) + 1) for c, i in zip(cols, idx)]

    def flush_points(self, entry: int) -> list[int]:
        return [c for c, _, _ in self.events_of(entry)]


def build_schedule(trace: AccessTrace, split: HotColdSplit) -> CoalescingSchedule:
    if split.num_entries != trace.num_entries:
        raise ValidationError(
            f"split covers {split.num_entries} entries, trace has {trace.num_entries}")
    n = trace.iterations
    cold = ~split.hot
    last = np.zeros(trace.num_entries, dtype=np.int64)
    cols_rows, cols_start = [], []
    for t in range(1, n):
        ids = trace.replay(t)
        ids = ids[cold[ids]]
        cols_rows.append(ids)
        cols_start.append(last[ids].copy())
        last[ids] = t
    tail = np.flatnonzero(cold)
    cols_rows.append(tail)
    cols_start.append(last[tail].copy())
    col_ptr = np.zeros(n + 1, dtype=np.int64)
    col_ptr[1:] = np.cumsum([a.size for a in cols_rows])
    return CoalescingSchedule(n, col_ptr, np.concatenate(cols_rows), np.concatenate(cols_start))


# -- tiling -------------------------------------------------------------------

@dataclass(frozen=True)
class TileSpec:
    tile_elems: int
    d_emb: int

    def __post_init__(self):
        if self.d_emb < 1:
            raise ValidationError("d_emb must be >= 1")
        if self.tile_elems < self.d_emb or self.tile_elems % self.d_emb:
            raise ValidationError(
                f"tile_elems={self.tile_elems} must be a positive multiple of d_emb={self.d_emb}")

    @property
    def entries_per_tile(self) -> int:
        return self.tile_elems // self.d_emb

    def num_tiles(self, cold_elems: int) -> int:
        return max(1, -(-cold_elems // self.tile_elems))

    def ranges(self, n_cold: int) -> list[tuple[int, int]]:
        """Cold-index ranges ``[lo, hi)`` covered by each tile."""
        per = self.entries_per_tile
        return [(lo, min(lo + per, n_cold)) for lo in range(0, max(n_cold, 1), per)]

    @classmethod
    def partition(cls, n_cold: int, parts: int, d_emb: int) -> "TileSpec":
        per = max(1, -(-n_cold // parts))
        return cls(per * d_emb, d_emb)


def tile_size_solver(budget_bytes: int, band: int, cold_elems: int, d_emb: int,
                     dtype_width: int = 4) -> TileSpec:
    """Largest tile whose working set fits ``budget_bytes``.

    The working set is the ``band - 1`` resident history rows of the tile plus
    one raw-noise tile and one output tile: ``(band + 1) * tile * width``.
    """
    per_elem = (band + 1) * dtype_width
    max_elems = budget_bytes // per_elem
    tile = (max_elems // d_emb) * d_emb
    if tile < d_emb:
        raise InfeasibleError(
            f"budget {budget_bytes} B cannot hold one {d_emb}-wide tile "
            f"(needs {per_elem * d_emb} B)")
    whole = -(-max(cold_elems, d_emb) // d_emb) * d_emb
    return TileSpec(min(tile, whole), d_emb)


# -- store --------------------------------------------------------------------

@dataclass(eq=False)
class CoalescedNoiseStore:
    num_entries: int
    n: int
    d_emb: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray
    cold_entries: np.ndarray
    provenance: bytes = b"\0" * 32

    def __post_init__(self):
        self.col_ptr = np.asarray(self.col_ptr, dtype=np.int64)
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)
        self.cold_entries = np.asarray(self.cold_entries, dtype=np.int64)
        self.values = np.asarray(self.values).reshape(self.row_idx.size, self.d_emb)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def nnz(self) -> int:
        return int(self.row_idx.size)

    @property
    def payload_bytes(self) -> int:
        return self.nnz * self.d_emb * self.dtype.itemsize

    @property
    def index_bytes(self) -> int:
        return (self.n + 1) * 8 + self.nnz * 8

    @property
    def footprint_bytes(self) -> int:
        return self.payload_bytes + self.index_bytes

    def entry_map_digest(self) -> bytes:
        return hashlib.sha256(self.cold_entries.astype("<u8").tobytes()).digest()

    def column(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.col_ptr[c], self.col_ptr[c + 1]
        return self.row_idx[lo:hi], self.values[lo:hi]

    def check(self) -> None:
        """Raise ``ValidationError`` if any CSC invariant is broken."""
        cp = self.col_ptr
        if cp.shape != (self.n + 1,) or cp[0] != 0:
            raise ValidationError("col_ptr must have n+1 entries starting at 0")
        if np.any(np.diff(cp) < 0):
            raise ValidationError("col_ptr must be nondecreasing")
        if cp[-1] != self.nnz:
            raise ValidationError(f"col_ptr[n]={cp[-1]} != nnz={self.nnz}")
        for c in range(self.n):
            rows = self.row_idx[cp[c]:cp[c + 1]]
            if rows.size > 1 and np.any(np.diff(rows) <= 0):
                raise ValidationError(f"column {c}: row indices not strictly increasing")
        if self.nnz and (self.row_idx.min() < 0 or self.row_idx.max() >= self.num_entries):
            raise ValidationError("row index outside the table")

    def __eq__(self, other):
        if not isinstance(other, CoalescedNoiseStore):
            return NotImplemented
        return (self.num_entries == other.num_entries and self.n == other.n
                and self.d_emb == other.d_emb and self.dtype == other.dtype
                and self.provenance == other.provenance
                and np.array_equal(self.col_ptr, other.col_ptr)
                and np.array_equal(self.row_idx, other.row_idx)
                and np.array_equal(self.cold_entries, other.cold_entries)
                and np.array_equal(self.values, other.values))

    # -- file format ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        le = self.dtype.newbyteorder("<")
        header = _STORE_HEADER.pack(
            STORE_MAGIC, STORE_VERSION, dtype_code(self.dtype), self.num_entries, self.n,
            self.d_emb, self.nnz, self.entry_map_digest(), self.provenance,
            self.cold_entries.size)
        return b"".join([
            header,
            self.col_ptr.astype("<u8").tobytes(),
            self.row_idx.astype("<u8").tobytes(),
            self.values.astype(le, copy=False).tobytes(),
            self.cold_entries.astype("<u8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "CoalescedNoiseStore":
        if len(data) < _STORE_HEADER.size:
            raise ValidationError("store file shorter than its header")
        (magic, version, code, E, n, d, nnz, map_digest, prov,
         n_cold) = _STORE_HEADER.unpack_from(data)
        if magic != STORE_MAGIC:
            raise ValidationError(f"bad store magic {magic!r}")
        if version != STORE_VERSION:
            raise ValidationError(f"unsupported store version {version}")
        dtype = code_dtype(code)
        off = _STORE_HEADER.size
        sizes = [(n + 1) * 8, nnz * 8, nnz * d * dtype.itemsize, n_cold * 8]
        if len(data) != off + sum(sizes):
            raise ValidationError("store file size does not match its header")
        col_ptr = np.frombuffer(data, "<u8", n + 1, off).astype(np.int64)
        off += sizes[0]
        row_idx = np.frombuffer(data, "<u8", nnz, off).astype(np.int64)
        off += sizes[1]
        values = np.frombuffer(data, dtype, nnz * d, off).astype(dtype.newbyteorder("="))
        off += sizes[2]
        cold = np.frombuffer(data, "<u8", n_cold, off).astype(np.int64)
        store = cls(E, n, d, col_ptr, row_idx, values, cold, prov)
        if store.entry_map_digest() != map_digest:
            raise ValidationError("entry-map digest mismatch")
        store.check()
        return store

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "CoalescedNoiseStore":
        return cls.from_bytes(Path(path).read_bytes())


def avg_noise_entries(store: CoalescedNoiseStore) -> float:
    return store.nnz / store.n


def provenance_digest(plan: NoisePlan, C: MixingMatrix, trace: AccessTrace,
                      split: HotColdSplit) -> bytes:
    h = hashlib.sha256()
    h.update(repr((plan.seed, plan.m, plan.n, plan.band, float(plan.sigma), plan.dtype.str)).encode())
    h.update(C.diag.tobytes())
    h.update(C.offdiag.tobytes())
    h.update(trace.digest().encode())
    h.update(split.digest())
    return h.digest()


def entry_coords(entries: np.ndarray, d_emb: int) -> np.ndarray:
    """Global noise element ids of ``entries`` (row-major table layout)."""
    entries = np.asarray(entries, dtype=np.int64)
    return (entries[:, None] * d_emb + np.arange(d_emb)).ravel()


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("CORRNOISE_THREADS", "1")))
    except ValueError:
        return 1


def precompute_coalesced(plan: NoisePlan, C: MixingMatrix, trace: AccessTrace,
                         split: HotColdSplit, tiles: TileSpec | None = None,
                         schedule: CoalescingSchedule | None = None,
                         workers: int | None = None, backend=None) -> CoalescedNoiseStore:
    """Run the recursion per tile of cold coordinates and coalesce into CSC events."""
    plan.check_matrix(C)
    E = trace.num_entries
    if trace.iterations != plan.n:
        raise ValidationError(f"trace has {trace.iterations} iterations, plan has n={plan.n}")
    if plan.m % E:
        raise ValidationError(f"plan.m={plan.m} is not a multiple of num_entries={E}")
    d = plan.m // E
    if split.num_entries != E:
        raise ValidationError("split and trace disagree on num_entries")
    if schedule is None:
        schedule = build_schedule(trace, split)
    elif schedule.n != plan.n:
        raise ValidationError("schedule does not match the trace length")
    cold = split.cold_entries
    cold_index = np.full(E, -1, dtype=np.int64)
    cold_index[cold] = np.arange(cold.size)
    ev_cold = cold_index[schedule.row_idx]
    if np.any(ev_cold < 0):
        raise ValidationError("schedule contains events for hot entries")
    if tiles is None:
        tiles = TileSpec(max(cold.size, 1) * d, d)
    elif tiles.d_emb != d:
        raise ValidationError(f"tile d_emb={tiles.d_emb} != table d_emb={d}")

    coeffs, lengths, norms = prepared_rows(C, plan.dtype)
    values = np.zeros((schedule.nnz, d), dtype=plan.dtype)

    def run(rng):
        lo, hi = rng
        if hi <= lo:
            return
        coords = entry_coords(cold[lo:hi], d)
        kernels.precompute_tile(plan.seed, plan.sigma, coords, coeffs, lengths, norms,
                                schedule.col_ptr, ev_cold, lo, hi, d, values, backend)

    ranges = tiles.ranges(cold.size)
    workers = workers or _default_workers()
    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, ranges))
    else:
        for r in ranges:
            run(r)
    return CoalescedNoiseStore(E, plan.n, d, schedule.col_ptr.copy(), schedule.row_idx.copy(),
                               values, cold, provenance_digest(plan, C, trace, split))


def lazy_apply(store: CoalescedNoiseStore, table: np.ndarray, t: int,
               scale: float = 1.0) -> np.ndarray:
    """Add ``scale`` times the events owed before iteration ``t`` (``t = n``: end of training).

    Applies column ``t - 1`` in place; ``t = 0`` is a no-op.
    """
    if not 0 <= t <= store.n:
        raise StateError(f"iteration {t} outside [0, {store.n}]")
    if t == 0:
        return table
    rows, vals = store.column(t - 1)
    if rows.size:
        table[rows] += scale * vals
    return table


class LazyApplier:
    """Enforces the once-per-iteration, in-order discipline around ``lazy_apply``."""

    def __init__(self, store: CoalescedNoiseStore):
        self.store = store
        self.next_t = 0

    def __call__(self, table: np.ndarray, t: int, scale: float = 1.0) -> np.ndarray:
        if t != self.next_t:
            raise StateError(f"lazy_apply expected iteration {self.next_t}, got {t}")
        lazy_apply(self.store, table, t, scale)
        self.next_t += 1
        return table
