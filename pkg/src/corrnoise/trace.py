"""Embedding access traces: synthetic Zipf generation, file I/O, replay.

A trace stores, per iteration, the sorted set of embedding entries touched.
The text format is one line per iteration, ``t:id,id,id``, preceded by a
``# num_entries=E`` header. Paths ending in ``.gz`` are gzip-compressed with
a zero mtime so output bytes are reproducible.
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InfeasibleError, OutOfRangeError, ValidationError
from .fileio import atomic_write_bytes


@dataclass(frozen=True)
class TraceConfig:
    num_entries: int
    iterations: int
    batch_size: int
    pooling: int = 1
    zipf_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_entries < 1:
            raise ValidationError("num_entries must be >= 1")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.batch_size < 1 or self.pooling < 1:
            raise ValidationError("batch_size and pooling must be >= 1")
        if self.zipf_alpha < 0:
            raise ValidationError("zipf_alpha must be >= 0")

    @property
    def draws_per_iteration(self) -> int:
        return self.batch_size * self.pooling

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class AccessTrace:
    """Per-iteration sorted, deduplicated entry ids in CSR form."""

    def __init__(self, num_entries: int, offsets, ids, provenance: str = "",
                 draw_counts=None):
        self.num_entries = int(num_entries)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.provenance = provenance
        self.draw_counts = None if draw_counts is None else np.asarray(draw_counts, np.int64)
        self._check()

    def _check(self):
        if self.offsets.ndim != 1 or self.offsets.size < 1 or self.offsets[0] != 0:
            raise ValidationError("offsets must start at 0")
        if np.any(np.diff(self.offsets) < 0) or self.offsets[-1] != self.ids.size:
            raise ValidationError("offsets must be nondecreasing and end at len(ids)")
        if self.ids.size:
            if self.ids.min() < 0 or self.ids.max() >= self.num_entries:
                raise ValidationError(f"entry id outside [0, {self.num_entries})")
            step = np.diff(self.ids)
            starts = self.offsets[1:-1]
            inner = np.ones(self.ids.size - 1, dtype=bool)
            inner[starts[(starts > 0) & (starts < self.ids.size)] - 1] = False
            if np.any(step[inner] <= 0):
                raise ValidationError("ids within an iteration must be strictly increasing")

    @classmethod
    def from_sets(cls, num_entries: int, sets, provenance: str = "") -> "AccessTrace":
        lists = [np.unique(np.asarray(list(s), dtype=np.int64)) for s in sets]
        offsets = np.zeros(len(lists) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([a.size for a in lists])
        ids = np.concatenate(lists) if lists else np.zeros(0, np.int64)
        return cls(num_entries, offsets, ids, provenance)

    @property
    def iterations(self) -> int:
        return self.offsets.size - 1

    def replay(self, t: int) -> np.ndarray:
        if not 0 <= t < self.iterations:
            raise OutOfRangeError(f"iteration {t} outside [0, {self.iterations})")
        return self.ids[self.offsets[t]:self.offsets[t + 1]]

    def __iter__(self):
        for t in range(self.iterations):
            yield self.replay(t)

    def __eq__(self, other):
        if not isinstance(other, AccessTrace):
            return NotImplemented
        return (self.num_entries == other.num_entries
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.ids, other.ids))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.num_entries).tobytes())
        h.update(self.offsets.astype("<i8").tobytes())
        h.update(self.ids.astype("<i8").tobytes())
        return h.hexdigest()

    # -- text format ----------------------------------------------------------
    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# num_entries={self.num_entries}\n")
        for t in range(self.iterations):
            buf.write(f"{t}:" + ",".join(map(str, self.replay(t).tolist())) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        data = self.to_text().encode("ascii")
        if str(path).endswith(".gz"):
            buf = io.BytesIO()
            with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
                gz.write(data)
            data = buf.getvalue()
        atomic_write_bytes(path, data)


replay_iteration = AccessTrace.replay


def generate_zipf_trace(cfg: TraceConfig) -> AccessTrace:
    """Synthetic trace covering every entry at least once.

    One slot per entry is reserved at a random position among all
    ``B * pooling * n`` draw slots; the remaining slots are Zipf(alpha) draws
    over entry ranks, with ranks mapped to entries through a seeded
    permutation.
    """
    E, n, per = cfg.num_entries, cfg.iterations, cfg.draws_per_iteration
    total = per * n
    if E > total:
        raise InfeasibleError(
            f"num_entries={E} exceeds batch_size*pooling*iterations={total}; cannot cover all entries")
    rng = np.random.default_rng(cfg.seed)
    rank_to_entry = rng.permutation(E)

    slots = np.empty(total, dtype=np.int64)
    cover = np.zeros(total, dtype=bool)
    cover[rng.choice(total, size=E, replace=False)] = True
    slots[cover] = rng.permutation(E)

    weights = np.arange(1, E + 1, dtype=np.float64) ** (-cfg.zipf_alpha)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    rest = total - E
    ranks = np.searchsorted(cdf, rng.random(rest), side="right")
    np.minimum(ranks, E - 1, out=ranks)
    slots[~cover] = rank_to_entry[ranks]

    draw_counts = np.bincount(slots, minlength=E)
    per_iter = slots.reshape(n, per)
    lists = [np.unique(row) for row in per_iter]
    offsets = np.zeros(n + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([a.size for a in lists])
    return AccessTrace(E, offsets, np.concatenate(lists), provenance=f"config:{cfg.digest()}",
                       draw_counts=draw_counts)


def zipf_rank_to_entry(cfg: TraceConfig) -> np.ndarray:
    """Entry id holding each Zipf rank (rank 1 first) in ``generate_zipf_trace(cfg)``."""
    return np.random.default_rng(cfg.seed).permutation(cfg.num_entries)


@dataclass
class FrequencyStats:
    counts: np.ndarray  # iteration-level presence per entry
    accessed_at_zero: np.ndarray
    iterations: int
    draw_counts: np.ndarray | None = None

    @property
    def num_entries(self) -> int:
        return self.counts.size

    @property
    def mean_unique_per_iteration(self) -> float:
        return float(self.counts.sum()) / max(self.iterations, 1)


def frequency_histogram(trace: AccessTrace) -> FrequencyStats:
    counts = np.bincount(trace.ids, minlength=trace.num_entries).astype(np.int64)
    at_zero = np.zeros(trace.num_entries, dtype=bool)
    if trace.iterations:
        at_zero[trace.replay(0)] = True
    return FrequencyStats(counts, at_zero, trace.iterations, trace.draw_counts)


def parse_trace_text(text: str, num_entries: int | None = None, provenance: str = "") -> AccessTrace:
    header_entries = None
    sets: list[np.ndarray] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key.strip() == "num_entries":
                try:
                    header_entries = int(val)
                except ValueError:
                    raise ValidationError(f"line {lineno}: bad num_entries header") from None
            continue
        head, sep, body = line.partition(":")
        if not sep:
            raise ValidationError(f"line {lineno}: expected 't:id,id,...'")
        try:
            t = int(head)
            ids = [int(x) for x in body.split(",")] if body.strip() else []
        except ValueError:
            raise ValidationError(f"line {lineno}: malformed integer") from None
        if t != len(sets):
            raise ValidationError(f"line {lineno}: expected iteration {len(sets)}, got {t}")
        if any(i < 0 for i in ids):
            raise ValidationError(f"line {lineno}: negative entry id")
        sets.append(np.unique(np.asarray(ids, dtype=np.int64)))
    E = num_entries if num_entries is not None else header_entries
    if E is None:
        E = int(max((s.max() for s in sets if s.size), default=-1)) + 1
    if header_entries is not None and num_entries is not None and header_entries != num_entries:
        raise ValidationError(f"file declares {header_entries} entries, caller expects {num_entries}")
    for t, s in enumerate(sets):
        if s.size and s[-1] >= E:
            raise ValidationError(f"iteration {t}: entry id {int(s[-1])} >= num_entries={E}")
    trace = AccessTrace.from_sets(max(E, 1), sets, provenance)
    return trace


def ingest_trace_file(path, num_entries: int | None = None) -> AccessTrace:
    raw = Path(path).read_bytes()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    digest = hashlib.sha256(raw).hexdigest()
    return parse_trace_text(raw.decode("ascii"), num_entries, provenance=f"file:{digest}")
