"""Toy embedding-table training used to check lazy/eager noise equivalence.

The gradient of an accessed entry is ``grad_fn(row)`` (``tanh`` by default);
unaccessed entries get a zero gradient. Both modes do plain SGD:

    eager: every row  -= lr * c * zhat_t[row];  accessed rows -= lr * g
    lazy:  cold rows receive coalesced events before their next access,
           hot rows get zhat_t from a history restricted to hot coordinates.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .emb import (CoalescedNoiseStore, HotColdSplit, LazyApplier, entry_coords,
                  provenance_digest)
from .errors import ValidationError
from .fileio import atomic_write_bytes, code_dtype, dtype_code
from .mixing import MixingMatrix
from .noise import NoiseHistory, NoisePlan, next_correlated_noise
from .trace import AccessTrace

TABLE_MAGIC = b"CNT1"
_TABLE_HEADER = struct.Struct("<4sB3xII")


@dataclass
class ToyModel:
    table: np.ndarray
    learning_rate: float = 0.1
    noise_coefficient: float = 1.0

    def __post_init__(self):
        self.table = np.asarray(self.table)
        if self.table.ndim != 2:
            raise ValidationError("table must be 2-D (entries x d_emb)")
        if not np.all(np.isfinite(self.table)):
            raise ValidationError("table has non-finite entries")

    @classmethod
    def random(cls, num_entries: int, d_emb: int, seed: int = 0, dtype=np.float64,
               learning_rate: float = 0.1, batch_size: int = 1) -> "ToyModel":
        rng = np.random.default_rng(seed)
        table = rng.normal(size=(num_entries, d_emb)).astype(dtype)
        return cls(table, learning_rate, 1.0 / batch_size)


@dataclass
class TrainRun:
    mode: str
    table: np.ndarray
    access_log: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)


def _check_plan(model: ToyModel, plan: NoisePlan, C: MixingMatrix, trace: AccessTrace) -> int:
    plan.check_matrix(C)
    E, d = model.table.shape
    if E != trace.num_entries:
        raise ValidationError(f"table has {E} rows, trace has {trace.num_entries} entries")
    if plan.m != E * d:
        raise ValidationError(f"plan.m={plan.m} != table size {E * d}")
    if trace.iterations != plan.n:
        raise ValidationError(f"trace has {trace.iterations} iterations, plan.n={plan.n}")
    return d


def tanh_grad(rows: np.ndarray) -> np.ndarray:
    return np.tanh(rows)


def train_eager(model: ToyModel, plan: NoisePlan, C: MixingMatrix, trace: AccessTrace,
                record_access: bool = False, backend=None, grad_fn=tanh_grad) -> TrainRun:
    d = _check_plan(model, plan, C, trace)
    table = model.table.astype(plan.dtype, copy=True)
    lr, c = model.learning_rate, model.noise_coefficient
    hist = NoiseHistory.for_plan(plan)
    run = TrainRun("eager", table)
    for t in range(plan.n):
        t0 = time.perf_counter()
        ids = trace.replay(t)
        if record_access:
            run.access_log.append(table[ids].copy())
        g = grad_fn(table[ids])
        noise = next_correlated_noise(plan, C, hist, t, backend).values.reshape(-1, d)
        table -= lr * c * noise
        table[ids] -= lr * g
        run.step_seconds.append(time.perf_counter() - t0)
    return run


def train_lazy(model: ToyModel, plan: NoisePlan, C: MixingMatrix, trace: AccessTrace,
               split: HotColdSplit, store: CoalescedNoiseStore, record_access: bool = False,
               backend=None, grad_fn=tanh_grad) -> TrainRun:
    d = _check_plan(model, plan, C, trace)
    if store.provenance != provenance_digest(plan, C, trace, split):
        raise ValidationError("store was not built from this (plan, matrix, trace, split)")
    table = model.table.astype(plan.dtype, copy=True)
    lr, c = model.learning_rate, model.noise_coefficient
    apply_events = LazyApplier(store)
    hot = split.hot_entries
    hist = NoiseHistory.for_plan(plan, entry_coords(hot, d)) if hot.size else None
    run = TrainRun("lazy", table)
    for t in range(plan.n):
        t0 = time.perf_counter()
        apply_events(table, t, -lr * c)
        ids = trace.replay(t)
        if record_access:
            run.access_log.append(table[ids].copy())
        g = grad_fn(table[ids])
        if hist is not None:
            noise = next_correlated_noise(plan, C, hist, t, backend).values.reshape(-1, d)
            table[hot] -= lr * c * noise
        table[ids] -= lr * g
        run.step_seconds.append(time.perf_counter() - t0)
    apply_events(table, plan.n, -lr * c)
    return run


@dataclass(frozen=True)
class RunDiff:
    max_abs: float
    max_rel: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel <= self.tolerance

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "max_rel": self.max_rel,
                "tolerance": self.tolerance, "ok": self.ok}


def compare_runs(a: TrainRun | np.ndarray, b: TrainRun | np.ndarray,
                 tolerance: float = 1e-9) -> RunDiff:
    """Max absolute difference, and the same relative to the largest |value|."""
    ta = a.table if isinstance(a, TrainRun) else np.asarray(a)
    tb = b.table if isinstance(b, TrainRun) else np.asarray(b)
    if ta.shape != tb.shape:
        raise ValidationError(f"shape mismatch {ta.shape} vs {tb.shape}")
    diff = np.abs(ta.astype(np.float64) - tb.astype(np.float64))
    max_abs = float(diff.max()) if diff.size else 0.0
    scale = float(np.abs(ta).max()) if ta.size else 0.0
    max_rel = max_abs / scale if scale > 0 else max_abs
    return RunDiff(max_abs, max_rel, tolerance)


def table_to_bytes(table: np.ndarray) -> bytes:
    E, d = table.shape
    header = _TABLE_HEADER.pack(TABLE_MAGIC, dtype_code(table.dtype), E, d)
    return header + table.astype(table.dtype.newbyteorder("<"), copy=False).tobytes()


def table_from_bytes(data: bytes) -> np.ndarray:
    magic, code, E, d = _TABLE_HEADER.unpack_from(data)
    if magic != TABLE_MAGIC:
        raise ValidationError(f"bad table magic {magic!r}")
    dtype = code_dtype(code)
    body = np.frombuffer(data, dtype, offset=_TABLE_HEADER.size)
    if body.size != E * d:
        raise ValidationError("table payload size mismatch")
    return body.reshape(E, d).astype(dtype.newbyteorder("="))


def save_table(table: np.ndarray, path) -> None:
    atomic_write_bytes(path, table_to_bytes(table))


def load_table(path) -> np.ndarray:
    return table_from_bytes(Path(path).read_bytes())
