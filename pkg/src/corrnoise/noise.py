"""Deterministic Gaussian noise and the banded correlation recursion.

``next_correlated_noise`` is the streaming engine: it keeps the last
``band - 1`` outputs in a ring buffer and computes

    zhat_t = z_t / C[t,t] - sum_k (C[t,t-1-k] / C[t,t]) * zhat_{t-1-k}

with the mixing row pre-normalized and reordered to the ring layout.
``regen_oracle`` recomputes the same values from the seed alone.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import OutOfRangeError, StateError, ValidationError
from .fileio import as_float_dtype, atomic_write_bytes, code_dtype, dtype_code
from .mixing import MixingMatrix, MixingRow, mixing_row

SNAPSHOT_MAGIC = b"CNH1"
_SNAPSHOT_HEADER = struct.Struct("<4sB3xIQq4x")


@dataclass(frozen=True)
class NoisePlan:
    seed: int
    m: int
    n: int
    band: int
    sigma: float = 1.0
    dtype: np.dtype = np.dtype(np.float64)

    def __post_init__(self):
        object.__setattr__(self, "dtype", as_float_dtype(self.dtype))
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.m < 1:
            raise ValidationError(f"m must be >= 1, got {self.m}")
        if not 1 <= self.band <= self.n:
            raise ValidationError(f"band must satisfy 1 <= band <= n, got band={self.band}, n={self.n}")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")

    def check_matrix(self, C: MixingMatrix) -> None:
        if C.n != self.n or C.band != self.band:
            raise ValidationError(
                f"matrix (n={C.n}, band={C.band}) does not match plan (n={self.n}, band={self.band})")


@dataclass(frozen=True)
class CorrelatedNoise:
    t: int
    values: np.ndarray


class NoiseHistory:
    """Ring buffer of the last ``band - 1`` correlated noises.

    The noise of step ``t`` lives in row ``t mod (band - 1)``. ``coords`` are
    the global element ids the columns correspond to (all of ``[0, m)`` by
    default), so a history can cover any subset of the model.
    """

    def __init__(self, band: int, m: int | None = None, dtype=np.float64, coords=None):
        if coords is None:
            if m is None:
                raise ValueError("need m or coords")
            coords = np.arange(m, dtype=np.int64)
        self.coords = np.ascontiguousarray(coords, dtype=np.int64)
        self.band = int(band)
        self.dtype = as_float_dtype(dtype)
        self.rows = np.zeros((self.band - 1, self.coords.size), dtype=self.dtype)
        self.filled = 0
        self.head = -1  # last step written

    @classmethod
    def for_plan(cls, plan: NoisePlan, coords=None) -> "NoiseHistory":
        return cls(plan.band, plan.m, plan.dtype, coords)

    @property
    def capacity(self) -> int:
        return self.band - 1

    @property
    def width(self) -> int:
        return self.coords.size

    def ring_row(self, step: int) -> int:
        return step % self.capacity

    def read(self, step: int) -> np.ndarray:
        if not (self.head - self.filled < step <= self.head):
            raise StateError(f"step {step} is not in the history window ending at {self.head}")
        return self.rows[self.ring_row(step)]

    def push(self, step: int, values: np.ndarray) -> None:
        if step != self.head + 1:
            raise StateError(f"expected step {self.head + 1}, got {step}")
        if self.capacity:
            self.rows[self.ring_row(step)] = values
            self.filled = min(self.filled + 1, self.capacity)
        self.head = step

    # -- snapshot -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        header = _SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, dtype_code(self.dtype),
                                       self.band, self.width, self.head)
        return header + self.rows.astype(self.dtype.newbyteorder("<"), copy=False).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "NoiseHistory":
        if len(data) < _SNAPSHOT_HEADER.size:
            raise ValidationError("history snapshot shorter than its header")
        magic, code, band, m, head = _SNAPSHOT_HEADER.unpack_from(data)
        if magic != SNAPSHOT_MAGIC:
            raise ValidationError(f"bad history magic {magic!r}")
        dtype = code_dtype(code)
        body = np.frombuffer(data, dtype=dtype, offset=_SNAPSHOT_HEADER.size)
        if body.size != (band - 1) * m:
            raise ValidationError("history snapshot payload size mismatch")
        hist = cls(band, m, dtype.newbyteorder("="))
        hist.rows[...] = body.reshape(band - 1, m)
        hist.head = head
        hist.filled = min(head + 1, band - 1)
        return hist

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "NoiseHistory":
        return cls.from_bytes(Path(path).read_bytes())


def raw_noise_at(plan: NoisePlan, t: int, coords, backend=None) -> np.ndarray:
    """``z_t`` at arbitrary element ids."""
    coords = np.ascontiguousarray(coords, dtype=np.int64)
    out = np.empty(coords.size, dtype=plan.dtype)
    return kernels.normal(plan.seed, t, coords, plan.sigma, out, backend)


def sample_raw_noise(plan: NoisePlan, t: int, lo: int = 0, hi: int | None = None,
                     backend=None) -> np.ndarray:
    """``z_t[lo:hi]``; a pure function of (seed, t, element index)."""
    hi = plan.m if hi is None else hi
    if not (0 <= lo <= hi <= plan.m):
        raise OutOfRangeError(f"range [{lo}, {hi}) outside [0, {plan.m})")
    if not 0 <= t < plan.n:
        raise OutOfRangeError(f"step {t} outside [0, {plan.n})")
    return raw_noise_at(plan, t, np.arange(lo, hi, dtype=np.int64), backend)


def prepared_rows(C: MixingMatrix, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pre-normalized band ``(n, band-1)``, row lengths and diagonals in ``dtype``."""
    dtype = np.dtype(dtype)
    coeffs = (C.offdiag / C.diag[:, None]).astype(dtype)
    lengths = np.minimum(np.arange(C.n), C.band - 1).astype(np.int64)
    return np.ascontiguousarray(coeffs), lengths, C.diag.astype(dtype)


def mix_history(history: NoiseHistory, row: MixingRow, backend=None) -> np.ndarray:
    """Weighted sum of history rows, in ascending-lag order."""
    if row.ring_order is None:
        raise StateError("mixing row has no ring layout")
    k = row.coeffs.size
    if k > history.filled:
        raise StateError(f"row needs {k} history rows, only {history.filled} filled")
    if k and history.head != row.t - 1:
        raise StateError(f"history head is step {history.head}, row is for step {row.t}")
    out = np.empty(history.width, dtype=history.dtype)
    kernels.mix(row.coeffs.astype(history.dtype), history.rows,
                np.ascontiguousarray(row.ring_order, dtype=np.int64), out, backend)
    return out


def next_correlated_noise(plan: NoisePlan, C: MixingMatrix, history: NoiseHistory,
                          t: int, backend=None) -> CorrelatedNoise:
    """Produce ``zhat_t`` and write it into ``history``."""
    if not 0 <= t < plan.n:
        raise OutOfRangeError(f"step {t} outside [0, {plan.n})")
    if history.head != t - 1:
        raise StateError(f"history holds steps up to {history.head}; cannot produce step {t}")
    row = mixing_row(C, t, prenormalize=True, ring=True)
    dtype = history.dtype
    z = raw_noise_at(plan, t, history.coords, backend)
    out = np.empty(history.width, dtype=dtype)
    kernels.correlate(z, np.array([row.norm], dtype=dtype), row.coeffs.astype(dtype),
                      history.rows, row.ring_order.astype(np.int64), out, backend)
    history.push(t, out)
    return CorrelatedNoise(t, out)


def stream(plan: NoisePlan, C: MixingMatrix, coords=None, backend=None):
    """Yield ``zhat_0 .. zhat_{n-1}`` over ``coords``."""
    plan.check_matrix(C)
    hist = NoiseHistory.for_plan(plan, coords)
    for t in range(plan.n):
        yield next_correlated_noise(plan, C, hist, t, backend)


def generate_all(plan: NoisePlan, C: MixingMatrix, coords=None, backend=None) -> np.ndarray:
    """Stacked streaming outputs, shape ``(n, len(coords))``."""
    return np.stack([c.values for c in stream(plan, C, coords, backend)])


def regen_oracle(plan: NoisePlan, C: MixingMatrix, t: int, coords=None,
                 backend=None) -> CorrelatedNoise:
    """Recompute ``zhat_t`` from the seed, keeping every earlier noise locally."""
    if not 0 <= t < plan.n:
        raise OutOfRangeError(f"step {t} outside [0, {plan.n})")
    coords = np.arange(plan.m, dtype=np.int64) if coords is None else np.asarray(coords, np.int64)
    dtype = plan.dtype
    stack = np.zeros((t + 1, coords.size), dtype=dtype)
    for s in range(t + 1):
        row = mixing_row(C, s, prenormalize=True)
        z = raw_noise_at(plan, s, coords, backend)
        lags = (s - 1 - np.arange(row.coeffs.size)).astype(np.int64)
        kernels.correlate(z, np.array([row.norm], dtype=dtype), row.coeffs.astype(dtype),
                          stack, lags, stack[s], backend)
    return CorrelatedNoise(t, stack[t].copy())
