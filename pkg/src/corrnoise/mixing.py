"""Banded lower-triangular mixing matrices.

A matrix is stored by its band: ``offdiag[t, k]`` holds ``C[t, t-1-k]`` for
``k < min(t, band-1)`` (zero beyond) and ``diag[t]`` holds ``C[t, t]``.
Entries outside the band are exactly zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import OutOfRangeError, ValidationError
from .fileio import atomic_write_text

#: diagonals with smaller magnitude are rejected (the recursion divides by them)
MIN_ABS_DIAG = 1e-12


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    n: int
    band: int
    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        diag = np.array(self.diag, dtype=np.float64)
        off = np.array(self.offdiag, dtype=np.float64).reshape(self.n, max(self.band - 1, 0))
        diag.setflags(write=False)
        off.setflags(write=False)
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "offdiag", off)
        _validate(self)

    def row_length(self, t: int) -> int:
        return min(t, self.band - 1)

    def coeffs(self, t: int) -> np.ndarray:
        """``[C[t, t-1], C[t, t-2], ...]`` truncated to the row's band."""
        return self.offdiag[t, : self.row_length(t)]

    def dense(self) -> np.ndarray:
        """Materialize the full ``n x n`` matrix (tests and small oracles only)."""
        out = np.diag(self.diag).astype(np.float64)
        for t in range(self.n):
            c = self.coeffs(t)
            out[t, t - 1 - np.arange(c.size)] = c
        return out

    def __eq__(self, other):
        if not isinstance(other, MixingMatrix):
            return NotImplemented
        return (self.n == other.n and self.band == other.band
                and np.array_equal(self.diag, other.diag)
                and np.array_equal(self.offdiag, other.offdiag))

    def to_document(self) -> dict:
        return {
            "n": self.n,
            "band": self.band,
            "rows": [{"coeffs": self.coeffs(t).tolist(), "diag": float(self.diag[t])}
                     for t in range(self.n)],
        }


@dataclass(frozen=True)
class MixingRow:
    t: int
    coeffs: np.ndarray
    diag: float
    prenormalized: bool = False
    ring_order: np.ndarray | None = None
    #: divisor already applied to ``coeffs`` (the raw ``C[t, t]`` when prenormalized)
    norm: float = 1.0
    history_rows: int = field(default=0)

    @property
    def ring_vector(self) -> np.ndarray:
        """Mixing vector laid out by ring-buffer row, zero for unused rows."""
        if self.ring_order is None:
            raise ValueError("row has no ring layout")
        vec = np.zeros(self.history_rows)
        vec[self.ring_order] = self.coeffs
        return vec


def _validate(C: MixingMatrix) -> None:
    if C.n < 1:
        raise ValidationError(f"n must be >= 1, got {C.n}")
    if not 1 <= C.band <= C.n:
        raise ValidationError(f"band must satisfy 1 <= band <= n={C.n}, got {C.band}")
    if C.diag.shape != (C.n,):
        raise ValidationError(f"diag must have length {C.n}, got {C.diag.shape}")
    bad = np.flatnonzero(~(np.abs(C.diag) > MIN_ABS_DIAG))
    if bad.size:
        raise ValidationError(f"zero diagonal at row {int(bad[0])}")
    if not np.all(np.isfinite(C.offdiag)):
        t = int(np.argwhere(~np.isfinite(C.offdiag))[0, 0])
        raise ValidationError(f"non-finite coefficient in row {t}")
    for t in range(min(C.n, C.band)):
        if np.any(C.offdiag[t, t:] != 0.0):
            raise ValidationError(f"row {t} has coefficients before column 0")


def identity_matrix(n: int) -> MixingMatrix:
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    return MixingMatrix(n=n, band=1, diag=np.ones(n), offdiag=np.zeros((n, 0)))


def banded_toeplitz(coeffs: Sequence[float], n: int) -> MixingMatrix:
    """Toeplitz band: ``diag = coeffs[0]``, ``C[t, t-tau] = coeffs[tau]``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    band = coeffs.size
    if band < 1:
        raise ValidationError("need at least one Toeplitz coefficient")
    if not abs(coeffs[0]) > MIN_ABS_DIAG:
        raise ValidationError("zero diagonal at row 0")
    if band > n:
        raise ValidationError(f"band {band} exceeds n={n}")
    off = np.zeros((n, band - 1))
    for t in range(n):
        k = min(t, band - 1)
        off[t, :k] = coeffs[1 : k + 1]
    return MixingMatrix(n=n, band=band, diag=np.full(n, coeffs[0]), offdiag=off)


def random_banded(n: int, band: int, rng: np.random.Generator,
                  min_abs_diag: float = 0.5, offdiag_scale: float = 0.5) -> MixingMatrix:
    """Random band with ``|diag|`` in ``[min_abs_diag, 2*min_abs_diag + 0.5]``.

    Off-diagonal magnitudes in a row sum to at most ``offdiag_scale * |diag|``,
    which keeps the recursion stable for long runs.
    """
    mag = rng.uniform(min_abs_diag, 2 * min_abs_diag + 0.5, size=n)
    diag = mag * rng.choice([-1.0, 1.0], size=n)
    off = np.zeros((n, band - 1))
    for t in range(n):
        k = min(t, band - 1)
        if k:
            w = rng.uniform(-1.0, 1.0, size=k)
            off[t, :k] = w / np.abs(w).sum() * offdiag_scale * mag[t] * rng.uniform()
    return MixingMatrix(n=n, band=band, diag=diag, offdiag=off)


_DOC_KEYS = {"n", "band", "toeplitz", "rows"}


def load_matrix(source: Mapping[str, Any] | str | Path) -> MixingMatrix:
    """Build a matrix from a JSON document (mapping or path)."""
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            doc = json.load(fh)
    else:
        doc = dict(source)
    unknown = set(doc) - _DOC_KEYS
    if unknown:
        raise ValidationError(f"unknown matrix document keys: {sorted(unknown)}")
    try:
        n = int(doc["n"])
        band = int(doc["band"])
    except KeyError as exc:
        raise ValidationError(f"matrix document missing {exc.args[0]!r}") from None
    if ("toeplitz" in doc) == ("rows" in doc):
        raise ValidationError("matrix document needs exactly one of 'toeplitz' or 'rows'")
    if "toeplitz" in doc:
        coeffs = [float(x) for x in doc["toeplitz"]]
        if len(coeffs) != band:
            raise ValidationError(f"toeplitz has {len(coeffs)} coefficients, band is {band}")
        return banded_toeplitz(coeffs, n)

    rows = doc["rows"]
    if len(rows) != n:
        raise ValidationError(f"expected {n} rows, got {len(rows)}")
    if not 1 <= band <= n:
        raise ValidationError(f"band must satisfy 1 <= band <= n={n}, got {band}")
    diag = np.empty(n)
    off = np.zeros((n, band - 1))
    for t, row in enumerate(rows):
        coeffs = row.get("coeffs", [])
        want = min(t, band - 1)
        if len(coeffs) != want:
            raise ValidationError(f"row {t}: expected {want} coefficients, got {len(coeffs)}")
        if "diag" not in row:
            raise ValidationError(f"row {t}: missing diag")
        diag[t] = float(row["diag"])
        if not abs(diag[t]) > MIN_ABS_DIAG:
            raise ValidationError(f"zero diagonal at row {t}")
        off[t, :want] = coeffs
    return MixingMatrix(n=n, band=band, diag=diag, offdiag=off)


def mixing_row(C: MixingMatrix, t: int, prenormalize: bool = False,
               ring: bool = False) -> MixingRow:
    """Row ``t`` of ``C`` in natural order (coefficient k multiplies step t-1-k).

    With ``ring``, ``ring_order[k]`` is the ring-buffer row ``(t-1-k) mod (band-1)``
    holding that step. With ``prenormalize``, coefficients are divided by
    ``C[t, t]`` and the reported diag is 1.
    """
    if not 0 <= t < C.n:
        raise OutOfRangeError(f"row {t} outside [0, {C.n})")
    coeffs = C.coeffs(t).copy()
    diag = float(C.diag[t])
    norm = 1.0
    if prenormalize:
        coeffs = coeffs / diag
        norm, diag = diag, 1.0
    order = None
    if ring:
        order = (t - 1 - np.arange(coeffs.size)) % max(C.band - 1, 1)
    coeffs.setflags(write=False)
    return MixingRow(t=t, coeffs=coeffs, diag=diag, prenormalized=prenormalize,
                     ring_order=order, norm=norm, history_rows=C.band - 1)


def save_matrix(C: MixingMatrix, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(C.to_document()))
