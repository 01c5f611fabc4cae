"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

Random numbers come from Philox4x32-10 keyed by the 64-bit seed, with the
counter ``(element_lo, element_hi, step_lo, step_hi)``. The first two output
words form a 64-bit integer whose top 53 bits give ``u = (k + 0.5) / 2**53``,
which is mapped to a standard normal by an inverse-CDF (Acklam's rational
approximation followed by one Halley step). A draw is therefore a pure
function of ``(seed, step, element)``.

The two backends run the same floating-point operations in the same order,
so the correlation and accumulation kernels agree bit-for-bit. The normal
transform calls ``erfc``/``exp``/``log`` from different math libraries and
may differ by an ulp or so between backends.
"""
import math
from types import SimpleNamespace

import numpy as np
from scipy import special

from ._accel import BACKEND, HAS_NUMBA, njit

MASK32 = 0xFFFFFFFF
PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
PHILOX_ROUNDS = 10

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771482e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_INV_2_53 = 1.0 / 9007199254740992.0


# ---------------------------------------------------------------- numba ----

if HAS_NUMBA:
    _U64 = np.uint64
    _NB_MASK = np.uint64(MASK32)
    _NB_M0 = np.uint64(PHILOX_M0)
    _NB_M1 = np.uint64(PHILOX_M1)
    _NB_W0 = np.uint64(PHILOX_W0)
    _NB_W1 = np.uint64(PHILOX_W1)
    _NB_32 = np.uint64(32)
    _NB_11 = np.uint64(11)
else:  # pragma: no cover
    _U64 = int
    _NB_MASK, _NB_M0, _NB_M1, _NB_W0, _NB_W1, _NB_32, _NB_11 = (
        MASK32, PHILOX_M0, PHILOX_M1, PHILOX_W0, PHILOX_W1, 32, 11)


@njit
def _nb_philox(c0, c1, c2, c3, k0, k1):
    for r in range(PHILOX_ROUNDS):
        if r > 0:
            k0 = (k0 + _NB_W0) & _NB_MASK
            k1 = (k1 + _NB_W1) & _NB_MASK
        p0 = _NB_M0 * c0
        p1 = _NB_M1 * c2
        n0 = (p1 >> _NB_32) ^ c1 ^ k0
        n2 = (p0 >> _NB_32) ^ c3 ^ k1
        c0 = n0
        c1 = p1 & _NB_MASK
        c2 = n2
        c3 = p0 & _NB_MASK
    return c0, c1, c2, c3


@njit
def _nb_ndtri_lower(p):
    # p in (0, 0.5]
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    else:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    e = 0.5 * math.erfc(-x / _SQRT2) - p
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@njit
def _nb_ndtri(p):
    if p > 0.5:
        return -_nb_ndtri_lower(1.0 - p)
    return _nb_ndtri_lower(p)


@njit
def _nb_normal_at(seed, step, idx):
    s = np.uint64(seed)
    t = np.uint64(step)
    i = np.uint64(idx)
    x0, x1, _, _ = _nb_philox(i & _NB_MASK, i >> _NB_32, t & _NB_MASK, t >> _NB_32,
                              s & _NB_MASK, s >> _NB_32)
    k = ((x0 << _NB_32) | x1) >> _NB_11
    u = (float(k) + 0.5) * _INV_2_53
    return _nb_ndtri(u)


@njit
def _nb_normal(seed, step, idx, sigma, out):
    for j in range(idx.shape[0]):
        out[j] = sigma * _nb_normal_at(seed, step, idx[j])


@njit
def _nb_correlate(z, norm, coeffs, hist, rows, out):
    for j in range(out.shape[0]):
        out[j] = 0.0
        for k in range(coeffs.shape[0]):
            out[j] += coeffs[k] * hist[rows[k], j]
        out[j] = z[j] / norm[0] - out[j]


@njit
def _nb_mix(coeffs, hist, rows, out):
    for j in range(out.shape[0]):
        out[j] = 0.0
        for k in range(coeffs.shape[0]):
            out[j] += coeffs[k] * hist[rows[k], j]


@njit
def _nb_precompute_tile(seed, sigma, coords, coeffs, lengths, norms,
                        col_ptr, ev_cold, cold_lo, cold_hi, d, values):
    n = norms.shape[0]
    K = coeffs.shape[1]
    L = coords.shape[0]
    hist = np.zeros((max(K, 1), L), dtype=values.dtype)
    acc = np.zeros(L, dtype=values.dtype)
    z = np.empty(L, dtype=values.dtype)
    zh = np.empty(L, dtype=values.dtype)
    for t in range(n):
        for j in range(L):
            z[j] = sigma * _nb_normal_at(seed, t, coords[j])
        klen = lengths[t]
        for j in range(L):
            zh[j] = 0.0
            for k in range(klen):
                zh[j] += coeffs[t, k] * hist[(t - 1 - k) % K, j]
            zh[j] = z[j] / norms[t] - zh[j]
        if K > 0:
            for j in range(L):
                hist[t % K, j] = zh[j]
        for j in range(L):
            acc[j] += zh[j]
        for ev in range(col_ptr[t], col_ptr[t + 1]):
            c = ev_cold[ev]
            if c < cold_lo or c >= cold_hi:
                continue
            base = (c - cold_lo) * d
            for q in range(d):
                values[ev, q] = acc[base + q]
                acc[base + q] = 0.0


# ---------------------------------------------------------------- numpy ----

def _np_philox(c0, c1, c2, c3, k0, k1):
    m0 = np.uint64(PHILOX_M0)
    m1 = np.uint64(PHILOX_M1)
    mask = np.uint64(MASK32)
    s32 = np.uint64(32)
    for r in range(PHILOX_ROUNDS):
        if r > 0:
            k0 = (k0 + np.uint64(PHILOX_W0)) & mask
            k1 = (k1 + np.uint64(PHILOX_W1)) & mask
        p0 = m0 * c0
        p1 = m1 * c2
        c0, c1, c2, c3 = (p1 >> s32) ^ c1 ^ k0, p1 & mask, (p0 >> s32) ^ c3 ^ k1, p0 & mask
    return c0, c1, c2, c3


def _np_ndtri(p):
    p = np.asarray(p, dtype=np.float64)
    upper = p > 0.5
    pl = np.where(upper, 1.0 - p, p)
    tail = pl < _P_LOW
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.sqrt(-2.0 * np.log(pl))
        xt = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = pl - 0.5
    r = q * q
    xc = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
          / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    x = np.where(tail, xt, xc)
    e = 0.5 * special.erfc(-x / _SQRT2) - pl
    u = e * _SQRT2PI * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    return np.where(upper, -x, x)


def _np_normal_at(seed, step, idx):
    idx = np.asarray(idx, dtype=np.uint64)
    mask = np.uint64(MASK32)
    s32 = np.uint64(32)
    n = idx.shape[0]
    t = np.uint64(step)
    s = np.uint64(seed)
    x0, x1, _, _ = _np_philox(idx & mask, idx >> s32,
                              np.full(n, t & mask, np.uint64), np.full(n, t >> s32, np.uint64),
                              np.full(n, s & mask, np.uint64), np.full(n, s >> s32, np.uint64))
    k = ((x0 << s32) | x1) >> np.uint64(11)
    u = (k.astype(np.float64) + 0.5) * _INV_2_53
    return _np_ndtri(u)


def _np_normal(seed, step, idx, sigma, out):
    out[:] = sigma * _np_normal_at(seed, step, idx)


def _np_mix(coeffs, hist, rows, out):
    out[:] = 0.0
    for k in range(coeffs.shape[0]):
        out += coeffs[k] * hist[rows[k]]


def _np_correlate(z, norm, coeffs, hist, rows, out):
    _np_mix(coeffs, hist, rows, out)
    np.subtract(z / norm[0], out, out=out)


def _np_precompute_tile(seed, sigma, coords, coeffs, lengths, norms,
                        col_ptr, ev_cold, cold_lo, cold_hi, d, values):
    n = norms.shape[0]
    K = coeffs.shape[1]
    L = coords.shape[0]
    dtype = values.dtype
    hist = np.zeros((max(K, 1), L), dtype=dtype)
    acc = np.zeros(L, dtype=dtype)
    z = np.empty(L, dtype=dtype)
    zh = np.empty(L, dtype=dtype)
    for t in range(n):
        _np_normal(seed, t, coords, sigma, z)
        klen = lengths[t]
        rows = (t - 1 - np.arange(klen)) % max(K, 1)
        _np_correlate(z, norms[t:t + 1], coeffs[t, :klen], hist, rows, zh)
        if K > 0:
            hist[t % K] = zh
        acc += zh
        lo, hi = col_ptr[t], col_ptr[t + 1]
        for ev in range(lo, hi):
            c = ev_cold[ev]
            if c < cold_lo or c >= cold_hi:
                continue
            base = (c - cold_lo) * d
            values[ev] = acc[base:base + d]
            acc[base:base + d] = 0.0


numba_impl = SimpleNamespace(
    normal=_nb_normal, correlate=_nb_correlate, mix=_nb_mix,
    precompute_tile=_nb_precompute_tile, philox=_nb_philox, ndtri=_nb_ndtri,
)
numpy_impl = SimpleNamespace(
    normal=_np_normal, correlate=_np_correlate, mix=_np_mix,
    precompute_tile=_np_precompute_tile, philox=_np_philox, ndtri=_np_ndtri,
)
IMPLS = {"numba": numba_impl, "numpy": numpy_impl}


def get_impl(name=None):
    """Kernel namespace for ``name`` (defaults to the active backend)."""
    try:
        return IMPLS[name or BACKEND]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; expected one of {sorted(IMPLS)}") from None


def normal(seed, step, idx, sigma, out, backend=None):
    """Fill ``out`` with ``sigma``-scaled standard normals at element ids ``idx``."""
    get_impl(backend).normal(np.uint64(seed), np.int64(step), idx, float(sigma), out)
    return out


def correlate(z, norm, coeffs, hist, rows, out, backend=None):
    get_impl(backend).correlate(z, norm, coeffs, hist, rows, out)
    return out


def mix(coeffs, hist, rows, out, backend=None):
    get_impl(backend).mix(coeffs, hist, rows, out)
    return out


def precompute_tile(seed, sigma, coords, coeffs, lengths, norms, col_ptr, ev_cold,
                    cold_lo, cold_hi, d, values, backend=None):
    get_impl(backend).precompute_tile(
        np.uint64(seed), float(sigma), coords, coeffs, lengths, norms,
        col_ptr, ev_cold, np.int64(cold_lo), np.int64(cold_hi), np.int64(d), values)
    return values
