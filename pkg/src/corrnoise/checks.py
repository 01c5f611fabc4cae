"""Self-contained correctness suites shared by ``corrnoise verify`` and the tests.

Each suite returns a :class:`CheckResult`; none of them raise on a failed
comparison, so a runner can report every suite in one pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .emb import (CoalescedNoiseStore, HotColdSplit, TileSpec, entry_coords,
                  precompute_coalesced, split_hot_cold)
from .errors import ValidationError
from .mixing import MixingMatrix, identity_matrix, random_banded
from .noise import NoisePlan, generate_all, regen_oracle, sample_raw_noise
from .trace import AccessTrace, TraceConfig, frequency_histogram, generate_zipf_trace
from .trainer import ToyModel, compare_runs, train_eager, train_lazy


@dataclass
class CheckResult:
    name: str
    ok: bool
    cases: int = 0
    worst: float = 0.0
    tolerance: float = 0.0
    detail: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name, "ok": self.ok, "cases": self.cases, "worst": self.worst,
                "tolerance": self.tolerance, "detail": list(self.detail)}


@dataclass
class EmbInstance:
    plan: NoisePlan
    C: MixingMatrix
    trace: AccessTrace
    split: HotColdSplit

    @property
    def d_emb(self) -> int:
        return self.plan.m // self.trace.num_entries


def factorization_error(plan: NoisePlan, C: MixingMatrix, backend=None) -> float:
    """``max|C @ Zhat - Z| / max|Z|`` over the whole run."""
    zhat = generate_all(plan, C, backend=backend)
    z = np.stack([sample_raw_noise(plan, t, backend=backend) for t in range(plan.n)])
    resid = C.dense() @ zhat - z
    return float(np.abs(resid).max() / np.abs(z).max())


def random_emb_instance(rng: np.random.Generator, num_entries: int, d_emb: int,
                        iterations: int, band: int, batch_size: int = 4,
                        zipf_alpha: float = 1.0, threshold: float | None = None,
                        dtype=np.float64) -> EmbInstance:
    """Zipf trace plus a random banded matrix; ``threshold=None`` picks one from the counts."""
    batch_size = max(batch_size, -(-num_entries // iterations))
    cfg = TraceConfig(num_entries, iterations, batch_size, 1, zipf_alpha,
                      int(rng.integers(2**31)))
    trace = generate_zipf_trace(cfg)
    C = random_banded(iterations, band, rng)
    plan = NoisePlan(int(rng.integers(2**63)), num_entries * d_emb, iterations, band,
                     float(rng.uniform(0.5, 2.0)), dtype)
    stats = frequency_histogram(trace)
    if threshold is None:
        threshold = float(np.quantile(stats.counts, rng.uniform(0.3, 1.0))) + 0.5
    return EmbInstance(plan, C, trace, split_hot_cold(stats, threshold))


def conservation_error(inst: EmbInstance, store: CoalescedNoiseStore, backend=None) -> float:
    """Per cold entry, summed events minus summed correlated noise."""
    d = inst.d_emb
    cold = store.cold_entries
    if cold.size == 0:
        return 0.0
    zhat = generate_all(inst.plan, inst.C, entry_coords(cold, d), backend)
    expect = zhat.sum(axis=0).reshape(cold.size, d)
    got = np.zeros((inst.trace.num_entries, d))
    np.add.at(got, store.row_idx, store.values)
    return float(np.abs(got[cold] - expect).max())


def check_factorization(rng, cases: int = 10, tol: float = 1e-9, backend=None) -> CheckResult:
    res = CheckResult("factorization", True, tolerance=tol)
    for _ in range(cases):
        n = int(rng.integers(1, 65))
        band = int(min(rng.choice([1, 2, 4, 8, 16]), n))
        m = int(rng.integers(1, 257))
        plan = NoisePlan(int(rng.integers(2**63)), m, n, band)
        err = factorization_error(plan, random_banded(n, band, rng), backend)
        res.cases += 1
        res.worst = max(res.worst, err)
        if not err <= tol:
            res.ok = False
            res.detail.append(f"n={n} m={m} band={band}: rel err {err:.3e}")
    return res


def check_dp_sgd_reduction(rng, n: int = 32, m: int = 256, backend=None) -> CheckResult:
    plan = NoisePlan(int(rng.integers(2**63)), m, n, 1)
    zhat = generate_all(plan, identity_matrix(n), backend=backend)
    bad = [t for t in range(n) if not np.array_equal(zhat[t], sample_raw_noise(plan, t, backend=backend))]
    return CheckResult("dp_sgd_reduction", not bad, n, float(len(bad)), 0.0,
                       [f"steps differ: {bad[:8]}"] if bad else [])


def check_regen(rng, n: int = 32, m: int = 256, band: int = 8, backend=None) -> CheckResult:
    plan = NoisePlan(int(rng.integers(2**63)), m, n, band)
    C = random_banded(n, band, rng)
    zhat = generate_all(plan, C, backend=backend)
    bad = [t for t in range(n) if not np.array_equal(zhat[t], regen_oracle(plan, C, t, backend=backend).values)]
    return CheckResult("regen_oracle", not bad, n, float(len(bad)), 0.0,
                       [f"steps differ: {bad[:8]}"] if bad else [])


def tile_partitions(n_cold: int, d: int) -> dict[str, TileSpec]:
    return {
        "1": TileSpec.partition(n_cold, 1, d),
        "2": TileSpec.partition(n_cold, 2, d),
        "5": TileSpec.partition(n_cold, 5, d),
        "per-entry": TileSpec(d, d),
    }


def check_tiling(rng, cases: int = 3, tol: float = 1e-12, backend=None, **size) -> CheckResult:
    res = CheckResult("tiling", True, tolerance=tol)
    for _ in range(cases):
        inst = random_emb_instance(rng, **_size(rng, size))
        stores = {k: precompute_coalesced(inst.plan, inst.C, inst.trace, inst.split, tiles=v,
                                          backend=backend)
                  for k, v in tile_partitions(max(inst.split.cold_entries.size, 1), inst.d_emb).items()}
        ref = stores["1"]
        for k, s in stores.items():
            same_layout = (np.array_equal(s.col_ptr, ref.col_ptr)
                           and np.array_equal(s.row_idx, ref.row_idx))
            diff = float(np.abs(s.values - ref.values).max()) if s.nnz else 0.0
            res.worst = max(res.worst, diff)
            if not same_layout or diff > tol:
                res.ok = False
                res.detail.append(f"partition {k}: layout_equal={same_layout} max diff {diff:.3e}")
        res.cases += 1
    return res


def check_conservation(rng, cases: int = 5, tol: float = 1e-9, backend=None, **size) -> CheckResult:
    res = CheckResult("conservation", True, tolerance=tol)
    for _ in range(cases):
        inst = random_emb_instance(rng, **_size(rng, size))
        store = precompute_coalesced(inst.plan, inst.C, inst.trace, inst.split, backend=backend)
        err = conservation_error(inst, store, backend)
        res.cases += 1
        res.worst = max(res.worst, err)
        if not err <= tol:
            res.ok = False
            res.detail.append(f"max |events - sum zhat| = {err:.3e}")
    return res


def check_eager_lazy(rng, cases: int = 3, tol: float = 1e-9, corrupt_store: bool = False,
                     backend=None, **size) -> CheckResult:
    """Final tables of both modes agree; ``corrupt_store`` perturbs events as a negative control."""
    res = CheckResult("eager_lazy", True, tolerance=tol)
    for i in range(cases):
        params = _size(rng, size)
        if i == 0:
            params["band"] = 1  # no-history fast path
        inst = random_emb_instance(rng, **params)
        store = precompute_coalesced(inst.plan, inst.C, inst.trace, inst.split, backend=backend)
        if corrupt_store and store.nnz:
            store.values[store.nnz // 2] += 1.0
        model = ToyModel.random(inst.trace.num_entries, inst.d_emb, int(rng.integers(2**31)),
                                learning_rate=0.05, batch_size=4)
        eager = train_eager(model, inst.plan, inst.C, inst.trace, backend=backend)
        lazy = train_lazy(model, inst.plan, inst.C, inst.trace, inst.split, store, backend=backend)
        diff = compare_runs(eager, lazy, tol)
        res.cases += 1
        res.worst = max(res.worst, diff.max_rel)
        if not diff.ok:
            res.ok = False
            res.detail.append(f"case {i}: max rel diff {diff.max_rel:.3e}")
    return res


def _size(rng, size: dict) -> dict:
    out = {
        "num_entries": int(rng.integers(4, 33)),
        "d_emb": int(rng.integers(1, 5)),
        "iterations": int(rng.integers(2, 17)),
        "band": int(rng.integers(1, 9)),
    }
    out.update(size)
    out["band"] = min(out["band"], out["iterations"])
    return out


SUITES = {
    "factorization": check_factorization,
    "dp_sgd_reduction": check_dp_sgd_reduction,
    "regen_oracle": check_regen,
    "tiling": check_tiling,
    "conservation": check_conservation,
    "eager_lazy": check_eager_lazy,
}


def run_suites(seed: int = 0, names=None, corrupt_store: bool = False, backend=None,
               size: dict | None = None) -> list[CheckResult]:
    names = list(SUITES) if names is None else list(names)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ValidationError(f"unknown suites: {sorted(unknown)}")
    size = size or {}
    results = []
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        fn = SUITES[name]
        if name == "eager_lazy":
            results.append(fn(rng, corrupt_store=corrupt_store, backend=backend, **size))
        elif name in ("tiling", "conservation"):
            results.append(fn(rng, backend=backend, **size))
        else:
            results.append(fn(rng, backend=backend))
    return results
