import csv
import io
import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from corrnoise.errors import ValidationError
from corrnoise.placement import MemoryTierSpec
from corrnoise.simulator import (COMPONENTS, CSV_COLUMNS, CostModelConfig, EmbStoreStats,
                                 compare_strategies, crossover_band, default_config,
                                 default_emb_stats, is_trivial, regen_noise_seconds,
                                 simulate_coalesced_emb, simulate_cpu_gemv, simulate_dp_sgd,
                                 simulate_gpu_gemv, simulate_nmp, simulate_regen, sweep, to_csv)

GB = 10**9


def small(**kw):
    base = dict(t_train_s=0.2, m=10**8, n=100, band=8, bw_pcie=20e9, bw_main=100e9, bw_cxl=10e9,
                gpu_gemv_Bps=400e9, cpu_gemv_Bps=50e9, nmp_gemv_Bps=30e9,
                tiers=MemoryTierSpec(24 * GB, 64 * GB, 512 * GB, 8 * GB))
    base.update(kw)
    return CostModelConfig(**base)


def test_dp_sgd_definition():
    cfg = small()
    rep = simulate_dp_sgd(cfg)
    assert rep.total_s == cfg.n * cfg.t_train_s
    assert all(v == 0 for k, v in rep.components.items() if k != "train")


def test_gpu_resident_history_costs_only_gemv():
    cfg = small(band=4)
    rep = simulate_gpu_gemv(cfg)
    assert rep.placement.rows_gpu == 3
    assert rep.per_iteration_s == pytest.approx(cfg.t_train_s + 3 * 4e8 / 400e9, rel=1e-15)
    assert rep.components["transfer_main"] == rep.components["transfer_cxl"] == 0


def test_offloaded_transfer_scales_with_rows():
    tiers = MemoryTierSpec(0, 10**4 * GB, 0)
    a = simulate_gpu_gemv(small(band=5, tiers=tiers))
    b = simulate_gpu_gemv(small(band=9, tiers=tiers))
    assert b.components["transfer_main"] == pytest.approx(2 * a.components["transfer_main"])


def test_gpu_gemv_better_small_cpu_better_large():
    cfg = default_config("dlrm")
    band = crossover_band(cfg, [2, 4, 8, 16, 32, 64])
    assert band is not None and band > 2
    small_b = compare_strategies(replace(cfg, band=2))
    assert small_b.report("gpu-gemv").total_s < small_b.report("cpu-gemv").total_s


def test_cpu_gemv_hidden_behind_training():
    cfg = small(t_train_s=100.0)
    assert simulate_cpu_gemv(cfg).per_iteration_s == 100.0
    assert simulate_cpu_gemv(small(m=0)).per_iteration_s == 0.2


def test_cpu_core_fraction_slowdown():
    cfg = default_config("llm", m=350_000_000, band=64)
    full = compare_strategies(cfg).ratio("cpu-gemv")
    few = compare_strategies(replace(cfg, cpu_core_fraction=0.07)).ratio("cpu-gemv")
    assert few / full > 1.5


def test_nmp_without_cxl_rows_is_cpu_gemv():
    cfg = small(band=4)
    nmp, cpu = simulate_nmp(cfg), simulate_cpu_gemv(cfg)
    assert nmp.placement.rows_cxl == 0
    assert nmp.components == cpu.components and nmp.per_iteration_s == cpu.per_iteration_s


def test_nmp_large_model_beats_baselines():
    cfg = default_config("llm", band=128)
    cmp = compare_strategies(cfg)
    nmp = cmp.report("nmp")
    assert nmp.placement.rows_cxl > 0
    best = cmp.best_baseline().total_s
    assert nmp.total_s < best and best / nmp.total_s > 1


def test_nmp_infinite_engine_leaves_transfers():
    cfg = default_config("llm", band=128, nmp_gemv_Bps=math.inf)
    rep = simulate_nmp(cfg)
    assert rep.components["gemv_nmp"] == 0
    assert rep.tracks["nmp"] == rep.components["transfer_cxl"]


def test_coalesced_requires_stats():
    with pytest.raises(ValidationError):
        simulate_coalesced_emb(small(), None)


def test_coalesced_all_hot_reduces_to_eager():
    cfg = small(band=16)
    rep = simulate_coalesced_emb(cfg, EmbStoreStats(16, 0, cfg.m, 0.0))
    assert rep.precompute_s == 0
    best = min(simulate_gpu_gemv(cfg).per_iteration_s, simulate_cpu_gemv(cfg).per_iteration_s)
    assert rep.per_iteration_s == pytest.approx(best)


def test_coalesced_speedup_grows_with_band():
    cfg, stats = default_config("dlrm"), default_emb_stats("dlrm")
    speedups = []
    for b in (16, 32, 64):
        cmp = compare_strategies(replace(cfg, band=b), stats)
        speedups.append(cmp.best_baseline().total_s / cmp.report("coalesced-emb").total_s)
    assert speedups[0] > 1
    assert speedups[0] < speedups[1] < speedups[2]


def test_trivial_case_flagged():
    cfg, stats = default_config("dlrm", band=2), default_emb_stats("dlrm")
    assert is_trivial(cfg)
    assert any("trivial" in note for note in simulate_coalesced_emb(cfg, stats).notes)
    big = replace(cfg, band=16)
    assert not any("trivial" in note for note in simulate_coalesced_emb(big, stats).notes)


def test_regen_examples():
    cfg = small(n=1)
    rep = simulate_regen(cfg)
    assert rep.total_s == pytest.approx(cfg.t_train_s + (cfg.band - 1) * cfg.row_bytes / cfg.gpu_gemv_Bps)
    ratio = regen_noise_seconds(small(n=2000)) / regen_noise_seconds(small(n=1000))
    assert abs(ratio - 4) <= 0.2
    cmp = compare_strategies(small(n=1000))
    streaming = min(cmp.report("gpu-gemv").total_s, cmp.report("cpu-gemv").total_s)
    assert cmp.report("regen").total_s > 10 * streaming


def test_band_one_collapses_everything():
    cfg = default_config("dlrm", band=1)
    cmp = compare_strategies(cfg, default_emb_stats("dlrm"))
    for rep in cmp.reports:
        assert rep.total_s == cmp.baseline_total
        assert cmp.ratio(rep.strategy) == 1.0


def test_csv_schema():
    text = to_csv(sweep(default_config("llm"), "band", [16, 64]))
    reader = csv.DictReader(io.StringIO(text))
    assert tuple(reader.fieldnames) == CSV_COLUMNS
    rows = list(reader)
    assert {r["strategy"] for r in rows if r["b_hat"] == "64"} >= {"nmp", "dp-sgd"}
    assert "nmp" not in {r["strategy"] for r in rows if r["b_hat"] == "16"}
    assert all(float(r["ratio_vs_dpsgd"]) == 1.0 for r in rows if r["strategy"] == "dp-sgd")


def test_infeasible_placement_reported():
    cfg = small(band=64, tiers=MemoryTierSpec(GB, GB, GB))
    rep = simulate_cpu_gemv(cfg)
    assert not rep.feasible and math.isinf(rep.total_s) and "capacity" in rep.notes[0]
    assert math.isfinite(simulate_regen(cfg).total_s)


def test_sweep_tier_parameter_and_errors():
    pts = sweep(small(band=64), "tiers.main_capacity_bytes", [10 * GB, 100 * GB])
    assert pts[0].report("cpu-gemv").placement.rows_main < pts[1].report("cpu-gemv").placement.rows_main
    with pytest.raises(ValidationError):
        sweep(small(), "warp_speed", [1])


def test_config_validation():
    with pytest.raises(ValidationError):
        small(bw_pcie=0)
    with pytest.raises(ValidationError):
        small(cpu_core_fraction=1.5)
    with pytest.raises(ValidationError):
        CostModelConfig.from_dict({"t_train_s": 1, "m": 1, "n": 1, "band": 1, "color": 2})
    with pytest.raises(ValidationError):
        default_config("gpt-9")
    doc = small().to_dict()
    assert CostModelConfig.from_dict(doc) == small()


def test_multi_gpu_division():
    one = small(num_gpus=1)
    four = small(num_gpus=4, m=4 * one.m, cpu_gemv_Bps=4 * one.cpu_gemv_Bps,
                 bw_main=4 * one.bw_main, bw_cxl=4 * one.bw_cxl, nmp_gemv_Bps=4 * one.nmp_gemv_Bps,
                 tiers=replace(one.tiers, main_capacity_bytes=4 * one.tiers.main_capacity_bytes,
                               cxl_capacity_bytes=4 * one.tiers.cxl_capacity_bytes))
    for fn in (simulate_gpu_gemv, simulate_cpu_gemv, simulate_nmp):
        assert fn(four).per_iteration_s == pytest.approx(fn(one).per_iteration_s)


# -- properties ------------------------------------------------------------------

rates = st.floats(1e8, 1e12)


@st.composite
def configs(draw, gpu_cap=None):
    gpu = draw(st.integers(0, 80)) * GB if gpu_cap is None else gpu_cap
    return CostModelConfig(
        t_train_s=draw(st.floats(0, 5)), m=draw(st.integers(0, 5 * 10**9)),
        n=draw(st.integers(1, 5000)), band=draw(st.integers(1, 200)),
        bw_pcie=draw(rates), bw_main=draw(rates), bw_cxl=draw(rates), gpu_gemv_Bps=draw(rates),
        cpu_gemv_Bps=draw(rates), nmp_gemv_Bps=draw(rates),
        cpu_core_fraction=draw(st.floats(0.01, 1)), num_gpus=draw(st.integers(1, 8)),
        tiers=MemoryTierSpec(gpu, draw(st.integers(0, 2000)) * GB, draw(st.integers(0, 4000)) * GB,
                             draw(st.integers(0, 20)) * GB))


def emb_for(cfg, frac):
    cold = int(cfg.m * frac) // 16 * 16
    return EmbStoreStats(16, cold, cfg.m - cold, cold / 16 * 0.01)


@given(configs(), st.floats(0, 1))
def test_band_one_collapse_property(cfg, frac):
    cfg = replace(cfg, band=1)
    cmp = compare_strategies(cfg, emb_for(cfg, frac))
    assert all(r.total_s == cmp.baseline_total for r in cmp.reports)


@given(configs(), st.floats(0, 1))
def test_overlap_rule_and_nonnegative(cfg, frac):
    for rep in compare_strategies(cfg, emb_for(cfg, frac)).reports:
        assert all(rep.components[k] >= 0 for k in COMPONENTS)
        if not rep.feasible:
            continue
        if rep.strategy == "gpu-gemv":
            assert rep.per_iteration_s == pytest.approx(sum(rep.components.values()), rel=1e-12)
        if rep.strategy in ("cpu-gemv", "nmp"):
            assert rep.per_iteration_s == max(rep.tracks.values())


@given(configs(), st.sampled_from([0.25, 0.5, 2.0, 8.0]))
def test_scale_invariance(cfg, k):
    """Rates times k and training time divided by k scales every time by 1/k."""
    scaled = replace(cfg, t_train_s=cfg.t_train_s / k, bw_pcie=cfg.bw_pcie * k,
                     bw_main=cfg.bw_main * k, bw_cxl=cfg.bw_cxl * k,
                     gpu_gemv_Bps=cfg.gpu_gemv_Bps * k, cpu_gemv_Bps=cfg.cpu_gemv_Bps * k,
                     nmp_gemv_Bps=cfg.nmp_gemv_Bps * k)
    stats = emb_for(cfg, 0.5)
    a, b = compare_strategies(cfg, stats), compare_strategies(scaled, stats)
    if a.baseline_total == 0:
        return
    for ra in a.reports:
        x, y = a.ratio(ra.strategy), b.ratio(ra.strategy)
        assert x == y or x == pytest.approx(y, rel=1e-9)


@given(configs(gpu_cap=0), st.floats(0, 1))
def test_monotone_in_band(cfg, frac):
    """Without GPU-resident rows the tier order is fixed, so more rows never cost less."""
    stats = emb_for(cfg, frac)
    a = compare_strategies(cfg, stats)
    b = compare_strategies(replace(cfg, band=cfg.band + 1), stats)
    for ra in a.reports:
        assert b.report(ra.strategy).per_iteration_s >= ra.per_iteration_s * (1 - 1e-12)
        assert b.report(ra.strategy).total_s >= ra.total_s * (1 - 1e-12)


@given(configs())
def test_gpu_gemv_and_regen_monotone_in_band(cfg):
    for fn in (simulate_gpu_gemv, simulate_regen, simulate_dp_sgd):
        assert fn(replace(cfg, band=cfg.band + 1)).per_iteration_s >= fn(cfg).per_iteration_s


@given(configs(gpu_cap=0), st.integers(1, 10**9))
def test_monotone_in_model_size(cfg, extra):
    bigger = replace(cfg, m=cfg.m + extra)
    for fn in (simulate_gpu_gemv, simulate_cpu_gemv, simulate_nmp, simulate_regen):
        assert fn(bigger).per_iteration_s >= fn(cfg).per_iteration_s * (1 - 1e-12)


@given(configs(), st.integers(2, 4000))
def test_nmp_cxl_free_equals_cpu(cfg, big_main):
    cfg = replace(cfg, tiers=replace(cfg.tiers, main_capacity_bytes=big_main * 10**12))
    nmp, cpu = simulate_nmp(cfg), simulate_cpu_gemv(cfg)
    assert nmp.components == cpu.components
