"""Analytic per-iteration latency model for correlated-noise strategies.

All GEMVs are treated as memory bound: a GEMV over ``X`` bytes of noise
history costs ``X / throughput``. Host-side resources (main memory, CPU,
CXL devices) in the config are server totals and are divided evenly over
``num_gpus``; the model parameter count ``m`` is split the same way, since
each GPU owns an equal shard of the noise history.

Overlap rules:
  * GPU-GEMV runs everything on the GPU, so its components add up.
  * CPU-GEMV and NMP run independent tracks in parallel and take the max.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from typing import Any

from .emb import CoalescedNoiseStore, HotColdSplit, tile_size_solver
from .errors import CapacityExceededError, InfeasibleError, ValidationError
from .placement import MemoryTierSpec, PlacementPlan, plan_placement

COMPONENTS = ("train", "gemv_gpu", "gemv_cpu", "gemv_nmp",
              "transfer_main", "transfer_cxl", "transfer_result")
CSV_COLUMNS = ("strategy", "b_hat", "m", "batch_size", *COMPONENTS, "precompute_s",
               "per_iteration_s", "total_s", "ratio_vs_dpsgd",
               "rows_gpu", "rows_main", "rows_cxl", "note")
STRATEGIES = ("dp-sgd", "gpu-gemv", "cpu-gemv", "nmp", "coalesced-emb", "regen")


@dataclass(frozen=True)
class CostModelConfig:
    t_train_s: float
    m: int
    n: int
    band: int
    bw_pcie: float = 25e9
    bw_main: float = 200e9
    bw_cxl: float = 24e9
    gpu_gemv_Bps: float = 200e9
    cpu_gemv_Bps: float = 80e9
    nmp_gemv_Bps: float = 48e9
    cpu_core_fraction: float = 1.0
    dtype_bytes: int = 4
    batch_size: int = 1
    #: added to ``t_train_s`` per sample, for batch-size sweeps
    t_train_per_sample_s: float = 0.0
    num_gpus: int = 1
    tiers: MemoryTierSpec = field(default_factory=MemoryTierSpec)

    def __post_init__(self):
        if isinstance(self.tiers, dict):
            object.__setattr__(self, "tiers", MemoryTierSpec(**self.tiers))
        for name in ("bw_pcie", "bw_main", "bw_cxl", "gpu_gemv_Bps", "cpu_gemv_Bps",
                     "nmp_gemv_Bps"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if not 0 < self.cpu_core_fraction <= 1:
            raise ValidationError("cpu_core_fraction must be in (0, 1]")
        if self.t_train_s < 0 or self.t_train_per_sample_s < 0:
            raise ValidationError("training time must be >= 0")
        if self.m < 0 or self.n < 1 or self.band < 1 or self.num_gpus < 1:
            raise ValidationError("need m >= 0, n >= 1, band >= 1, num_gpus >= 1")
        if self.dtype_bytes not in (2, 4, 8):
            raise ValidationError("dtype_bytes must be 2, 4 or 8")

    # per-GPU views
    @property
    def t_train(self) -> float:
        return self.t_train_s + self.t_train_per_sample_s * self.batch_size

    @property
    def m_gpu(self) -> int:
        return -(-self.m // self.num_gpus)

    @property
    def row_bytes(self) -> int:
        return self.m_gpu * self.dtype_bytes

    @property
    def history_bytes(self) -> int:
        return (self.band - 1) * self.row_bytes

    def shared(self, value: float) -> float:
        return value / self.num_gpus

    @property
    def tiers_per_gpu(self) -> MemoryTierSpec:
        t = self.tiers
        return MemoryTierSpec(t.gpu_capacity_bytes, int(self.shared(t.main_capacity_bytes)),
                              int(self.shared(t.cxl_capacity_bytes)), t.gpu_training_reserve_bytes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tiers"] = asdict(self.tiers)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "CostModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown cost model keys: {sorted(unknown)}")
        doc = dict(doc)
        if "tiers" in doc:
            tier_keys = {f.name for f in fields(MemoryTierSpec)}
            bad = set(doc["tiers"]) - tier_keys
            if bad:
                raise ValidationError(f"unknown tier keys: {sorted(bad)}")
            doc["tiers"] = MemoryTierSpec(**{k: int(v) for k, v in doc["tiers"].items()})
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None


@dataclass(frozen=True)
class EmbStoreStats:
    """What the cost model needs to know about a coalesced store."""
    d_emb: int
    cold_elems: int
    hot_elems: int
    avg_noise_entries: float

    @classmethod
    def from_store(cls, store: CoalescedNoiseStore, split: HotColdSplit) -> "EmbStoreStats":
        d = store.d_emb
        return cls(d, int(store.cold_entries.size) * d, int(split.hot.sum()) * d,
                   store.nnz / store.n)


@dataclass
class StrategyReport:
    strategy: str
    components: dict
    tracks: dict
    per_iteration_s: float
    precompute_s: float = 0.0
    n: int = 1
    placement: PlacementPlan | None = None
    notes: list = field(default_factory=list)
    feasible: bool = True

    @property
    def total_s(self) -> float:
        return self.precompute_s + self.n * self.per_iteration_s

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "components": dict(self.components),
            "tracks": dict(self.tracks),
            "per_iteration_s": self.per_iteration_s,
            "precompute_s": self.precompute_s,
            "total_s": self.total_s,
            "placement": self.placement.to_dict() if self.placement else None,
            "notes": list(self.notes),
            "feasible": self.feasible,
        }


def _components(**kw) -> dict:
    out = dict.fromkeys(COMPONENTS, 0.0)
    out.update(kw)
    return out


def _report(name, cfg, comps, tracks, placement=None, precompute=0.0, notes=()):
    return StrategyReport(name, comps, tracks, max(tracks.values()), precompute, cfg.n,
                          placement, list(notes))


def _infeasible(name: str, cfg: CostModelConfig, exc: CapacityExceededError) -> StrategyReport:
    return StrategyReport(name, _components(), {"gpu": math.inf}, math.inf, 0.0, cfg.n,
                          None, [f"capacity exceeded by {exc.shortfall_bytes} bytes"], False)


def _place(cfg: CostModelConfig, row_bytes: int, policy: str) -> PlacementPlan:
    rows = cfg.band - 1
    if rows == 0 or row_bytes == 0:
        return PlacementPlan(0, 0, 0, max(row_bytes, 1))
    return plan_placement(rows, row_bytes, cfg.tiers_per_gpu, policy)


def simulate_dp_sgd(cfg: CostModelConfig) -> StrategyReport:
    return _report("dp-sgd", cfg, _components(train=cfg.t_train), {"gpu": cfg.t_train})


def _gpu_gemv(cfg: CostModelConfig, m_gpu: int, extra_gpu: float = 0.0, name="gpu-gemv"):
    row = m_gpu * cfg.dtype_bytes
    plan = _place(cfg, row, "gpu_first")
    total_bytes = plan.rows * row
    c = _components(
        train=cfg.t_train,
        gemv_gpu=total_bytes / cfg.gpu_gemv_Bps,
        transfer_main=plan.bytes_main / cfg.bw_pcie + extra_gpu,
        transfer_cxl=plan.bytes_cxl / cfg.bw_cxl,
    )
    return _report(name, cfg, c, {"gpu": sum(c.values())}, plan)


def _cpu_gemv(cfg: CostModelConfig, m_gpu: int, extra_gpu: float = 0.0, name="cpu-gemv"):
    row = m_gpu * cfg.dtype_bytes
    plan = _place(cfg, row, "main_first")
    cpu_rate = cfg.shared(cfg.cpu_gemv_Bps) * cfg.cpu_core_fraction
    host_bytes = plan.bytes_main + plan.bytes_cxl
    c = _components(train=cfg.t_train, gemv_gpu=plan.bytes_gpu / cfg.gpu_gemv_Bps,
                    transfer_main=extra_gpu)
    tracks = {"gpu": c["train"] + c["gemv_gpu"] + c["transfer_main"]}
    if host_bytes:
        c["gemv_cpu"] = host_bytes / cpu_rate
        c["transfer_cxl"] = plan.bytes_cxl / cfg.shared(cfg.bw_cxl)
        c["transfer_result"] = row / cfg.bw_pcie
        tracks["cpu"] = c["gemv_cpu"] + c["transfer_cxl"] + c["transfer_result"]
    return _report(name, cfg, c, tracks, plan)


def simulate_gpu_gemv(cfg: CostModelConfig) -> StrategyReport:
    try:
        return _gpu_gemv(cfg, cfg.m_gpu)
    except CapacityExceededError as exc:
        return _infeasible("gpu-gemv", cfg, exc)


def simulate_cpu_gemv(cfg: CostModelConfig) -> StrategyReport:
    try:
        return _cpu_gemv(cfg, cfg.m_gpu)
    except CapacityExceededError as exc:
        return _infeasible("cpu-gemv", cfg, exc)


def simulate_nmp(cfg: CostModelConfig) -> StrategyReport:
    """GPU, CPU and the CXL-side GEMV engine run in parallel."""
    try:
        row = cfg.row_bytes
        plan = _place(cfg, row, "main_first")
    except CapacityExceededError as exc:
        return _infeasible("nmp", cfg, exc)
    if plan.rows_cxl == 0:
        rep = _cpu_gemv(cfg, cfg.m_gpu, name="nmp")
        rep.notes.append("no CXL-resident rows; identical to cpu-gemv")
        return rep
    cpu_rate = cfg.shared(cfg.cpu_gemv_Bps) * cfg.cpu_core_fraction
    c = _components(
        train=cfg.t_train,
        gemv_gpu=plan.bytes_gpu / cfg.gpu_gemv_Bps,
        # CPU GEMV over main-memory rows plus summing the partial results
        gemv_cpu=plan.bytes_main / cpu_rate + row / cfg.shared(cfg.bw_main),
        gemv_nmp=plan.bytes_cxl / cfg.shared(cfg.nmp_gemv_Bps),
        transfer_cxl=((cfg.band - 1) * cfg.dtype_bytes + row) / cfg.bw_pcie,
        transfer_result=row / cfg.bw_pcie,
    )
    tracks = {
        "gpu": c["train"] + c["gemv_gpu"],
        "cpu": c["gemv_cpu"] + c["transfer_result"],
        "nmp": c["gemv_nmp"] + c["transfer_cxl"],
    }
    return _report("nmp", cfg, c, tracks, plan)


def simulate_regen(cfg: CostModelConfig) -> StrategyReport:
    """Store only the seed; iteration t re-runs the recursion for steps 0..t."""
    if cfg.band == 1:
        rep = simulate_dp_sgd(cfg)
        rep.strategy = "regen"
        return rep
    step_s = (cfg.band - 1) * cfg.row_bytes / cfg.gpu_gemv_Bps
    noise_total = step_s * cfg.n * (cfg.n + 1) / 2
    per_gemv = noise_total / cfg.n
    c = _components(train=cfg.t_train, gemv_gpu=per_gemv)
    rep = _report("regen", cfg, c, {"gpu": cfg.t_train + per_gemv})
    rep.notes.append(f"noise_compute_s={noise_total!r}")
    return rep


def regen_noise_seconds(cfg: CostModelConfig) -> float:
    rep = simulate_regen(cfg)
    return rep.components["gemv_gpu"] * cfg.n


def is_trivial(cfg: CostModelConfig) -> bool:
    """Whole history fits in the GPU memory left after training."""
    return cfg.history_bytes <= cfg.tiers.gpu_available_bytes


def simulate_coalesced_emb(cfg: CostModelConfig, stats: EmbStoreStats | None) -> StrategyReport:
    """Pre-compute cold-entry noise once, then train with the eager path on the rest.

    One-time cost: the full GEMV volume over cold coordinates on the idle GPU
    plus writing the coalesced store to host memory over PCIe. Per iteration:
    the better of GPU-/CPU-GEMV over the remaining (hot + dense) parameters,
    with the iteration's coalesced events copied to the GPU.
    """
    if stats is None:
        raise ValidationError("coalesced-emb needs store statistics")
    if stats.cold_elems > cfg.m:
        raise ValidationError("cold_elems exceeds m")
    if cfg.band == 1:
        rep = simulate_dp_sgd(cfg)
        rep.strategy = "coalesced-emb"
        return rep
    w = cfg.dtype_bytes
    cold_gpu = -(-stats.cold_elems // cfg.num_gpus)
    gemv_bytes = cfg.n * (cfg.band - 1) * cold_gpu * w
    store_bytes = cfg.n * stats.avg_noise_entries * stats.d_emb * w / cfg.num_gpus
    notes = []
    if cfg.band > 1 and stats.cold_elems:
        try:
            tiles = tile_size_solver(cfg.tiers.gpu_capacity_bytes, cfg.band, cold_gpu,
                                     stats.d_emb, w)
            notes.append(f"tiles={tiles.num_tiles(cold_gpu)}")
        except InfeasibleError as exc:
            notes.append(f"tiling infeasible: {exc}")
            return StrategyReport("coalesced-emb", _components(), {"gpu": math.inf}, math.inf,
                                  math.inf, cfg.n, None, notes, False)
    precompute = gemv_bytes / cfg.gpu_gemv_Bps + store_bytes / cfg.bw_pcie
    event_s = stats.avg_noise_entries * stats.d_emb * w / cfg.num_gpus / cfg.bw_pcie
    m_eager = cfg.m_gpu - cold_gpu
    try:
        options = [_gpu_gemv(cfg, m_eager, event_s), _cpu_gemv(cfg, m_eager, event_s)]
    except CapacityExceededError as exc:
        return _infeasible("coalesced-emb", cfg, exc)
    best = min(options, key=lambda r: r.per_iteration_s)
    notes.append(f"eager path: {best.strategy}")
    if is_trivial(cfg):
        notes.append("trivial case: full history fits in GPU memory; pre-computation not recommended")
    return StrategyReport("coalesced-emb", best.components, best.tracks, best.per_iteration_s,
                          precompute, cfg.n, best.placement, notes)


@dataclass
class Comparison:
    config: CostModelConfig
    reports: list
    best: str

    def report(self, name: str) -> StrategyReport:
        for r in self.reports:
            if r.strategy == name:
                return r
        raise KeyError(name)

    @property
    def baseline_total(self) -> float:
        return self.report("dp-sgd").total_s

    def ratio(self, name: str) -> float:
        return self.report(name).total_s / self.baseline_total

    def best_baseline(self) -> StrategyReport:
        return min((self.report("gpu-gemv"), self.report("cpu-gemv")), key=lambda r: r.total_s)

    def rows(self) -> list[dict]:
        out = []
        base = self.baseline_total
        for r in self.reports:
            plan = r.placement
            row = {
                "strategy": r.strategy, "b_hat": self.config.band, "m": self.config.m,
                "batch_size": self.config.batch_size, **r.components,
                "precompute_s": r.precompute_s, "per_iteration_s": r.per_iteration_s,
                "total_s": r.total_s, "ratio_vs_dpsgd": r.total_s / base if base else math.inf,
                "rows_gpu": plan.rows_gpu if plan else 0,
                "rows_main": plan.rows_main if plan else 0,
                "rows_cxl": plan.rows_cxl if plan else 0,
                "note": "; ".join(r.notes),
            }
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "best": self.best,
            "rows": self.rows(),
            "reports": [r.to_dict() for r in self.reports],
        }


def compare_strategies(cfg: CostModelConfig, stats: EmbStoreStats | None = None) -> Comparison:
    """Evaluate every applicable strategy on one config.

    NMP is listed only when the placement puts rows in CXL memory, the
    coalesced strategy only when store statistics are supplied.
    """
    reports = [simulate_dp_sgd(cfg), simulate_gpu_gemv(cfg), simulate_cpu_gemv(cfg)]
    nmp = simulate_nmp(cfg)
    if nmp.placement is not None and nmp.placement.rows_cxl > 0:
        reports.append(nmp)
    if stats is not None:
        reports.append(simulate_coalesced_emb(cfg, stats))
    reports.append(simulate_regen(cfg))
    candidates = [r for r in reports if r.strategy != "dp-sgd"]
    best = min(candidates, key=lambda r: r.total_s).strategy
    return Comparison(cfg, reports, best)


def sweep(cfg: CostModelConfig, param: str, values, stats: EmbStoreStats | None = None) -> list[Comparison]:
    names = {f.name for f in fields(CostModelConfig)}
    out = []
    for v in values:
        if param in names:
            point = replace(cfg, **{param: v})
        elif param.startswith("tiers."):
            key = param.split(".", 1)[1]
            point = replace(cfg, tiers=replace(cfg.tiers, **{key: int(v)}))
        else:
            raise ValidationError(f"cannot sweep unknown parameter {param!r}")
        out.append(compare_strategies(point, stats))
    return out


def crossover_band(cfg: CostModelConfig, bands) -> int | None:
    """Smallest band at which CPU-GEMV beats GPU-GEMV, if any."""
    for cmp in sweep(cfg, "band", bands):
        if cmp.report("cpu-gemv").total_s < cmp.report("gpu-gemv").total_s:
            return cmp.config.band
    return None


def to_csv(comparisons) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for cmp in comparisons:
        for row in cmp.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def load_profiles() -> dict[str, Any]:
    text = resources.files("corrnoise").joinpath("data/defaults.json").read_text()
    return json.loads(text)


def default_config(profile: str = "dlrm", **overrides) -> CostModelConfig:
    """Shipped default profiles; the numbers are modeling assumptions."""
    profiles = load_profiles()
    if profile not in profiles:
        raise ValidationError(f"unknown profile {profile!r}; have {sorted(profiles)}")
    doc = dict(profiles[profile]["cost_model"])
    doc.update(overrides)
    return CostModelConfig.from_dict(doc)


def default_emb_stats(profile: str = "dlrm") -> EmbStoreStats | None:
    emb = load_profiles()[profile].get("emb")
    return EmbStoreStats(**emb) if emb else None
