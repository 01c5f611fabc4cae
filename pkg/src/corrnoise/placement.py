"""Where the ``(band-1) x m`` noise history lives.

Rows are placed whole. The default policy keeps everything in main memory
when it fits there (leaving the GPU to training); otherwise it fills the GPU,
then main memory, and only spills the rest to CXL memory. ``gpu_first``
fills GPU, main, CXL in that order and is what a plain GPU-side baseline
would do.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import CapacityExceededError, ValidationError


@dataclass(frozen=True)
class MemoryTierSpec:
    gpu_capacity_bytes: int = 0
    main_capacity_bytes: int = 0
    cxl_capacity_bytes: int = 0
    #: carved out of ``gpu_capacity_bytes`` for training before any history row
    gpu_training_reserve_bytes: int = 0

    def __post_init__(self):
        for name, val in asdict(self).items():
            if val < 0:
                raise ValidationError(f"{name} must be >= 0")

    @property
    def gpu_available_bytes(self) -> int:
        return max(0, self.gpu_capacity_bytes - self.gpu_training_reserve_bytes)


@dataclass(frozen=True)
class PlacementPlan:
    rows_gpu: int
    rows_main: int
    rows_cxl: int
    row_bytes: int

    @property
    def rows(self) -> int:
        return self.rows_gpu + self.rows_main + self.rows_cxl

    @property
    def bytes_gpu(self) -> int:
        return self.rows_gpu * self.row_bytes

    @property
    def bytes_main(self) -> int:
        return self.rows_main * self.row_bytes

    @property
    def bytes_cxl(self) -> int:
        return self.rows_cxl * self.row_bytes

    def to_dict(self) -> dict:
        return {
            "rows_gpu": self.rows_gpu, "rows_main": self.rows_main, "rows_cxl": self.rows_cxl,
            "bytes_gpu": self.bytes_gpu, "bytes_main": self.bytes_main, "bytes_cxl": self.bytes_cxl,
        }


def plan_placement(history_rows: int, row_bytes: int, tiers: MemoryTierSpec,
                   policy: str = "main_first") -> PlacementPlan:
    if row_bytes <= 0:
        raise ValidationError("row_bytes must be > 0")
    if history_rows < 0:
        raise ValidationError("history_rows must be >= 0")
    if policy not in ("main_first", "gpu_first"):
        raise ValidationError(f"unknown placement policy {policy!r}")
    fit_gpu = tiers.gpu_available_bytes // row_bytes
    fit_main = tiers.main_capacity_bytes // row_bytes
    fit_cxl = tiers.cxl_capacity_bytes // row_bytes

    if policy == "main_first" and history_rows <= fit_main:
        return PlacementPlan(0, history_rows, 0, row_bytes)
    left = history_rows
    gpu = min(left, fit_gpu)
    left -= gpu
    main = min(left, fit_main)
    left -= main
    cxl = min(left, fit_cxl)
    left -= cxl
    if left:
        # whole rows only, so the shortfall counts unusable tail bytes as missing
        raise CapacityExceededError(left * row_bytes)
    return PlacementPlan(gpu, main, cxl, row_bytes)
