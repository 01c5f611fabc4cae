"""Streaming correlated Gaussian noise for private training, with embedding-table
noise coalescing and an analytic cost model for where the noise history lives."""
from ._accel import BACKEND
from .errors import (CapacityExceededError, CorrNoiseError, InfeasibleError, OutOfRangeError,
                     StateError, ValidationError)
from .mixing import MixingMatrix, banded_toeplitz, identity_matrix, load_matrix, random_banded
from .noise import NoiseHistory, NoisePlan, generate_all, next_correlated_noise, regen_oracle
from .placement import MemoryTierSpec, PlacementPlan, plan_placement
from .trace import AccessTrace, TraceConfig, generate_zipf_trace, ingest_trace_file
from .emb import CoalescedNoiseStore, precompute_coalesced, split_hot_cold, lazy_apply
from .trainer import ToyModel, train_eager, train_lazy
from .simulator import CostModelConfig, compare_strategies

__version__ = "0.1.0"
