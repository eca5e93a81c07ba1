"""Desk-scale lab for KV-major ("transposed") decode attention.

Numerics of the query-major and KV-major blocked pipelines against a dense
binary64 reference, an analytical WGMMA padding model, and a
producer/consumer schedule simulator.
"""

from .costmodel import DecodeShape, UtilizationReport, WgmmaSpec, padded_extent, predicted_speedup, utilization
from .etap import EtapAccumulator, etap_block_update, run_etap
from .oracle import AttentionOutput, AttentionProblem, attention_ref, make_problem
from .pipesim import PipelineTrace, ScheduleConfig, simulate, validate_trace
from .tensor import (
    DimensionError,
    Matrix,
    Precision,
    count_transposes,
    gemm,
    matrix_from_seed,
    read_golden,
    rmse,
    round_half,
    transpose,
    write_golden,
)
from .tiled import SoftmaxState, TileConfig, run_standard

__version__ = "0.1.0"

__all__ = [
    "AttentionOutput",
    "AttentionProblem",
    "DecodeShape",
    "DimensionError",
    "EtapAccumulator",
    "Matrix",
    "PipelineTrace",
    "Precision",
    "ScheduleConfig",
    "SoftmaxState",
    "TileConfig",
    "UtilizationReport",
    "WgmmaSpec",
    "attention_ref",
    "count_transposes",
    "etap_block_update",
    "gemm",
    "make_problem",
    "matrix_from_seed",
    "padded_extent",
    "predicted_speedup",
    "read_golden",
    "rmse",
    "round_half",
    "run_etap",
    "run_standard",
    "simulate",
    "transpose",
    "utilization",
    "validate_trace",
    "write_golden",
]
