"""Analytical WGMMA padding model: useful vs issued multiply-accumulates.

Only MACs are counted. Memory traffic, softmax ALU work and synchronization
are ignored, so ``predicted_speedup`` is an upper bound on what padding removal
alone can buy. Measured hardware speedups sit below it: at 64K context the
reported H20 gain of the transposed kernel over the query-major one is 2.78x,
against a model bound of about 4x for 16 heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

__all__ = [
    "DecodeShape",
    "GemmCost",
    "UtilizationReport",
    "WgmmaSpec",
    "padded_extent",
    "predicted_speedup",
    "utilization",
]

Axis = Literal["M", "N", "K"]
Mode = Literal["original", "etap"]


@dataclass(frozen=True)
class WgmmaSpec:
    """Tile granularity of the warpgroup MMA.

    ``m_min`` = 64 is the hardware minimum M extent. ``n_step`` = 8 and
    ``k_step`` = 16 are assumed FP16 granularities, configurable.
    ``peak_tflops`` (H20 dense FP16) is only used to translate utilization into
    an attainable-throughput bound.
    """

    m_min: int = 64
    n_step: int = 8
    k_step: int = 16
    peak_tflops: float = 148.0

    def __post_init__(self) -> None:
        for name in ("m_min", "n_step", "k_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.peak_tflops <= 0:
            raise ValueError("peak_tflops must be positive")


@dataclass(frozen=True)
class DecodeShape:
    kv_len: int
    heads: int = 16
    q_tokens: int = 1
    d_qk: int = 576
    d_v: int = 512
    batch: int = 1

    def __post_init__(self) -> None:
        for name in ("kv_len", "heads", "q_tokens", "d_qk", "d_v", "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def q(self) -> int:
        """Query rows per KV context: heads folded with query tokens."""
        return self.heads * self.q_tokens


@dataclass(frozen=True)
class GemmCost:
    name: str
    m: int
    n: int
    k: int
    padded_m: int
    padded_n: int
    padded_k: int
    batch: int

    @property
    def useful_macs(self) -> int:
        return self.batch * self.m * self.n * self.k

    @property
    def issued_macs(self) -> int:
        return self.batch * self.padded_m * self.padded_n * self.padded_k

    @property
    def m_utilization(self) -> float:
        return self.m / self.padded_m


@dataclass(frozen=True)
class UtilizationReport:
    mode: Mode
    per_gemm: tuple[GemmCost, ...]

    @property
    def useful_macs(self) -> int:
        return sum(g.useful_macs for g in self.per_gemm)

    @property
    def issued_macs(self) -> int:
        return sum(g.issued_macs for g in self.per_gemm)

    @property
    def utilization(self) -> float:
        return self.useful_macs / self.issued_macs

    @property
    def m_utilization(self) -> float:
        """M-axis efficiency of the worst GEMM."""
        return min(g.m_utilization for g in self.per_gemm)

    def attainable_tflops(self, spec: WgmmaSpec) -> float:
        return spec.peak_tflops * self.utilization


def padded_extent(logical: int, axis: Axis, spec: WgmmaSpec = WgmmaSpec()) -> int:
    if logical < 1:
        raise ValueError(f"logical extent must be >= 1, got {logical}")
    step = {"M": spec.m_min, "N": spec.n_step, "K": spec.k_step}[axis]
    return max(step, math.ceil(logical / step) * step)


def _tiled_extent(length: int, axis: Axis, spec: WgmmaSpec, block: int) -> int:
    # the KV axis is walked in block-sized tiles; only the last one can be short
    full, rest = divmod(length, block)
    total = full * padded_extent(block, axis, spec)
    if rest:
        total += padded_extent(rest, axis, spec)
    return total


def utilization(
    mode: Mode,
    shape: DecodeShape,
    spec: WgmmaSpec = WgmmaSpec(),
    block_kv: int = 64,
) -> UtilizationReport:
    """Padding cost of the score GEMM and the PV GEMM for one decode step.

    original: GEMM1 M=q, N=kv, K=d_qk; GEMM2 M=q, N=d_v, K=kv.
    etap:     GEMM1 M=kv, N=q, K=d_qk; GEMM2 M=d_v, N=q, K=kv.
    """
    if block_kv < 1:
        raise ValueError("block_kv must be >= 1")
    q, kv, b = shape.q, shape.kv_len, shape.batch

    def pad(n: int, axis: Axis) -> int:
        return padded_extent(n, axis, spec)

    def tiled(n: int, axis: Axis) -> int:
        return _tiled_extent(n, axis, spec, block_kv)

    if mode == "original":
        gemms = (
            GemmCost("qk", q, kv, shape.d_qk, pad(q, "M"), tiled(kv, "N"), pad(shape.d_qk, "K"), b),
            GemmCost("pv", q, shape.d_v, kv, pad(q, "M"), pad(shape.d_v, "N"), tiled(kv, "K"), b),
        )
    elif mode == "etap":
        gemms = (
            GemmCost("qk", kv, q, shape.d_qk, tiled(kv, "M"), pad(q, "N"), pad(shape.d_qk, "K"), b),
            GemmCost("pv", shape.d_v, q, kv, pad(shape.d_v, "M"), pad(q, "N"), tiled(kv, "K"), b),
        )
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return UtilizationReport(mode, gemms)


def transpose_cost(shape: DecodeShape) -> int:
    """MAC-equivalents charged for the single epilogue transpose (d_v * q per context)."""
    return shape.batch * shape.d_v * shape.q


def predicted_speedup(shape: DecodeShape, spec: WgmmaSpec = WgmmaSpec(), block_kv: int = 64) -> float:
    original = utilization("original", shape, spec, block_kv).issued_macs
    etap = utilization("etap", shape, spec, block_kv).issued_macs + transpose_cost(shape)
    return original / etap
