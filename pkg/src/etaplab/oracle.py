"""Problem definition and the dense full-precision attention reference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Matrix, Precision, matrix_from_seed, round_to

__all__ = ["AttentionOutput", "AttentionProblem", "attention_ref", "make_problem"]


@dataclass(frozen=True, eq=False)
class AttentionProblem:
    """One decode attention instance with batch and heads folded into ``n_q``.

    Q/K/V are rounded to the storage format of ``precision`` on construction,
    so every pipeline (and the oracle) sees the same operands.
    """

    Q: Matrix
    K: Matrix
    V: Matrix
    scale: float | None = None
    precision: Precision = Precision.EXACT64
    # derived
    n_q: int = field(init=False)
    n_kv: int = field(init=False)
    d_qk: int = field(init=False)
    d_v: int = field(init=False)

    def __post_init__(self) -> None:
        precision = Precision.parse(self.precision)
        object.__setattr__(self, "precision", precision)
        if self.Q.cols != self.K.cols:
            raise DimensionError(f"Q has d_qk={self.Q.cols} but K has {self.K.cols}")
        if self.K.rows != self.V.rows:
            raise DimensionError(f"K has {self.K.rows} rows but V has {self.V.rows}")
        object.__setattr__(self, "n_q", self.Q.rows)
        object.__setattr__(self, "n_kv", self.K.rows)
        object.__setattr__(self, "d_qk", self.Q.cols)
        object.__setattr__(self, "d_v", self.V.cols)
        scale = 1.0 / math.sqrt(self.d_qk) if self.scale is None else float(self.scale)
        if not scale > 0 or not math.isfinite(scale):
            raise ValueError(f"scale must be a positive finite number, got {scale}")
        object.__setattr__(self, "scale", scale)
        if precision is not Precision.EXACT64:
            for name in ("Q", "K", "V"):
                m = getattr(self, name)
                object.__setattr__(self, name, Matrix(round_to(precision, m.values)))

    def with_precision(self, precision: Precision | str) -> "AttentionProblem":
        return AttentionProblem(self.Q, self.K, self.V, self.scale, Precision.parse(precision))


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    O: Matrix
    L: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.L) != self.O.rows:
            raise DimensionError(f"L has {len(self.L)} entries for {self.O.rows} output rows")


def make_problem(
    n_q: int,
    n_kv: int,
    d_qk: int,
    d_v: int,
    seed: int,
    *,
    scale: float | None = None,
    precision: Precision | str = Precision.EXACT64,
    dist: str = "normal",
) -> AttentionProblem:
    """Seeded random problem; Q, K and V use seeds ``seed``, ``seed+1``, ``seed+2``."""
    Q = matrix_from_seed(n_q, d_qk, seed, dist)
    K = matrix_from_seed(n_kv, d_qk, seed + 1, dist)
    V = matrix_from_seed(n_kv, d_v, seed + 2, dist)
    return AttentionProblem(Q, K, V, scale, Precision.parse(precision))


def attention_ref(problem: AttentionProblem) -> AttentionOutput:
    """softmax(scale * Q K^T) V evaluated densely in binary64.

    The problem's precision only affects its (already rounded) operands; the
    reference arithmetic itself never rounds.
    """
    Q, K, V = problem.Q.values, problem.K.values, problem.V.values
    s = problem.scale * (Q @ K.T)
    m = s.max(axis=1, keepdims=True)
    p = np.exp(s - m)
    l = p.sum(axis=1, keepdims=True)
    o = (p @ V) / l
    lse = (m + np.log(l)).ravel()
    return AttentionOutput(Matrix(o), tuple(lse.tolist()))
