"""Query-major blocked attention with an online softmax (FlashAttention-2 order)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .oracle import AttentionOutput, AttentionProblem
from .tensor import Matrix, Precision, gemm_array, round_single_array, round_to

__all__ = ["SoftmaxState", "StepObserver", "TileConfig", "kv_blocks", "run_standard"]


@dataclass(frozen=True)
class TileConfig:
    b_r: int = 16
    b_c: int = 64
    stages: int = 2

    def __post_init__(self) -> None:
        for name in ("b_r", "b_c", "stages"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def t_c(self, n_kv: int) -> int:
        return math.ceil(n_kv / self.b_c)

    def t_r(self, n_q: int) -> int:
        return math.ceil(n_q / self.b_r)


@dataclass(frozen=True, eq=False)
class SoftmaxState:
    """Running max ``m`` and running sum ``l`` for one query block."""

    m: np.ndarray
    l: np.ndarray

    @classmethod
    def initial(cls, n: int) -> "SoftmaxState":
        return cls(np.full(n, -np.inf), np.zeros(n))

    def advance(self, s: np.ndarray, axis: int) -> tuple["SoftmaxState", np.ndarray, np.ndarray]:
        """Fold in one block of logits whose KV axis is ``axis``.

        Returns ``(new_state, alpha, p)`` with alpha = exp(m_old - m_new) the
        accumulator rescale factor and p = exp(s - m_new) the block's
        unnormalized probabilities. Statistics are updated before the caller
        rescales its accumulator.
        """
        m_new = np.maximum(self.m, s.max(axis=axis))
        alpha = np.exp(self.m - m_new)
        p = np.exp(s - np.expand_dims(m_new, axis))
        l_new = alpha * self.l + p.sum(axis=axis)
        return SoftmaxState(m_new, l_new), alpha, p

    def logsumexp(self) -> np.ndarray:
        return self.m + np.log(self.l)


# observer(query_block_index, kv_block_index, state_after_step)
StepObserver = Callable[[int, int, SoftmaxState], None]


def kv_blocks(n_kv: int, b_c: int) -> Iterator[tuple[int, int, int]]:
    """Yield (j, start, stop); the last block keeps its natural (short) size."""
    for j, start in enumerate(range(0, n_kv, b_c)):
        yield j, start, min(start + b_c, n_kv)


def accumulator_round(precision: Precision, acc: np.ndarray) -> np.ndarray:
    # accumulators live in binary32 registers for every narrow mode
    if precision is Precision.EXACT64:
        return acc
    return round_single_array(acc)


def run_standard(
    problem: AttentionProblem,
    tiles: TileConfig,
    *,
    observer: StepObserver | None = None,
) -> AttentionOutput:
    """Blocked attention: S = Q_i K_j^T, online softmax over j, O_i += P V_j."""
    precision = problem.precision
    Q, K, V = problem.Q.values, problem.K.values, problem.V.values
    out = np.empty((problem.n_q, problem.d_v))
    lse = np.empty(problem.n_q)

    for i, q0 in enumerate(range(0, problem.n_q, tiles.b_r)):
        q1 = min(q0 + tiles.b_r, problem.n_q)
        q_i = Q[q0:q1]
        acc = np.zeros((q1 - q0, problem.d_v))
        state = SoftmaxState.initial(q1 - q0)
        for j, k0, k1 in kv_blocks(problem.n_kv, tiles.b_c):
            s = problem.scale * gemm_array(q_i, K[k0:k1], trans_b=True, precision=precision)
            state, alpha, p = state.advance(s, axis=1)
            p = round_to(precision, p)
            acc = alpha[:, None] * acc + gemm_array(p, V[k0:k1], precision=precision)
            acc = accumulator_round(precision, acc)
            if observer is not None:
                observer(i, j, state)
        out[q0:q1] = acc / state.l[:, None]
        lse[q0:q1] = state.logsumexp()

    return AttentionOutput(Matrix(out), tuple(lse.tolist()))
