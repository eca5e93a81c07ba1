"""KV-major ("transposed") attention with split output accumulators.

Every block step works on S^T = K_j Q_i^T, so the long KV axis is the GEMM M
dimension and the short query axis is N. The output is accumulated as a
d_v x b_r matrix split along d_v into two halves that share one softmax state,
then transposed exactly once per query block in the epilogue.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .oracle import AttentionOutput, AttentionProblem
from .tensor import (
    DimensionError,
    Matrix,
    Precision,
    gemm_array,
    round_to,
    transpose_array,
)
from .tiled import SoftmaxState, StepObserver, TileConfig, accumulator_round, kv_blocks

__all__ = ["EtapAccumulator", "etap_block_update", "run_etap", "split_rows"]

Half = Literal["lower", "upper"]
Fault = Literal["rescale-sign"]


def split_rows(d_v: int) -> int:
    """Row count of the lower half; odd d_v puts the extra row there."""
    return (d_v + 1) // 2


@dataclass(frozen=True, eq=False)
class EtapAccumulator:
    """Transposed output accumulator O_i = [lower; upper] plus its softmax state.

    ``lower`` is ceil(d_v/2) x b_r and ``upper`` is floor(d_v/2) x b_r (zero rows
    when d_v == 1). Both halves are always rescaled by the same factors.
    """

    lower: np.ndarray
    upper: np.ndarray
    state: SoftmaxState

    @classmethod
    def zeros(cls, d_v: int, b_r: int) -> "EtapAccumulator":
        h = split_rows(d_v)
        return cls(np.zeros((h, b_r)), np.zeros((d_v - h, b_r)), SoftmaxState.initial(b_r))

    @property
    def d_v(self) -> int:
        return self.lower.shape[0] + self.upper.shape[0]

    @property
    def b_r(self) -> int:
        return self.lower.shape[1]

    def full(self) -> np.ndarray:
        """The d_v x b_r accumulator with the halves stacked."""
        return np.vstack([self.lower, self.upper])


def _update_half(
    half: np.ndarray,
    alpha: np.ndarray,
    v_half: np.ndarray,
    p: np.ndarray,
    precision: Precision,
) -> np.ndarray:
    # column scaling: each column is one query, rescaled by its own factor
    out = alpha[None, :] * half + gemm_array(v_half, p, trans_a=True, precision=precision)
    return accumulator_round(precision, out)


def _block_update(
    acc: EtapAccumulator,
    k_j: np.ndarray,
    v_j: np.ndarray,
    q_i: np.ndarray,
    scale: float,
    precision: Precision,
    order: Sequence[Half] = ("lower", "upper"),
    fault: Fault | None = None,
) -> EtapAccumulator:
    s_t = scale * gemm_array(k_j, q_i, trans_b=True, precision=precision)
    state, alpha, p = acc.state.advance(s_t, axis=0)
    p = round_to(precision, p)

    h = acc.lower.shape[0]
    halves = {"lower": acc.lower, "upper": acc.upper}
    v_parts = {"lower": v_j[:, :h], "upper": v_j[:, h:]}
    if fault == "rescale-sign":
        # inverted factor exp(m_new - m_old): blows up stale contributions
        with np.errstate(over="ignore", invalid="ignore"):
            alpha = np.exp(state.m - acc.state.m)
            for name in order:
                halves[name] = _update_half(halves[name], alpha, v_parts[name], p, precision)
    else:
        for name in order:
            halves[name] = _update_half(halves[name], alpha, v_parts[name], p, precision)
    return EtapAccumulator(halves["lower"], halves["upper"], state)


def etap_block_update(
    acc: EtapAccumulator,
    K_j: Matrix,
    V_j: Matrix,
    Q_i: Matrix,
    scale: float,
    precision: Precision | str = Precision.EXACT64,
    *,
    order: Sequence[Half] = ("lower", "upper"),
) -> EtapAccumulator:
    """Fold one KV block into a transposed accumulator.

    ``order`` picks which half is updated first; the result does not depend on it.
    """
    if K_j.rows != V_j.rows:
        raise DimensionError(f"K_j has {K_j.rows} rows but V_j has {V_j.rows}")
    if K_j.cols != Q_i.cols:
        raise DimensionError(f"K_j has d_qk={K_j.cols} but Q_i has {Q_i.cols}")
    if Q_i.rows != acc.b_r:
        raise DimensionError(f"Q_i has {Q_i.rows} rows but accumulator holds {acc.b_r} queries")
    if V_j.cols != acc.d_v:
        raise DimensionError(f"V_j has d_v={V_j.cols} but accumulator holds {acc.d_v}")
    if sorted(order) != ["lower", "upper"]:
        raise ValueError(f"order must name each half once, got {order!r}")
    return _block_update(
        acc, K_j.values, V_j.values, Q_i.values, float(scale), Precision.parse(precision), order
    )


def run_etap(
    problem: AttentionProblem,
    tiles: TileConfig,
    *,
    observer: StepObserver | None = None,
    fault: Fault | None = None,
) -> AttentionOutput:
    """Attention via S^T = K Q^T, P^T = softmax(S^T), O^T = V^T P^T, O = (O^T)^T.

    ``fault`` injects a deliberate defect for negative-control testing and must
    stay ``None`` in normal use.
    """
    precision = problem.precision
    Q, K, V = problem.Q.values, problem.K.values, problem.V.values
    out = np.empty((problem.n_q, problem.d_v))
    lse = np.empty(problem.n_q)

    for i, q0 in enumerate(range(0, problem.n_q, tiles.b_r)):
        q1 = min(q0 + tiles.b_r, problem.n_q)
        q_i = Q[q0:q1]
        acc = EtapAccumulator.zeros(problem.d_v, q1 - q0)
        for j, k0, k1 in kv_blocks(problem.n_kv, tiles.b_c):
            acc = _block_update(acc, K[k0:k1], V[k0:k1], q_i, problem.scale, precision, fault=fault)
            if observer is not None:
                observer(i, j, acc.state)
        o_t = acc.full() / acc.state.l[None, :]
        out[q0:q1] = transpose_array(o_t)
        lse[q0:q1] = acc.state.logsumexp()

    return AttentionOutput(Matrix(out), tuple(lse.tolist()))
