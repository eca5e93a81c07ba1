"""Independent reference computations used only by the tests.

Nothing here imports the package under test.
"""

from __future__ import annotations

import math
import struct


def half_round_bits(x: float) -> float:
    """Round a binary64 value to binary16 (RNE) using integer bit arithmetic only."""
    bits = struct.unpack("<Q", struct.pack("<d", x))[0]
    sign = -1.0 if bits >> 63 else 1.0
    exp_bits = (bits >> 52) & 0x7FF
    frac = bits & ((1 << 52) - 1)
    if exp_bits == 0x7FF:
        return math.nan if frac else sign * math.inf
    if exp_bits == 0:
        # binary64 subnormals are far below the binary16 subnormal range
        mant, exp2 = frac, -1074
        top = -1075  # any value below -24 behaves the same
    else:
        mant, exp2 = frac | (1 << 52), exp_bits - 1075
        top = exp_bits - 1023  # floor(log2 |x|)
    # |x| = mant * 2**exp2; binary16 quantum at this magnitude
    q_exp = max(top, -14) - 10
    shift = q_exp - exp2
    if shift <= 0:
        n = mant << -shift
    else:
        n = mant >> shift
        rem = mant & ((1 << shift) - 1)
        half = 1 << (shift - 1)
        if rem > half or (rem == half and n & 1):
            n += 1
    value = n * 2.0**q_exp
    if value > 65504.0:
        return sign * math.inf
    return math.copysign(value, sign)


def triple_loop_gemm(a: list[list[float]], b: list[list[float]]) -> list[list[float]]:
    n, k, m = len(a), len(b), len(b[0])
    assert all(len(row) == k for row in a)
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def dense_attention(q, k, v, scale):
    """Materialize S, exponentiate, normalize, multiply; plain Python floats."""
    out, lse = [], []
    for qi in q:
        s = [scale * math.fsum(a * b for a, b in zip(qi, kj)) for kj in k]
        mx = max(s)
        e = [math.exp(x - mx) for x in s]
        total = math.fsum(e)
        p = [x / total for x in e]
        out.append([math.fsum(p[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
        lse.append(mx + math.log(total))
    return out, lse
