import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etaplab.oracle import attention_ref, make_problem
from etaplab.tiled import SoftmaxState, TileConfig, kv_blocks, run_standard


def max_err(a, b):
    return float(np.max(np.abs(a.O.values - b.O.values)))


def lse_err(a, b):
    return float(np.max(np.abs(np.array(a.L) - np.array(b.L))))


@pytest.fixture(scope="module")
def seed42():
    return make_problem(4, 37, 8, 8, seed=42)


def test_tile_config_validation():
    with pytest.raises(ValueError):
        TileConfig(b_r=0)
    assert TileConfig(b_c=16).t_c(37) == 3
    assert [b[1:] for b in kv_blocks(37, 16)] == [(0, 16), (16, 32), (32, 37)]


def test_single_block_is_oracle(seed42):
    out = run_standard(seed42, TileConfig(b_r=4, b_c=64))
    assert max_err(out, attention_ref(seed42)) <= 1e-12


def test_blocked_matches_oracle(seed42):
    out = run_standard(seed42, TileConfig(b_r=2, b_c=16))
    ref = attention_ref(seed42)
    assert max_err(out, ref) <= 1e-10
    assert lse_err(out, ref) <= 1e-10


def test_partition_sweep(seed42):
    outs = [run_standard(seed42, TileConfig(b_r=2, b_c=b_c)) for b_c in (5, 16, 37)]
    for a in outs:
        for b in outs:
            assert max_err(a, b) <= 1e-10


def test_rejects_bad_dims():
    with pytest.raises(ValueError):
        TileConfig(b_c=-1)


def test_softmax_state_initial_rescale_is_zero():
    state = SoftmaxState.initial(3)
    s = np.array([[0.5, -1.0, 2.0]])
    new, alpha, p = state.advance(s, axis=0)
    assert np.all(alpha == 0.0)
    np.testing.assert_array_equal(p, np.ones((1, 3)))
    np.testing.assert_array_equal(new.l, np.ones(3))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 5), st.integers(1, 60), st.integers(1, 9), st.integers(1, 9),
    st.integers(1, 8), st.integers(1, 70), st.integers(0, 10**6),
)
def test_invariants(n_q, n_kv, d_qk, d_v, b_r, b_c, seed):
    p = make_problem(n_q, n_kv, d_qk, d_v, seed)
    steps = []
    out = run_standard(p, TileConfig(b_r, b_c), observer=lambda i, j, st_: steps.append((i, j, st_)))
    ref = attention_ref(p)
    assert max_err(out, ref) <= 1e-10
    assert lse_err(out, ref) <= 1e-10
    prev = {}
    for i, j, state in steps:
        assert np.all(state.l > 0)
        if i in prev:
            assert np.all(state.m >= prev[i])
        prev[i] = state.m
    assert len(steps) == TileConfig(b_r, b_c).t_r(n_q) * TileConfig(b_r, b_c).t_c(n_kv)
