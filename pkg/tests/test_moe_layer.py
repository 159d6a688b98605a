import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from dcmoe.moe_layer import (
    aux_load_balance_loss,
    ffn_np,
    forward,
    gate,
    layer_aux_loss,
    select_top_k,
    select_top_p,
    top_p_mask,
)
from dcmoe.numcore import NumericError, Rng, Tensor, grad_check, parameter, tensor_sum
from oracles import brute_force_top_p, dense_moe_oracle, random_pool

rows = st.integers(2, 12).flatmap(
    lambda e: st.lists(st.floats(0.0, 1.0), min_size=e, max_size=e).filter(lambda v: sum(v) > 1e-3))


def exact_mass(values) -> Fraction:
    return sum((Fraction(float(v)) for v in values), Fraction(0))


def normalise(v):
    v = np.asarray(v, dtype=np.float64)
    return v / v.sum()


# ---------------------------------------------------------------- gate

def test_zero_gate_is_uniform():
    pool, _ = random_pool(Rng(0), n_routed=8, n_null=1, d=16)
    pool.gate_weights.data[:] = 0.0
    probs = gate(pool, Tensor(Rng(1).normal((5, 16)))).data
    assert probs.shape == (5, 9)
    assert np.all(probs == 1 / 9)


def test_gate_matches_matmul_softmax_oracle():
    pool, arr = random_pool(Rng(2), n_routed=8, n_null=1, d=16)
    x = Rng(3).normal((7, 16))
    probs = gate(pool, Tensor(x)).data
    assert np.max(np.abs(probs - softmax(x @ arr["gate"], axis=1))) <= 1e-10
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-9)


def test_gate_shape_mismatch():
    pool, _ = random_pool(Rng(0), d=8)
    with pytest.raises(ValueError):
        gate(pool, Tensor(np.zeros((2, 5))))


# ----------------------------------------------------------- selection

def test_top_p_worked_example():
    dec = select_top_p([0.5, 0.3, 0.15, 0.05], 0.7)
    assert dec.selected == (0, 1)
    assert np.allclose(dec.mix_weights, [0.625, 0.375], rtol=0, atol=1e-15)


@pytest.mark.parametrize("p", [0.01, 0.5, 0.7, 1.0])
def test_top_p_one_hot(p):
    dec = select_top_p([1.0, 0.0, 0.0, 0.0, 0.0], p)
    assert dec.selected == (0,) and dec.mix_weights.tolist() == [1.0]


def test_top_p_uniform_eight_selects_six():
    dec = select_top_p(np.full(8, 1 / 8), 0.7)
    assert len(dec.selected) == 6
    assert dec.selected == (0, 1, 2, 3, 4, 5)


def test_top_p_full_threshold_selects_all():
    row = normalise(Rng(4).uniform(6, 0.1, 1.0))
    assert sorted(select_top_p(row, 1.0).selected) == list(range(6))


@pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
def test_top_p_invalid_threshold(p):
    with pytest.raises(ValueError):
        select_top_p([0.5, 0.5], p)


def test_top_p_rejects_non_distribution():
    with pytest.raises(ValueError):
        select_top_p([0.5, 0.6], 0.7)


@settings(max_examples=300, deadline=None)
@given(rows, st.floats(0.01, 1.0))
def test_top_p_matches_brute_force(v, p):
    row = normalise(v)
    assert select_top_p(row, p).selected == tuple(sorted(brute_force_top_p(row, p), key=lambda i: (-row[i], i)))


@settings(max_examples=300, deadline=None)
@given(rows, st.floats(0.01, 1.0))
def test_top_p_minimal_and_weights_normalised(v, p):
    row = normalise(v)
    dec = select_top_p(row, p)
    sel = np.array(dec.selected)
    q = Fraction(p)
    assert exact_mass(row[sel]) >= q or len(sel) == len(row)
    if len(sel) > 1 and exact_mass(row) >= q:
        smallest = sel[np.argmin(row[sel])]
        assert exact_mass(row[sel[sel != smallest]]) < q
    assert abs(dec.mix_weights.sum() - 1) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(rows, st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_top_p_monotone_in_threshold(v, p1, p2):
    row = normalise(v)
    lo, hi = sorted((p1, p2))
    assert set(select_top_p(row, lo).selected) <= set(select_top_p(row, hi).selected)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.floats(0.05, 1.0), st.integers(0, 2 ** 31))
def test_count_bound_without_null_experts(n_routed, p, seed):
    row = Rng(seed).dirichlet(np.full(n_routed, 0.5))
    k = select_top_p(row, p, n_routed=n_routed).n_routed_active
    assert 1 <= k <= math.ceil(p * n_routed - 1e-12)


def test_null_only_selection_counts_zero_routed():
    row = np.array([0.1, 0.1, 0.8])
    dec = select_top_p(row, 0.7, n_routed=2)
    assert dec.selected == (2,) and dec.n_routed_active == 0


def test_top_k_examples():
    row = normalise([0.1, 0.4, 0.2, 0.3])
    full = select_top_k(row, 4)
    assert sorted(full.selected) == [0, 1, 2, 3]
    assert np.allclose(full.mix_weights, row[list(full.selected)], atol=1e-15)
    one = select_top_k(row, 1)
    assert one.selected == (1,) and one.mix_weights.tolist() == [1.0]
    for k in (0, 5):
        with pytest.raises(ValueError):
            select_top_k(row, k)


@settings(max_examples=100, deadline=None)
@given(rows)
def test_top_k_matches_sort_oracle(v):
    row = normalise(v)
    ref = sorted(range(len(row)), key=lambda i: (-row[i], i))[:2]
    dec = select_top_k(row, 2)
    assert list(dec.selected) == ref
    assert np.allclose(dec.mix_weights, row[ref] / row[ref].sum(), atol=1e-15)


def test_top_p_ties_prefer_lower_index():
    assert select_top_p([0.25, 0.25, 0.25, 0.25], 0.5).selected == (0, 1)
    assert select_top_p([0.3, 0.2, 0.2, 0.3], 0.7).selected == (0, 3, 1)


# ------------------------------------------------------------- forward

def test_null_only_token_without_shared_outputs_zero():
    pool, _ = random_pool(Rng(5), n_routed=3, n_null=1, n_shared=0)
    x = Tensor(Rng(6).normal((4, 8)))
    mask = np.zeros((4, 4), dtype=bool)
    mask[:, 3] = True
    out = forward(pool, x, mask=mask)
    assert np.all(out.output.data == 0.0)
    assert out.n_routed_active.tolist() == [0, 0, 0, 0]


def test_degenerate_routing_reproduces_single_expert():
    pool, arr = random_pool(Rng(7), n_routed=4, n_null=1, n_shared=1)
    pool.gate_offset = np.array([0.0, 0.0, 60.0, 0.0, 0.0])
    x = Rng(8).normal((5, 8))
    out = forward(pool, Tensor(x))
    ref = ffn_np(arr["routed"][2], x) + ffn_np(arr["shared"][0], x)
    assert np.all(out.mask[:, 2]) and out.mask.sum() == 5
    assert np.max(np.abs(out.output.data - ref)) < 1e-12


@pytest.mark.parametrize("null_in_denominator", [True, False])
@pytest.mark.parametrize("router", ["top_p", "top_k"])
def test_forward_matches_dense_oracle(null_in_denominator, router):
    pool, arr = random_pool(Rng(9), d=12, n_routed=6, n_null=2, n_shared=2, hidden=10,
                            null_in_denominator=null_in_denominator)
    x = Rng(10).normal((64, 12))
    out = forward(pool, Tensor(x), router=router, top_k=3)
    ref = dense_moe_oracle(arr, x, out.mask, 6, null_in_denominator)
    assert np.max(np.abs(out.output.data - ref)) <= 1e-10
    w = out.weights.data
    sums = w.sum(axis=1) if null_in_denominator else w[:, :6].sum(axis=1)
    routed_any = out.mask[:, :6].any(axis=1)
    expected = np.ones(64) if null_in_denominator else routed_any.astype(float)
    assert np.max(np.abs(sums - expected)) <= 1e-9


def test_forward_mask_shape_checked():
    pool, _ = random_pool(Rng(0))
    with pytest.raises(ValueError):
        forward(pool, Tensor(np.zeros((3, 8))), mask=np.ones((3, 2), dtype=bool))


def test_forward_reports_layer_and_token_on_non_finite():
    pool, _ = random_pool(Rng(11), n_shared=1)
    pool.shared[0].b_out.data[:] = 1e308
    pool.shared[0].w_out.data[:] = 1e308
    with pytest.raises(NumericError, match="layer 3, token 0"):
        forward(pool, Tensor(np.ones((2, 8))), layer=3)


def test_frozen_selection_gradients():
    pool, _ = random_pool(Rng(12), d=6, n_routed=4, n_null=1, n_shared=1, hidden=5, p=0.8)
    x = parameter(Rng(13).normal((10, 6)))
    target = Tensor(Rng(14).normal((10, 6)))
    mask = forward(pool, x).mask

    def loss():
        out = forward(pool, x, mask=mask)
        diff = out.output - target
        return tensor_sum(diff * diff) + 0.1 * layer_aux_loss(out)

    params = [pool.gate_weights, x] + [t for e in pool.routed + pool.shared for t in e.tensors().values()]
    assert grad_check(loss, params, n_samples=6) < 1e-4


# ------------------------------------------------------------- aux loss

def test_aux_loss_uniform_is_one():
    e = 9
    assert abs(aux_load_balance_loss(np.full(e, 1 / e), Tensor(np.full(e, 1 / e))).item() - 1) < 1e-15


def test_aux_loss_collapse_is_pool_size():
    e = 9
    frac = np.eye(e)[0]
    probs = np.full(e, 1e-6)
    probs[0] = 1 - 8e-6
    assert abs(aux_load_balance_loss(frac, Tensor(probs)).item() - e) < 1e-4


def test_aux_loss_matches_direct_summation():
    pool, _ = random_pool(Rng(15), n_routed=8, n_null=1, d=8)
    x = Rng(16).normal((40, 8))
    out = forward(pool, Tensor(x))
    probs = softmax(x @ pool.gate_weights.data, axis=1)
    f = out.mask.sum(axis=0) / out.mask.sum()
    ref = 9 * sum(f[i] * probs[:, i].mean() for i in range(9))
    assert abs(layer_aux_loss(out).item() - ref) <= 1e-10


def test_aux_loss_gradient_only_through_probs():
    probs = parameter(normalise([1, 2, 3]))
    frac = np.array([0.2, 0.3, 0.5])
    loss = aux_load_balance_loss(frac, probs)
    loss.backward()
    assert np.allclose(probs.grad, 3 * frac)


def test_aux_loss_empty_batch():
    with pytest.raises(ValueError):
        aux_load_balance_loss(np.zeros(3), Tensor(np.zeros(3)))


def test_top_p_mask_batch_equals_rowwise():
    probs = softmax(Rng(17).normal((50, 7), 2.0), axis=1)
    m = top_p_mask(probs, 0.6)
    for r in range(50):
        assert set(np.flatnonzero(m[r])) == set(select_top_p(probs[r], 0.6).selected)
