import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from rebasin.mlp import forward
from rebasin.weights import (
    DimensionMismatch,
    PermutationSequence,
    WeightSpaceVector,
    alignment_objective,
    apply_action,
    brute_force_align,
    compose,
    extract_bias_features,
    perm_matrix,
    relaxed_action,
    transpose_inverse,
)

dims_strategy = st.lists(st.integers(1, 5), min_size=3, max_size=5).map(tuple)


def _random(dims, seed, act="relu"):
    return WeightSpaceVector.random(dims, np.random.default_rng(seed), act)


def _perm(dims, seed):
    return PermutationSequence.random(dims[1:-1], np.random.default_rng(seed))


def _equal(v, w):
    return all(np.array_equal(a, b) for a, b in zip(v.weights + v.biases, w.weights + w.biases))


def test_shape_validation():
    with pytest.raises(ValueError):
        WeightSpaceVector((1, 2, 1), (np.ones((2, 1)), np.ones((1, 3))), (np.ones(2), np.ones(1)))
    with pytest.raises(ValueError):
        WeightSpaceVector((1, 2), (np.ones((2, 1)),), (np.ones(2),))


def test_perm_must_be_bijection():
    with pytest.raises(ValueError):
        PermutationSequence((np.array([0, 0, 1]),))


def test_identity_action():
    v = _random((2, 3, 4, 1), 0)
    assert _equal(apply_action(PermutationSequence.identity((3, 4)), v), v)


def test_hand_example():
    v = WeightSpaceVector((2, 2, 1), (np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[7.0, 8.0]])),
                          (np.array([5.0, 6.0]), np.array([9.0])))
    w = apply_action(PermutationSequence((np.array([1, 0]),)), v)
    assert_array_equal(w.weights[0], [[3, 4], [1, 2]])
    assert_array_equal(w.biases[0], [6, 5])
    assert_array_equal(w.weights[1], [[8, 7]])
    assert_array_equal(w.biases[1], [9])


def test_action_matches_dense_matrices(rng):
    v = _random((3, 4, 5, 2), 1)
    g = _perm(v.dims, 2)
    P = g.matrices()
    w = apply_action(g, v)
    assert_allclose(w.weights[0], P[0] @ v.weights[0])
    assert_allclose(w.weights[1], P[1] @ v.weights[1] @ P[0].T)
    assert_allclose(w.weights[2], v.weights[2] @ P[1].T)
    assert_allclose(w.biases[1], P[1] @ v.biases[1])
    assert_array_equal(w.biases[2], v.biases[2])
    assert perm_matrix(g.perms[0])[0, g.perms[0][0]] == 1


@pytest.mark.parametrize("act", ["relu", "sine", "tanh"])
def test_action_preserves_function(act, rng):
    v = _random((3, 6, 5, 2), 3, act)
    w = apply_action(_perm(v.dims, 4), v)
    x = rng.standard_normal((10, 3))
    assert np.abs(forward(v, x) - forward(w, x)).max() < 1e-6


def test_action_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        apply_action(PermutationSequence.identity((4,)), _random((1, 3, 1), 0))


def test_compose_dense_oracle():
    g, h = _perm((1, 2, 2, 1), 5), _perm((1, 2, 2, 1), 6)
    for a, b, c in zip(g.matrices(), h.matrices(), compose(g, h).matrices()):
        assert_array_equal(c, a @ b)
    with pytest.raises(DimensionMismatch):
        compose(g, PermutationSequence.identity((3, 2)))


def test_transpose_inverse_examples():
    assert transpose_inverse(PermutationSequence.identity((3,))).is_identity()
    swap = PermutationSequence((np.array([1, 0]),))
    assert transpose_inverse(swap) == swap
    assert_array_equal(transpose_inverse(PermutationSequence((np.array([1, 2, 0]),))).perms[0], [2, 0, 1])


@settings(max_examples=100, deadline=None)
@given(dims=dims_strategy, seed=st.integers(0, 2**31))
def test_group_laws(dims, seed):
    g, h, k = (_perm(dims, seed + i) for i in range(3))
    e = PermutationSequence.identity(dims[1:-1])
    assert compose(compose(g, h), k) == compose(g, compose(h, k))
    assert compose(g, e) == g and compose(e, g) == g
    assert compose(g, transpose_inverse(g)).is_identity()
    assert compose(transpose_inverse(g), g).is_identity()
    v = _random(dims, seed)
    assert _equal(apply_action(compose(g, h), v), apply_action(g, apply_action(h, v)))


@settings(max_examples=50, deadline=None)
@given(dims=dims_strategy, seed=st.integers(0, 2**31))
def test_energy_invariance(dims, seed):
    v, v2 = _random(dims, seed), _random(dims, seed + 1)
    g, k = _perm(dims, seed + 2), _perm(dims, seed + 3)
    lhs = alignment_objective(apply_action(g, v), apply_action(g, v2), compose(compose(g, k), transpose_inverse(g)))
    assert lhs == pytest.approx(alignment_objective(v, v2, k), rel=1e-6, abs=1e-9)


def test_objective_zero_cases():
    v = _random((2, 4, 3, 1), 7)
    g = _perm(v.dims, 8)
    assert alignment_objective(v, v, PermutationSequence.identity((4, 3))) == 0.0
    # the aligning permutation for g#v is g^T
    assert alignment_objective(v, apply_action(g, v), transpose_inverse(g)) == pytest.approx(0.0, abs=1e-20)
    assert alignment_objective(v, apply_action(transpose_inverse(g), v), g) == pytest.approx(0.0, abs=1e-20)


def test_objective_dims_mismatch():
    with pytest.raises(DimensionMismatch):
        alignment_objective(_random((1, 2, 1), 0), _random((1, 3, 1), 0), PermutationSequence.identity((2,)))


def test_objective_brute_force_on_s2():
    v, v2 = _random((1, 2, 1), 9), _random((1, 2, 1), 10)
    vals = [alignment_objective(v, v2, PermutationSequence((np.array(p),))) for p in itertools.permutations(range(2))]
    k, best = brute_force_align(v, v2)
    assert best == min(vals)


def test_brute_force_examples():
    v = _random((1, 3, 3, 1), 11)
    k, val = brute_force_align(v, v)
    assert k.is_identity() and val == 0
    g = _perm(v.dims, 12)
    k, val = brute_force_align(v, apply_action(transpose_inverse(g), v))
    assert k == g and val == pytest.approx(0.0, abs=1e-20)
    v2 = _random((1, 3, 3, 1), 13)
    k, val = brute_force_align(v, v2)
    assert val <= alignment_objective(v, v2, PermutationSequence.identity((3, 3)))
    with pytest.raises(ValueError):
        brute_force_align(_random((1, 10, 10, 1), 0), _random((1, 10, 10, 1), 1))


def test_brute_force_ties_are_lexicographic():
    v = WeightSpaceVector((1, 2, 1), (np.zeros((2, 1)), np.zeros((1, 2))), (np.zeros(2), np.zeros(1)))
    k, _ = brute_force_align(v, v)
    assert k.is_identity()


@pytest.mark.parametrize("seed", range(10))
def test_brute_force_equivariance_and_swap(seed):
    dims = (1, 3, 3, 1)
    v, v2 = _random(dims, 100 + seed), _random(dims, 200 + seed)
    g, g2 = _perm(dims, 300 + seed), _perm(dims, 400 + seed)
    k, _ = brute_force_align(v, v2)
    k_moved, _ = brute_force_align(apply_action(g, v), apply_action(g2, v2))
    assert k_moved == compose(compose(g, k), transpose_inverse(g2))
    k_swapped, _ = brute_force_align(v2, v)
    assert k_swapped == transpose_inverse(k)


def test_extract_bias_features():
    v = WeightSpaceVector((2, 2, 1), (np.ones((2, 2)), np.ones((1, 2))), (np.array([5.0, 6.0]), np.array([9.0])))
    feats = extract_bias_features(v)
    assert len(feats) == 1
    assert_array_equal(feats[0], [[5], [6]])
    w = _random((1, 3, 4, 2), 14)
    assert len(extract_bias_features(w)) == 2
    g = _perm(w.dims, 15)
    for P, a, b in zip(g.matrices(), extract_bias_features(w), extract_bias_features(apply_action(g, w))):
        assert_allclose(b, P @ a)


def test_relaxed_action_reproduces_hard_action():
    v = _random((2, 4, 3, 2), 16)
    g = _perm(v.dims, 17)
    ws, bs = relaxed_action(g.matrices(), v.weights, v.biases)
    w = apply_action(g, v)
    for a, b in zip(ws + bs, w.weights + w.biases):
        assert_allclose(a, b)
