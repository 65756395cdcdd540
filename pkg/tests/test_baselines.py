import numpy as np
import pytest
from numpy.testing import assert_array_equal

from rebasin.baselines import (
    activation_matching,
    naive,
    sinkhorn_rebasin,
    warm_start_logits,
    weight_matching,
)
from rebasin.assignment import sinkhorn_project
from rebasin.mlp import TaskSpec, sine_task, train_mlp
from rebasin.weights import (
    DimensionMismatch,
    PermutationSequence,
    WeightSpaceVector,
    alignment_objective,
    apply_action,
    brute_force_align,
    compose,
    transpose_inverse,
)


def _v(dims, seed, act="relu"):
    return WeightSpaceVector.random(dims, np.random.default_rng(seed), act)


def _perm(dims, seed):
    return PermutationSequence.random(dims[1:-1], np.random.default_rng(seed))


def test_naive():
    v, w = _v((2, 3, 4, 1), 0), _v((2, 3, 4, 1), 1)
    res = naive(v, w)
    assert res.perm.is_identity()
    assert res.objective == pytest.approx(float(((v.flatten() - w.flatten()) ** 2).sum()))
    assert res.wall_time < 0.01
    with pytest.raises(DimensionMismatch):
        naive(v, _v((2, 4, 4, 1), 0))


def test_result_objective_is_recomputed():
    v, w = _v((2, 3, 4, 1), 2), _v((2, 3, 4, 1), 3)
    res = weight_matching(v, w)
    assert res.objective == pytest.approx(alignment_objective(v, w, res.perm), rel=1e-5)
    assert set(res.to_json()) == {"perm", "objective", "wall_time", "iterations"}


def test_weight_matching_fixed_point_and_recovery():
    v = _v((1, 4, 4, 1), 4)
    res = weight_matching(v, v)
    assert res.perm.is_identity() and res.objective == 0
    for seed in range(10):
        g = _perm(v.dims, seed)
        res = weight_matching(v, apply_action(transpose_inverse(g), v))
        assert res.perm == g
        assert res.objective == pytest.approx(0.0, abs=1e-20)


def test_weight_matching_vs_brute_force():
    better_or_equal, optimal = 0, 0
    for seed in range(100):
        v, w = _v((1, 2, 2, 1), 1000 + seed), _v((1, 2, 2, 1), 2000 + seed)
        res = weight_matching(v, w)
        _, best = brute_force_align(v, w)
        better_or_equal += res.objective <= naive(v, w).objective + 1e-12
        optimal += abs(res.objective - best) <= 1e-9 * (1 + best)
    assert better_or_equal == 100
    assert optimal >= 80


def test_weight_matching_trace_monotone():
    v, w = _v((3, 8, 8, 8, 2), 5), _v((3, 8, 8, 8, 2), 6)
    res = weight_matching(v, w)
    assert all(b <= a + 1e-9 for a, b in zip(res.trace, res.trace[1:]))


def test_activation_matching_recovery(rng):
    v = _v((3, 6, 5, 2), 7, "tanh")
    g = _perm(v.dims, 8)
    res = activation_matching(v, apply_action(transpose_inverse(g), v), rng.standard_normal((32, 3)))
    assert res.perm == g
    with pytest.raises(ValueError):
        activation_matching(v, v, np.zeros((0, 3)))


def test_activation_matching_tied_neurons_accepts_any_optimum(rng):
    # two identical hidden neurons: both assignments are optimal
    W1 = np.array([[1.0], [1.0], [-0.5]])
    v = WeightSpaceVector((1, 3, 1), (W1, np.ones((1, 3))), (np.zeros(3), np.zeros(1)), "tanh")
    probes = rng.standard_normal((16, 1))
    res = activation_matching(v, v, probes)
    acts = np.tanh(probes @ W1.T)
    Z = acts.T @ acts
    n = np.arange(3)
    assert Z[n, res.perm.perms[0]].sum() == pytest.approx(Z[n, n].sum())


def test_activation_matching_s2_brute_force(rng):
    for seed in range(20):
        v, w = _v((1, 2, 1), 30 + seed, "tanh"), _v((1, 2, 1), 60 + seed, "tanh")
        x = rng.standard_normal((10, 1))
        a, b = np.tanh(x @ v.weights[0].T + v.biases[0]), np.tanh(x @ w.weights[0].T + w.biases[0])
        Z = a.T @ b
        best = max([[0, 1], [1, 0]], key=lambda p: Z[[0, 1], p].sum())
        res = activation_matching(v, w, x)
        assert Z[[0, 1], res.perm.perms[0]].sum() == pytest.approx(Z[[0, 1], best].sum())


def test_activation_matching_equivariance(rng):
    dims = (2, 5, 4, 1)
    x = rng.standard_normal((40, 2))
    for seed in range(5):
        v, w = _v(dims, 100 + seed, "tanh"), _v(dims, 150 + seed, "tanh")
        g, g2 = _perm(dims, 300 + seed), _perm(dims, 400 + seed)
        k = activation_matching(v, w, x).perm
        moved = activation_matching(apply_action(g, v), apply_action(g2, w), x).perm
        assert moved == compose(compose(g, k), transpose_inverse(g2))


def test_weight_matching_equivariance_from_matching_start():
    # coordinate ascent is equivariant once its starting point is moved along
    dims = (2, 5, 4, 1)
    for seed in range(5):
        v, w = _v(dims, 500 + seed, "tanh"), _v(dims, 550 + seed, "tanh")
        g, g2 = _perm(dims, 600 + seed), _perm(dims, 650 + seed)
        k = weight_matching(v, w, seed=seed).perm
        start = compose(g, transpose_inverse(g2))
        moved = weight_matching(apply_action(g, v), apply_action(g2, w), seed=seed, init=start).perm
        assert moved == compose(compose(g, k), transpose_inverse(g2))


def test_weight_matching_is_coordinatewise_optimal():
    import itertools
    dims = (2, 5, 4, 1)
    for seed in range(5):
        v, w = _v(dims, 700 + seed, "tanh"), _v(dims, 750 + seed, "tanh")
        res = weight_matching(v, w)
        for layer, d in enumerate(dims[1:-1]):
            for q in itertools.permutations(range(d)):
                perms = list(res.perm.perms)
                perms[layer] = np.array(q)
                assert alignment_objective(v, w, PermutationSequence(tuple(perms))) >= res.objective - 1e-9


def _inr_task():
    return sine_task(3.0, points=64)


def test_sinkhorn_zero_iterations_is_tie_break():
    v = _v((1, 4, 4, 1), 9, "sine")
    res = sinkhorn_rebasin(v, v, _inr_task(), iters=0)
    assert res.perm.is_identity()


def test_sinkhorn_rebasin_equivariant():
    task = _inr_task()
    v, w = train_mlp(0, task, steps=50), train_mlp(1, task, steps=50)
    dims = v.dims
    g, g2 = _perm(dims, 10), _perm(dims, 11)
    a = sinkhorn_rebasin(v, w, task, iters=15, seed=3)
    b = sinkhorn_rebasin(apply_action(g, v), apply_action(g2, w), task, iters=15, seed=3)
    assert b.perm == compose(compose(g, a.perm), transpose_inverse(g2))


def test_sinkhorn_rebasin_improves_task_loss_trace():
    task = _inr_task()
    v, w = train_mlp(0, task, steps=300), train_mlp(1, task, steps=300)
    res = sinkhorn_rebasin(v, w, task, iters=60, seed=0)
    assert len(res.trace) == 60
    assert np.mean(res.trace[-10:]) < np.mean(res.trace[:10])


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_sinkhorn_rebasin_diverges_loudly():
    v = _v((1, 4, 4, 1), 12, "relu").map(lambda a: a * 1e30)
    task = TaskSpec("inr_regression", "mse", np.ones((4, 1)), np.ones((4, 1)))
    from rebasin.autodiff import NonFiniteError
    with pytest.raises((NonFiniteError, FloatingPointError)):
        sinkhorn_rebasin(v, v, task, iters=5)


def test_warm_start_logits_round_to_the_permutation():
    g = _perm((1, 6, 5, 1), 13)
    S = [sinkhorn_project(x) for x in warm_start_logits(g)]
    from rebasin.assignment import round_stack
    assert round_stack(S) == g
    assert_array_equal(warm_start_logits(g, 2.0)[0].max(), 2.0)
