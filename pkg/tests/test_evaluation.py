import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from rebasin.evaluation import (
    InterpolationCurve,
    auc,
    barrier,
    bench_method,
    interpolation_curve,
    read_curve,
    write_curve,
)
from rebasin.mlp import TaskSpec, lerp_weights, sine_task, task_loss, train_mlp
from rebasin.weights import PermutationSequence, WeightSpaceVector, apply_action


def _v(seed, act="sine"):
    return WeightSpaceVector.random((1, 6, 5, 1), np.random.default_rng(seed), act)


TASK = sine_task(2.0, points=32, eval_points=64)


def test_identical_pair_is_flat():
    v = _v(0)
    c = interpolation_curve(v, v, TASK)
    assert_allclose(c.losses, task_loss(v, TASK, split="eval"), rtol=1e-12)
    assert barrier(c) == 0 and auc(c) == 0


def test_grid_two_is_endpoints():
    v, w = _v(1), _v(2)
    c = interpolation_curve(v, w, TASK, grid_size=2)
    assert_allclose(c.lambdas, [0, 1])
    assert c.loss_v == pytest.approx(task_loss(v, TASK, split="eval"))
    assert c.loss_v2 == pytest.approx(task_loss(w, TASK, split="eval"))
    with pytest.raises(ValueError):
        interpolation_curve(v, w, TASK, grid_size=1)


def test_losses_match_explicit_lerp():
    v, w = _v(3), _v(4)
    c = interpolation_curve(v, w, TASK, grid_size=5)
    for lam, loss in zip(c.lambdas, c.losses):
        assert loss == pytest.approx(task_loss(lerp_weights(lam, v, w), TASK, split="eval"))


def test_exact_recovery_curve_equals_self_curve():
    v = _v(5)
    g = PermutationSequence.random((6, 5), np.random.default_rng(6))
    from rebasin.weights import transpose_inverse
    w = apply_action(transpose_inverse(g), v)
    a = interpolation_curve(v, apply_action(g, w), TASK)
    b = interpolation_curve(v, v, TASK)
    assert_allclose(a.losses, b.losses, atol=1e-12)


def test_synthetic_barrier_and_auc():
    c = InterpolationCurve([0, 0.5, 1], [1, 3, 1])
    assert barrier(c) == 2.0
    assert auc(c) == pytest.approx(1.0)
    below = InterpolationCurve([0, 0.5, 1], [1, 0.2, 1])
    assert barrier(below) == 0 and auc(below) == 0


def test_curve_validation():
    with pytest.raises(ValueError):
        InterpolationCurve([0, 0.6, 0.5, 1], [1, 1, 1, 1])
    with pytest.raises(ValueError):
        InterpolationCurve([0.1, 1], [1, 1])
    with pytest.raises(ValueError):
        InterpolationCurve([0, 1], [1, np.nan])


def test_empty_eval_data():
    v = _v(7)
    empty = TaskSpec("inr_regression", "mse", np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(ValueError):
        interpolation_curve(v, v, empty)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=30))
def test_metrics_nonnegative_and_auc_below_barrier(losses):
    c = InterpolationCurve(np.linspace(0, 1, len(losses)), losses)
    assert 0 <= auc(c) <= barrier(c) + 1e-12


def test_metrics_invariant_under_joint_action():
    v, w = _v(8), _v(9)
    g = PermutationSequence.random((6, 5), np.random.default_rng(10))
    a = interpolation_curve(v, w, TASK)
    b = interpolation_curve(apply_action(g, v), apply_action(g, w), TASK)
    assert barrier(a) == pytest.approx(barrier(b), abs=1e-5)
    assert auc(a) == pytest.approx(auc(b), abs=1e-5)


def test_grid_refinement_is_stable():
    task = sine_task(3.0)
    v, w = train_mlp(0, task, steps=500), train_mlp(1, task, steps=500)
    b25 = barrier(interpolation_curve(v, w, task, 25))
    b49 = barrier(interpolation_curve(v, w, task, 49))
    assert abs(b25 - b49) < 0.05 * b49


def test_csv_round_trip(tmp_path):
    c = interpolation_curve(_v(11), _v(12), TASK, 7)
    write_curve(c, tmp_path / "c.csv", {"id": "x"})
    back = read_curve(tmp_path / "c.csv")
    assert np.array_equal(back.lambdas, c.lambdas) and np.array_equal(back.losses, c.losses)
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "lambda,loss,psi"
    meta = json.loads((tmp_path / "c.json").read_text())
    assert meta["barrier"] == barrier(c) and meta["id"] == "x"


def test_bench_method():
    pairs = [(_v(i), _v(i + 1)) for i in range(3)]
    res = bench_method("naive", lambda a, b: None, pairs, repetitions=3)
    assert res.mean < 1e-3 and res.std >= 0 and len(res.per_pair) == 3
    with pytest.raises(ValueError):
        bench_method("naive", lambda a, b: None, pairs, repetitions=0)
