import numpy as np
import pytest
from numpy.testing import assert_allclose

from rebasin import autodiff as ad
from rebasin.deep_align import (
    AlignerConfig,
    DeepAlign,
    DWSLayer,
    Features,
    align_forward_infer,
    align_forward_train,
    align_scores,
    dws_layer,
    encode,
    generalized_outer_product,
    infer_batch,
    lift,
)
from rebasin.mlp import init_mlp
from rebasin.weights import (
    PermutationSequence,
    WeightSpaceVector,
    apply_action,
    compose,
    transpose_inverse,
)

DIMS = (2, 5, 4, 3)
SMALL = AlignerConfig(hidden=8, out=16, depth=2)


def _v(seed, dims=DIMS, act="tanh"):
    return WeightSpaceVector.random(dims, np.random.default_rng(seed), act)


def _perm(seed, dims=DIMS):
    return PermutationSequence.random(dims[1:-1], np.random.default_rng(seed))


def _random_features(rng, dims, c):
    M = len(dims) - 1
    ws, bs = [], []
    for k in range(M):
        rows = dims[k + 1] if k < M - 1 else 1
        cols = dims[k] if k > 0 else 1
        cin = c * (dims[0] if k == 0 else 1) * (dims[-1] if k == M - 1 else 1)
        ws.append(rng.standard_normal((1, rows, cols, cin)))
        brows = dims[k + 1] if k < M - 1 else 1
        bs.append(rng.standard_normal((1, brows, c * (dims[-1] if k == M - 1 else 1))))
    return Features(ws, bs)


def _permute_features(f: Features, g: PermutationSequence) -> Features:
    M = len(f.ws)
    ws, bs = [], []
    for k in range(M):
        w, b = f.ws[k], f.bs[k]
        if k < M - 1:
            w = w[:, g.perms[k]]
            b = b[:, g.perms[k]] if b is not None else None
        if k > 0:
            w = w[:, :, g.perms[k - 1]]
        ws.append(w)
        bs.append(b)
    return Features(ws, bs)


def _data(f: Features):
    return [ad._data(x) for x in f.ws + f.bs if x is not None]


def _layer(dims, c_in, c_out, seed, bias_only=False):
    M = len(dims) - 1
    in_w = [c_in] * M
    in_b = [c_in] * M
    in_w[0] = c_in * dims[0]
    in_w[-1] = c_in * dims[-1]
    in_b[-1] = c_in * dims[-1]
    with ad.precision("f64"):
        return DWSLayer(in_w, in_b, c_out, np.random.default_rng(seed), bias_only)


def test_zero_params_give_zero_output(f64):
    layer = _layer(DIMS, 2, 3, 0)
    for t in layer.params.values():
        t.data[...] = 0
    out = dws_layer(_random_features(np.random.default_rng(0), DIMS, 2), layer)
    assert all(np.all(x == 0) for x in _data(out))


def test_identity_passthrough(f64):
    c = 3
    dims = (1, 4, 4, 1)
    layer = _layer(dims, c, c, 1)
    for name, t in layer.params.items():
        t.data[...] = 0
        if name.endswith(".self"):
            t.data[...] = np.eye(c)
    feats = _random_features(np.random.default_rng(1), dims, c)
    out = dws_layer(feats, layer)
    for a, b in zip(out.ws, feats.ws):
        assert_allclose(a.data, b)


def test_layer_equivariance_100_draws(f64):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        dims = (int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6)),
                int(rng.integers(2, 5)), int(rng.integers(1, 3)))
        layer = _layer(dims, 2, 3, seed)
        f = _random_features(rng, dims, 2)
        g = PermutationSequence.random(dims[1:-1], rng)
        lhs = _data(dws_layer(_permute_features(f, g), layer))
        rhs = _data(_permute_features(dws_layer(f, layer), g))
        worst = max(worst, max(np.abs(a - b).max() for a, b in zip(lhs, rhs)))
    assert worst < 1e-5


def test_lift_of_action_is_permuted_lift():
    v, g = _v(0), _perm(1)
    a = lift([w[None] for w in v.weights], [b[None] for b in v.biases])
    b = lift([w[None] for w in apply_action(g, v).weights], [x[None] for x in apply_action(g, v).biases])
    for x, y in zip(_data(_permute_features(a, g)), _data(b)):
        assert_allclose(x, y)


def test_encode_siamese_and_equivariant(f64):
    model = DeepAlign(DIMS, SMALL, seed=0)
    v, v2 = _v(1), _v(2)
    e1, e2 = encode(v, v2, model)
    s1, s2 = encode(v2, v, model)
    for a, b in zip(_data(e1) + _data(e2), _data(s2) + _data(s1)):
        assert_allclose(a, b, atol=1e-12)
    g, g2 = _perm(3), _perm(4)
    m1, m2 = encode(apply_action(g, v), apply_action(g2, v2), model)
    for a, b in zip(_data(m1) + _data(m2), _data(_permute_features(e1, g)) + _data(_permute_features(e2, g2))):
        assert_allclose(a, b, atol=1e-10)


def test_generalized_outer_product_examples():
    rng = np.random.default_rng(5)
    a = [rng.standard_normal((4, 3))]
    Q = generalized_outer_product(a, a, 1.7)[0].data
    assert_allclose(np.diag(Q), 1.7**2, rtol=1e-6)
    assert np.abs(Q).max() <= 1.7**2 * (1 + 1e-6)
    orth = generalized_outer_product([np.array([[1.0, 0.0]])], [np.array([[0.0, 2.0]])], 1.0)[0].data
    assert orth[0, 0] == 0
    b = [rng.standard_normal((4, 3))]
    assert_allclose(generalized_outer_product(a, b, 2.0)[0].data.T, generalized_outer_product(b, a, 2.0)[0].data)
    zero = generalized_outer_product([np.zeros((4, 3))], b, 1.0)[0].data
    assert np.all(np.isfinite(zero)) and np.all(zero == 0)


def test_train_mode_is_doubly_stochastic_and_equivariant(f64):
    model = DeepAlign(DIMS, SMALL, seed=1)
    worst_eq, worst_t = 0.0, 0.0
    for seed in range(20):
        v, v2 = _v(10 + seed), _v(50 + seed)
        g, g2 = _perm(100 + seed), _perm(200 + seed)
        S = align_forward_train(v, v2, model)
        for s in S:
            assert np.abs(s.sum(0) - 1).max() < 1e-4 and np.abs(s.sum(1) - 1).max() < 1e-4
        moved = align_forward_train(apply_action(g, v), apply_action(g2, v2), model)
        for P, P2, s, m in zip(g.matrices(), g2.matrices(), S, moved):
            worst_eq = max(worst_eq, np.abs(m - P @ s @ P2.T).max())
        swapped = align_forward_train(v2, v, model)
        for s, w in zip(S, swapped):
            worst_t = max(worst_t, np.abs(s - w.T).max())
    assert worst_eq < 1e-5
    assert worst_t < 1e-6


def test_scores_bounded_by_s_squared():
    model = DeepAlign(DIMS, SMALL, seed=2)
    model.scale_s.data[...] = 2.5
    Q = align_scores(_v(3), _v(4), model)
    assert max(np.abs(q).max() for q in Q) <= 2.5**2 * (1 + 1e-5)
    self_Q = align_scores(_v(3), _v(3), model)
    for q in self_Q:
        assert_allclose(np.diag(q), 2.5**2, rtol=1e-5)


def test_exactness_on_sine_inrs():
    model = DeepAlign((1, 32, 32, 1), AlignerConfig(), seed=0)
    hits = 0
    for seed in range(50):
        v = init_mlp((1, 32, 32, 1), np.random.default_rng(seed), "sine")
        g = PermutationSequence.random((32, 32), np.random.default_rng(1000 + seed))
        hits += align_forward_infer(v, apply_action(transpose_inverse(g), v), model) == g
    assert hits == 50


def test_hard_output_equivariance_and_swap():
    model = DeepAlign(DIMS, SMALL, seed=3)
    for seed in range(10):
        v, v2 = _v(300 + seed), _v(400 + seed)
        g, g2 = _perm(500 + seed), _perm(600 + seed)
        k = align_forward_infer(v, v2, model)
        assert align_forward_infer(apply_action(g, v), apply_action(g2, v2), model) == \
            compose(compose(g, k), transpose_inverse(g2))
        assert align_forward_infer(v2, v, model) == transpose_inverse(k)


def test_batch_inference_matches_single():
    model = DeepAlign(DIMS, SMALL, seed=4)
    pairs = [(_v(s), _v(s + 20)) for s in range(5)]
    batch = infer_batch(pairs, model)
    assert all(b == align_forward_infer(v, w, model) for b, (v, w) in zip(batch, pairs))


def test_inference_on_raw_and_sinkhorn_scores_agree_generically():
    model = DeepAlign(DIMS, SMALL, seed=5)
    sk = DeepAlign(DIMS, AlignerConfig(hidden=8, out=16, depth=2, infer_on_sinkhorn=True), seed=5)
    agree = sum(align_forward_infer(_v(s), _v(s + 40), model) == align_forward_infer(_v(s), _v(s + 40), sk)
                for s in range(20))
    assert agree >= 18


def test_state_dict_round_trip():
    a = DeepAlign(DIMS, SMALL, seed=6)
    b = DeepAlign(DIMS, SMALL, seed=7)
    a.fit_normalization([_v(1), _v(2)])
    b.load_state_dict(a.state_dict())
    v, w = _v(8), _v(9)
    for x, y in zip(align_scores(v, w, a), align_scores(v, w, b)):
        assert np.array_equal(x, y)
    with pytest.raises(ValueError):
        a.load_state_dict({**a.state_dict(), "scale_s": np.ones(3)})


def test_dims_mismatch():
    model = DeepAlign(DIMS, SMALL)
    with pytest.raises(ValueError):
        align_forward_infer(_v(0, (2, 5, 4, 2)), _v(1, (2, 5, 4, 2)), model)


def test_gradients_reach_every_parameter():
    model = DeepAlign(DIMS, SMALL, seed=8)
    Qs = model.scores([(_v(1), _v(2))])
    loss = sum((q * q).sum() for q in model.project(Qs))
    loss.backward()
    assert all(p.grad is not None and np.abs(p.grad).sum() > 0 for p in model.parameters())


def test_input_projection_keeps_equivariance():
    cfg = AlignerConfig(hidden=8, out=16, depth=2, input_proj=2)
    model = DeepAlign((4, 5, 4, 1), cfg, seed=9)
    v, v2 = _v(1, (4, 5, 4, 1)), _v(2, (4, 5, 4, 1))
    g = _perm(3, (4, 5, 4, 1))
    k = align_forward_infer(v, v2, model)
    assert align_forward_infer(apply_action(g, v), v2, model) == compose(g, k)
