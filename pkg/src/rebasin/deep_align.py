"""DEEP-ALIGN: a learned, permutation-equivariant weight aligner.

Pipeline for a pair ``(v, v2)``:

1. a Siamese weight-space encoder of stacked equivariant layers
   (:func:`dws_layer`) maps each network to multi-channel weight/bias features;
2. the hidden-layer bias channels are read off as activation-space features;
3. a scaled cosine-similarity outer product gives one score matrix per layer;
4. Sinkhorn (training) or an exact assignment (inference) projects the scores.

Feature layout. Axes that the permutation group never touches are folded
into channels before the first layer: ``W_1`` becomes ``(d_1, 1, d_0)``,
``W_M`` becomes ``(1, d_{M-1}, d_M)`` and ``b_M`` becomes ``(1, d_M)``. Every
summand then has a row axis, a column axis (weights only) and a trailing
channel axis, with an optional leading batch axis.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .assignment import round_stack, sinkhorn_project
from .weights import PermutationSequence, WeightSpaceVector, extract_bias_features, same_shape

PHI_EPS = 1e-8


@dataclass
class AlignerConfig:
    hidden: int = 64
    out: int = 128
    depth: int = 4
    activation: str = "tanh"
    tau: float = 1.0
    sinkhorn_iters: int = 20
    input_proj: int | None = None
    infer_on_sinkhorn: bool = False
    init_scale_s: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Features:
    ws: list
    bs: list

    @property
    def num_layers(self) -> int:
        return len(self.ws)


def lift(weights: Sequence, biases: Sequence) -> Features:
    """Batched raw weights ``(B, d_m, d_{m-1})`` / biases ``(B, d_m)`` to features."""
    M = len(weights)
    ws, bs = [], []
    for k in range(M):
        w, b = weights[k], biases[k]
        if k == M - 1:
            w = np.swapaxes(w, -1, -2)[:, None]          # (B, 1, d_{M-1}, d_M)
            b = b[:, None, :]                             # (B, 1, d_M)
        elif k == 0:
            w = w[:, :, None, :]                          # (B, d_1, 1, d_0)
            b = b[..., None]
        else:
            w = w[..., None]
            b = b[..., None]
        ws.append(w)
        bs.append(b)
    return Features(ws, bs)


def _pool(ws, bs):
    rows = [ad.mean_axis(w, -2) for w in ws]          # per-row means, (B, rows, c)
    cols = [ad.mean_axis(w, -3) for w in ws]          # per-column means, (B, cols, c)
    glob_w = [ad.mean_axis(w, (-3, -2)) for w in ws]  # (B, c)
    glob_b = [ad.mean_axis(b, -2) if b is not None else None for b in bs]  # (B, c)
    return rows, cols, glob_w, glob_b


def _row_inputs(k, M, rows, cols, bs):
    parts = [rows[k], bs[k]]
    if k < M - 1:
        parts.append(cols[k + 1])
    return parts


def _col_inputs(k, rows, bs, cols):
    parts = [cols[k]]
    if k > 0:
        parts += [bs[k - 1], rows[k - 1]]
    return parts


class DWSLayer:
    """One equivariant linear layer on weight-space features.

    Per weight summand ``k`` the output entry ``(i, j)`` mixes, through
    learned channel maps: the entry itself; row-indexed terms (row mean of
    ``W_k``, ``b_k[i]``, column mean of ``W_{k+1}``); column-indexed terms
    (column mean of ``W_k``, ``b_{k-1}[j]``, row mean of ``W_{k-1}``); and
    global means of ``W_k`` and ``b_k``. Bias outputs mix ``b_k[i]``, the
    row-indexed pooled terms and the same global means. Terms that refer to
    a non-existent neighbour are dropped. Concatenated channel blocks share
    one matrix, which is the same as separate maps summed.
    """

    def __init__(self, in_w: Sequence[int], in_b: Sequence[int], c_out: int,
                 rng: np.random.Generator, bias_only: bool = False, drop_last_bias: bool = False):
        self.c_out = c_out
        self.bias_only = bias_only
        # the output-layer bias is only read by weight outputs, so a layer
        # feeding a bias-only layer need not produce it
        self.drop_last_bias = drop_last_bias or bias_only
        self.M = M = len(in_w)
        dtype = ad.default_dtype()

        def mat(fan_in, fan_total):
            bound = 1.0 / np.sqrt(fan_total)
            return ad.Tensor(rng.uniform(-bound, bound, (fan_in, c_out)).astype(dtype),
                             requires_grad=True)

        def vec(fan_total):
            bound = 1.0 / np.sqrt(fan_total)
            return ad.Tensor(rng.uniform(-bound, bound, c_out).astype(dtype), requires_grad=True)

        self.params: dict[str, ad.Tensor] = {}
        for k in range(M):
            row_w = in_w[k] + in_b[k] + (in_w[k + 1] if k < M - 1 else 0)
            col_w = in_w[k] + ((in_b[k - 1] + in_w[k - 1]) if k > 0 else 0)
            glob = in_w[k] + in_b[k]
            if not bias_only:
                total = in_w[k] + row_w + col_w + glob
                self.params[f"w{k}.self"] = mat(in_w[k], total)
                self.params[f"w{k}.row"] = mat(row_w, total)
                self.params[f"w{k}.col"] = mat(col_w, total)
                self.params[f"w{k}.glob"] = mat(glob, total)
                self.params[f"w{k}.bias"] = vec(total)
            if self.drop_last_bias and k == M - 1:
                continue
            total = row_w + glob
            self.params[f"b{k}.row"] = mat(row_w, total)
            self.params[f"b{k}.glob"] = mat(glob, total)
            self.params[f"b{k}.bias"] = vec(total)

    def __call__(self, feats: Features) -> Features:
        ws, bs = feats.ws, feats.bs
        M = self.M
        rows, cols, glob_w, glob_b = _pool(ws, bs)
        out_w, out_b = [], []
        P = self.params
        for k in range(M):
            if self.bias_only and k == M - 1:
                out_b.append(None)
                continue
            row_in = ad.concat(_row_inputs(k, M, rows, cols, bs), axis=-1)
            glob_in = ad.concat([glob_w[k], glob_b[k]], axis=-1)
            if not self.bias_only:
                col_in = ad.concat(_col_inputs(k, rows, bs, cols), axis=-1)
                w = ws[k] @ P[f"w{k}.self"]
                w = w + ad.expand_dims(row_in @ P[f"w{k}.row"], -2)
                w = w + ad.expand_dims(col_in @ P[f"w{k}.col"], -3)
                g = glob_in @ P[f"w{k}.glob"] + P[f"w{k}.bias"]
                w = w + ad.expand_dims(ad.expand_dims(g, -2), -2)
                out_w.append(w)
            if self.drop_last_bias and k == M - 1:
                out_b.append(None)
                continue
            g = glob_in @ P[f"b{k}.glob"] + P[f"b{k}.bias"]
            out_b.append(row_in @ P[f"b{k}.row"] + ad.expand_dims(g, -2))
        return Features(out_w, out_b)


def dws_layer(features: Features, layer: DWSLayer) -> Features:
    return layer(features)


class DeepAlign:
    """Encoder parameters, the product scale ``s`` and the projection settings."""

    def __init__(self, dims: Sequence[int], config: AlignerConfig | None = None, seed: int = 0):
        self.dims = tuple(int(d) for d in dims)
        self.config = config or AlignerConfig()
        self.seed = seed
        if self.config.depth < 1:
            raise ValueError("encoder depth must be >= 1")
        rng = np.random.default_rng(seed)
        dtype = ad.default_dtype()
        M = len(self.dims) - 1
        d0, dM = self.dims[0], self.dims[-1]
        in_w = [1] * M
        in_b = [1] * M
        in_w[0] = d0
        in_w[-1] = dM
        in_b[-1] = dM
        self.input_proj = None
        if self.config.input_proj:
            p = self.config.input_proj
            self.input_proj = ad.Tensor(
                rng.uniform(-1, 1, (d0, p)).astype(dtype) / np.sqrt(d0), requires_grad=True)
            in_w[0] = p
        widths = [self.config.hidden] * self.config.depth + [self.config.out]
        self.layers: list[DWSLayer] = []
        for li, c in enumerate(widths):
            last = li == len(widths) - 1
            self.layers.append(DWSLayer(in_w, in_b, c, rng, bias_only=last,
                                        drop_last_bias=li == len(widths) - 2))
            in_w = [c] * M
            in_b = [c] * M
        self.scale_s = ad.Tensor(np.array(self.config.init_scale_s, dtype=dtype), requires_grad=True)
        # fixed per-summand input normalisation (scalars, so G-invariant)
        self.w_scale = np.ones(M)
        self.b_scale = np.ones(M)

    # -- parameters -------------------------------------------------------------
    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        if self.input_proj is not None:
            out["input_proj"] = self.input_proj
        for li, layer in enumerate(self.layers):
            for name, t in layer.params.items():
                out[f"layer{li}.{name}"] = t
        out["scale_s"] = self.scale_s
        return out

    def parameters(self) -> list[ad.Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data.copy() for k, t in self.named_parameters().items()}
        state["norm.w_scale"] = self.w_scale.copy()
        state["norm.b_scale"] = self.b_scale.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype)
        if "norm.w_scale" in state:
            self.w_scale = np.asarray(state["norm.w_scale"], dtype=np.float64)
            self.b_scale = np.asarray(state["norm.b_scale"], dtype=np.float64)

    def fit_normalization(self, vectors: Sequence[WeightSpaceVector]) -> None:
        """Set per-summand input scales to the RMS of the given networks."""
        M = len(self.dims) - 1
        for k in range(M):
            self.w_scale[k] = np.sqrt(np.mean([np.mean(v.weights[k] ** 2) for v in vectors])) or 1.0
            self.b_scale[k] = np.sqrt(np.mean([np.mean(v.biases[k] ** 2) for v in vectors])) or 1.0

    # -- forward ----------------------------------------------------------------
    def stack(self, vectors: Sequence[WeightSpaceVector]) -> tuple[list, list]:
        for v in vectors:
            if v.dims != self.dims:
                raise ValueError(f"network dims {v.dims} do not match aligner dims {self.dims}")
        dtype = ad.default_dtype()
        M = len(self.dims) - 1
        ws = [np.stack([v.weights[k] for v in vectors]).astype(dtype) for k in range(M)]
        bs = [np.stack([v.biases[k] for v in vectors]).astype(dtype) for k in range(M)]
        return ws, bs

    def encode_stacked(self, weights: Sequence, biases: Sequence) -> Features:
        ws = [np.asarray(w) / self.w_scale[k] for k, w in enumerate(weights)]
        bs = [np.asarray(b) / self.b_scale[k] for k, b in enumerate(biases)]
        dtype = ad.default_dtype()
        feats = lift([w.astype(dtype) for w in ws], [b.astype(dtype) for b in bs])
        feats = Features([ad.Tensor(w) for w in feats.ws], [ad.Tensor(b) for b in feats.bs])
        if self.input_proj is not None:
            feats.ws[0] = feats.ws[0] @ self.input_proj
        act = ad.ACTIVATIONS[self.config.activation]
        for li, layer in enumerate(self.layers):
            feats = layer(feats)
            if li < len(self.layers) - 1:
                feats = Features([act(w) for w in feats.ws], [act(b) if b is not None else None for b in feats.bs])
        return feats

    def scores_stacked(self, weights, biases, weights2, biases2) -> list[ad.Tensor]:
        """Raw score matrices for a batch of pairs; both sides share one encoder pass."""
        B = weights[0].shape[0]
        ws = [np.concatenate([a, b]) for a, b in zip(weights, weights2)]
        bs = [np.concatenate([a, b]) for a, b in zip(biases, biases2)]
        feats = self.encode_stacked(ws, bs)
        acts = extract_bias_features(feats.bs)
        a = [x[:B] for x in acts]
        a2 = [x[B:] for x in acts]
        return generalized_outer_product(a, a2, self.scale_s)

    def scores(self, pairs: Sequence[tuple[WeightSpaceVector, WeightSpaceVector]]) -> list[ad.Tensor]:
        for v, v2 in pairs:
            same_shape(v, v2)
        ws, bs = self.stack([p[0] for p in pairs])
        ws2, bs2 = self.stack([p[1] for p in pairs])
        return self.scores_stacked(ws, bs, ws2, bs2)

    def project(self, Qs: Sequence[ad.Tensor]) -> list[ad.Tensor]:
        return [sinkhorn_project(Q, self.config.tau, self.config.sinkhorn_iters) for Q in Qs]


def generalized_outer_product(a: Sequence, a2: Sequence, scale_s) -> list:
    """``Q_m[i, j] = s^2 <a_mi / |a_mi|, a2_mj / |a2_mj|>`` (norms floored at 1e-8)."""
    out = []
    s2 = ad.as_tensor(scale_s) * ad.as_tensor(scale_s)
    for x, y in zip(a, a2):
        x, y = ad.as_tensor(x), ad.as_tensor(y)
        if x.shape[-2:] != y.shape[-2:]:
            raise ValueError(f"feature shapes differ: {x.shape} vs {y.shape}")
        xn = x / ad.clamp_min(ad.l2_norm(x, axis=-1, keepdims=True), PHI_EPS)
        yn = y / ad.clamp_min(ad.l2_norm(y, axis=-1, keepdims=True), PHI_EPS)
        out.append((xn @ yn.swapaxes(-1, -2)) * s2)
    return out


def encode(v: WeightSpaceVector, v2: WeightSpaceVector, model: DeepAlign) -> tuple[Features, Features]:
    """Siamese encoding of both networks with shared parameters."""
    same_shape(v, v2)
    ws, bs = model.stack([v, v2])
    feats = model.encode_stacked(ws, bs)
    first = Features([w[0:1] for w in feats.ws], [b[0:1] if b is not None else None for b in feats.bs])
    second = Features([w[1:2] for w in feats.ws], [b[1:2] if b is not None else None for b in feats.bs])
    return first, second


def align_forward_train(v: WeightSpaceVector, v2: WeightSpaceVector, model: DeepAlign) -> list[np.ndarray]:
    """Doubly stochastic matrices for one pair (differentiable path, detached here)."""
    Qs = model.scores([(v, v2)])
    return [S.data[0] for S in model.project(Qs)]


def align_scores(v: WeightSpaceVector, v2: WeightSpaceVector, model: DeepAlign) -> list[np.ndarray]:
    with ad.no_grad():
        return [Q.data[0] for Q in model.scores([(v, v2)])]


def align_forward_infer(v: WeightSpaceVector, v2: WeightSpaceVector, model: DeepAlign) -> PermutationSequence:
    """Hard alignment: exact assignment on the raw scores (or on Sinkhorn output if configured)."""
    with ad.no_grad():
        Qs = model.scores([(v, v2)])
        if model.config.infer_on_sinkhorn:
            Qs = model.project(Qs)
        return round_stack([Q.data[0] for Q in Qs])


def infer_batch(pairs: Sequence[tuple[WeightSpaceVector, WeightSpaceVector]],
                model: DeepAlign) -> list[PermutationSequence]:
    with ad.no_grad():
        Qs = model.scores(pairs)
        if model.config.infer_on_sinkhorn:
            Qs = model.project(Qs)
        return [round_stack([Q.data[i] for Q in Qs]) for i in range(len(pairs))]


def config_from_json(text: str) -> AlignerConfig:
    return AlignerConfig(**json.loads(text))
