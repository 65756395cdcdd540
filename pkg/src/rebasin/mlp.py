"""Running and training the input MLPs.

``forward`` accepts plain numpy weights or autodiff tensors, with optional
leading batch dimensions on both the weights and the inputs, so the same
code evaluates a single network, trains hundreds of INRs at once, and
differentiates through relaxed (doubly stochastic) alignments.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .weights import WeightSpaceVector, same_shape

log = logging.getLogger(__name__)

# Sine-INR recipe. The first layer carries a larger frequency scale so that a
# 1-D input can represent waves up to sin(10x) on [-pi, pi].
INR_DIMS = (1, 32, 32, 1)
INR_FIRST_SCALE = 5.0
INR_GRID_POINTS = 128
INR_EVAL_POINTS = 256
INR_STEPS = 2000
INR_LR = 1e-4


@dataclass
class TaskSpec:
    """Data and loss an MLP was trained on.

    ``x_eval``/``y_eval`` hold held-out inputs used by the merging metrics;
    when absent the training arrays are reused.
    """

    kind: str
    loss: str
    x: np.ndarray
    y: np.ndarray
    x_eval: np.ndarray | None = None
    y_eval: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        valid = {("inr_regression", "mse"), ("classification", "cross_entropy")}
        if (self.kind, self.loss) not in valid:
            raise ValueError(f"loss {self.loss!r} incompatible with task kind {self.kind!r}")

    def split(self, which: str = "train") -> tuple[np.ndarray, np.ndarray]:
        if which == "eval" and self.x_eval is not None:
            return self.x_eval, self.y_eval
        return self.x, self.y


def sine_task(freq: float, points: int = INR_GRID_POINTS, eval_points: int = INR_EVAL_POINTS,
              dtype=np.float64) -> TaskSpec:
    """Regression task for the INR of ``sin(freq * x)`` on ``[-pi, pi]``."""
    x = np.linspace(-np.pi, np.pi, points, dtype=dtype)[:, None]
    xe = np.linspace(-np.pi, np.pi, eval_points, dtype=dtype)[:, None]
    return TaskSpec("inr_regression", "mse", x, np.sin(freq * x), xe, np.sin(freq * xe),
                    meta={"freq": float(freq)})


def _act(name: str, h):
    if name == "sine":
        return np.sin(h)
    if name == "tanh":
        return np.tanh(h)
    if name == "relu":
        return ad.relu(h) if isinstance(h, ad.Tensor) else np.maximum(h, 0)
    raise ValueError(f"unknown activation {name!r}")


def _expand(b, axis):
    return ad.expand_dims(b, axis) if isinstance(b, ad.Tensor) else np.expand_dims(b, axis)


def forward_layers(weights: Sequence, biases: Sequence, activation: str, x, return_hidden=False):
    """Row-batch forward pass; ``x`` is ``(..., N, d_0)``."""
    hidden = []
    h = x
    M = len(weights)
    for m, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w.swapaxes(-1, -2) + _expand(b, -2)
        if m < M - 1:
            h = _act(activation, h)
            if return_hidden:
                hidden.append(h)
    return (h, hidden) if return_hidden else h


def _check_input(v: WeightSpaceVector, x) -> None:
    if np.shape(x)[-1] != v.dims[0]:
        raise ValueError(f"input width {np.shape(x)[-1]} != d_0 = {v.dims[0]}")


def forward(v: WeightSpaceVector, x: np.ndarray) -> np.ndarray:
    _check_input(v, x)
    return forward_layers(v.weights, v.biases, v.activation, np.asarray(x, dtype=v.dtype))


def forward_with_activations(v: WeightSpaceVector, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Hidden post-activations ``(x_1, ..., x_{M-1})`` and the output."""
    _check_input(v, x)
    out, hidden = forward_layers(v.weights, v.biases, v.activation,
                                 np.asarray(x, dtype=v.dtype), return_hidden=True)
    return hidden, out


def loss_fn(kind: str, pred, target):
    """Mean MSE or cross-entropy; works on arrays and tensors."""
    if kind == "mse":
        diff = pred - target
        return (diff * diff).mean()
    if kind == "cross_entropy":
        labels = np.asarray(target).astype(np.int64)
        if isinstance(pred, ad.Tensor):
            logp = ad.log_softmax(pred, axis=-1)
            flat = logp.reshape(-1, logp.shape[-1])
            picked = ad.getitem(flat, (np.arange(flat.shape[0]), labels.ravel()))
            return -picked.mean()
        z = pred - pred.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return -np.take_along_axis(logp, labels[..., None], axis=-1).mean()
    raise ValueError(f"unknown loss {kind!r}")


def task_loss(v: WeightSpaceVector, task: TaskSpec, subset=None, split: str = "train") -> float:
    x, y = task.split(split)
    if subset is not None:
        subset = np.asarray(subset)
        if subset.size == 0:
            raise ValueError("empty evaluation subset")
        x, y = x[subset], y[subset]
    if len(x) == 0:
        raise ValueError("empty evaluation subset")
    return float(loss_fn(task.loss, forward(v, x), y))


def lerp_weights(lam: float, v: WeightSpaceVector, v2: WeightSpaceVector) -> WeightSpaceVector:
    """Entrywise ``lam * v + (1 - lam) * v2``."""
    same_shape(v, v2)
    return WeightSpaceVector(
        v.dims,
        tuple(lam * a + (1 - lam) * b for a, b in zip(v.weights, v2.weights)),
        tuple(lam * a + (1 - lam) * b for a, b in zip(v.biases, v2.biases)),
        v.activation,
    )


# -- initialisation and training ------------------------------------------------

def init_mlp(dims: Sequence[int], rng: np.random.Generator, activation: str,
             first_scale: float = INR_FIRST_SCALE) -> WeightSpaceVector:
    """Uniform fan-in initialisation.

    Sine networks use the SIREN scheme with the first-layer frequency scale
    folded into the weights; other activations use He/Glorot-style bounds.
    """
    ws, bs = [], []
    for m in range(len(dims) - 1):
        fan_in, fan_out = dims[m], dims[m + 1]
        if activation == "sine":
            bound = first_scale / fan_in if m == 0 else np.sqrt(6.0 / fan_in)
            bbound = (first_scale if m == 0 else 1.0) / np.sqrt(fan_in)
        else:
            gain = 2.0 if activation == "relu" else 1.0
            bound = np.sqrt(3.0 * gain / fan_in)
            bbound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        bs.append(rng.uniform(-bbound, bbound, fan_out))
    return WeightSpaceVector(tuple(dims), tuple(ws), tuple(bs), activation)


def _train_stacked(inits: Sequence[WeightSpaceVector], xs, ys, loss: str, steps: int, lr: float,
                   weight_decay: float = 0.0) -> tuple[list[WeightSpaceVector], np.ndarray]:
    """Full-batch AdamW on a stack of independent networks.

    The objective is the sum of per-network mean losses, so each network's
    gradient (and Adam update) equals what it would get if trained alone.
    Returns trained weights and the final per-network loss.
    """
    dtype = ad.default_dtype()
    dims, act = inits[0].dims, inits[0].activation
    B = len(inits)
    ws = [ad.Tensor(np.stack([v.weights[m] for v in inits]).astype(dtype), requires_grad=True)
          for m in range(len(dims) - 1)]
    bs = [ad.Tensor(np.stack([v.biases[m] for v in inits]).astype(dtype), requires_grad=True)
          for m in range(len(dims) - 1)]
    x = np.asarray(xs, dtype=dtype)
    y = np.asarray(ys, dtype=dtype if loss == "mse" else np.int64)
    opt = ad.AdamW(ws + bs, lr=lr, weight_decay=weight_decay)
    per = np.full(B, np.nan)
    for step in range(steps + 1):
        pred = forward_layers(ws, bs, act, x)
        if loss == "mse":
            diff = pred - y
            per_t = (diff * diff).mean(axis=(-2, -1))
        else:
            per_t = ad.stack([loss_fn(loss, pred[i], y[i]) for i in range(B)])
        per = per_t.data.astype(np.float64)
        if step == steps:
            break
        if not np.all(np.isfinite(per)):
            raise ad.NonFiniteError(f"training diverged at step {step}")
        opt.zero_grad()
        per_t.sum().backward()
        opt.step()
    out = []
    for i in range(B):
        out.append(WeightSpaceVector(dims, tuple(w.data[i].copy() for w in ws),
                                     tuple(b.data[i].copy() for b in bs), act))
    return out, per


def train_mlp(seed: int, task: TaskSpec, steps: int = INR_STEPS, lr: float = INR_LR,
              dims: Sequence[int] = INR_DIMS, activation: str = "sine",
              weight_decay: float = 0.0) -> WeightSpaceVector:
    """Initialise from ``seed`` and run ``steps`` full-batch AdamW updates."""
    init = init_mlp(dims, np.random.default_rng(seed), activation)
    if steps == 0:
        return init.astype(ad.default_dtype())
    (v,), per = _train_stacked([init], task.x[None], task.y[None], task.loss, steps, lr, weight_decay)
    if not np.isfinite(per[0]):
        raise ad.NonFiniteError(f"training diverged (seed {seed})")
    return v


def fit_sine_inrs(freqs: Sequence[float], seeds: Sequence[int], steps: int = INR_STEPS,
                  lr: float = INR_LR, dims: Sequence[int] = INR_DIMS,
                  points: int = INR_GRID_POINTS) -> tuple[list[WeightSpaceVector], np.ndarray]:
    """Fit one sine INR per ``(freq, seed)`` in a single stacked training run.

    Returns the networks and their final training MSE (NaN marks a diverged fit).
    """
    tasks = [sine_task(a, points) for a in freqs]
    inits = [init_mlp(dims, np.random.default_rng(s), "sine") for s in seeds]
    xs = np.stack([t.x for t in tasks])
    ys = np.stack([t.y for t in tasks])
    try:
        return _train_stacked(inits, xs, ys, "mse", steps, lr)
    except ad.NonFiniteError:
        if len(inits) == 1:
            return inits, np.array([np.nan])
        # isolate the culprit(s) by fitting halves separately
        half = len(inits) // 2
        a, la = fit_sine_inrs(freqs[:half], seeds[:half], steps, lr, dims, points)
        b, lb = fit_sine_inrs(freqs[half:], seeds[half:], steps, lr, dims, points)
        return a + b, np.concatenate([la, lb])
