"""Training data and objectives for the learned aligner.

Labeled pairs are synthesised from single networks: ``v2`` is a randomly
permuted, augmented copy of ``v`` and the label ``t`` is the permutation that
maps ``v2`` back onto ``v`` (so ``alignment_objective(v, v2, t)`` vanishes
without noise). Unlabeled pairs are independently trained views of the
same signal.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .assignment import solve_lap_max
from .deep_align import DeepAlign
from .mlp import TaskSpec, forward_layers, loss_fn
from .weights import (
    PermutationSequence,
    WeightSpaceVector,
    apply_action,
    relaxed_action,
    transpose_inverse,
)

log = logging.getLogger(__name__)

NOISE_REL = 0.1
MASK_PROB = 0.05
CE_TEMPERATURE = 1.0
ALIGNER_LR = 5e-4
ALIGNER_WEIGHT_DECAY = 1e-2
LMC_BATCH = 64


@dataclass
class AugmentConfig:
    noise_rel: float = NOISE_REL
    mask_prob: float = MASK_PROB
    relu_scaling: bool = True
    scale_range: tuple[float, float] = (0.5, 2.0)


@dataclass
class LabeledPair:
    v: WeightSpaceVector
    v_prime: WeightSpaceVector
    target: PermutationSequence
    task: TaskSpec | None = None


@dataclass
class UnlabeledPair:
    v: WeightSpaceVector
    v_prime: WeightSpaceVector
    task: TaskSpec | None = None


@dataclass
class LossWeights:
    sup: float = 1.0
    align: float = 0.0
    lmc: float = 1.0

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "LossWeights":
        names = {n.strip() for n in names if n.strip()}
        unknown = names - {"sup", "align", "lmc"}
        if unknown:
            raise ValueError(f"unknown losses {sorted(unknown)}")
        return cls(*(1.0 if n in names else 0.0 for n in ("sup", "align", "lmc")))

    def validate(self) -> None:
        if min(self.sup, self.align, self.lmc) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sup == self.align == self.lmc == 0:
            raise ValueError("all loss weights are zero")


def f_aug(v: WeightSpaceVector, rng: np.random.Generator, config: AugmentConfig | None = None) -> WeightSpaceVector:
    """Gaussian noise (relative to each layer's std), random zero-masking and,
    for ReLU networks only, function-preserving positive neuron rescaling."""
    cfg = config or AugmentConfig()
    ws = [w.copy() for w in v.weights]
    bs = [b.copy() for b in v.biases]
    if v.activation == "relu" and cfg.relu_scaling:
        lo, hi = np.log(cfg.scale_range[0]), np.log(cfg.scale_range[1])
        for m in range(len(ws) - 1):
            c = np.exp(rng.uniform(lo, hi, ws[m].shape[0])).astype(ws[m].dtype)
            ws[m] = ws[m] * c[:, None]
            bs[m] = bs[m] * c
            ws[m + 1] = ws[m + 1] / c[None, :]
    if cfg.noise_rel > 0:
        ws = [w + (cfg.noise_rel * w.std() * rng.standard_normal(w.shape)).astype(w.dtype) for w in ws]
        bs = [b + (cfg.noise_rel * b.std() * rng.standard_normal(b.shape)).astype(b.dtype) for b in bs]
    if cfg.mask_prob > 0:
        ws = [w * (rng.uniform(size=w.shape) >= cfg.mask_prob) for w in ws]
        bs = [b * (rng.uniform(size=b.shape) >= cfg.mask_prob) for b in bs]
    return WeightSpaceVector(v.dims, tuple(ws), tuple(bs), v.activation)


def make_labeled_pair(v: WeightSpaceVector, rng: np.random.Generator,
                      config: AugmentConfig | None = None, task: TaskSpec | None = None) -> LabeledPair:
    t = PermutationSequence.random(v.hidden_dims, rng)
    v2 = apply_action(transpose_inverse(t), f_aug(v, rng, config))
    return LabeledPair(v, v2, t, task)


class LabeledSampler:
    """Fresh labeled pairs drawn from a pool of single networks on every call."""

    def __init__(self, pool: Sequence[WeightSpaceVector], tasks: Sequence[TaskSpec | None] | None = None,
                 config: AugmentConfig | None = None):
        if not pool:
            raise ValueError("empty network pool")
        self.pool = list(pool)
        self.tasks = list(tasks) if tasks is not None else [None] * len(self.pool)
        self.config = config or AugmentConfig()

    def __len__(self) -> int:
        return len(self.pool)

    def sample(self, rng: np.random.Generator, n: int) -> list[LabeledPair]:
        idx = rng.integers(len(self.pool), size=n)
        return [make_labeled_pair(self.pool[i], rng, self.config, self.tasks[i]) for i in idx]


# -- losses ----------------------------------------------------------------------

def loss_supervised(Qs: Sequence, targets: Sequence, tau: float = CE_TEMPERATURE,
                    projected: bool = False):
    """Row-wise cross-entropy of ``softmax(Q_m[i] / tau)`` against column ``t_m[i]``.

    ``Qs[m]`` is ``(B, d, d)`` (or ``(d, d)``) and ``targets[m]`` the matching
    ``(B, d)`` (or ``(d,)``) index array. Averaged over rows, then layers.
    With ``projected`` the inputs are already doubly stochastic and their rows
    are used as the distributions directly.
    """
    if len(Qs) != len(targets):
        raise ValueError("layer count of scores and targets differ")
    per_layer = []
    for Q, t in zip(Qs, targets):
        Q = ad.as_tensor(Q)
        t = np.asarray(t)
        if Q.shape[:-1] != t.shape:
            raise ValueError(f"scores {Q.shape} do not match targets {t.shape}")
        if projected:
            logp = ad.log(ad.clamp_min(Q, 1e-30))
        else:
            logp = ad.log_softmax(ad.scale(Q, 1.0 / tau), axis=-1)
        flat = logp.reshape(-1, logp.shape[-1])
        picked = ad.getitem(flat, (np.arange(flat.shape[0]), t.ravel()))
        per_layer.append(-picked.mean())
    total = per_layer[0]
    for x in per_layer[1:]:
        total = total + x
    return ad.scale(total, 1.0 / len(per_layer))


def loss_alignment(weights, biases, weights2, biases2, mats):
    """Mean over the batch of ``||v - S#v2||^2`` with relaxed matrices ``S``."""
    ws, bs = relaxed_action(mats, weights2, biases2)
    total = None
    for a, b in zip(list(weights) + list(biases), ws + bs):
        d = a - b
        sq = d * d
        term = sq.reshape(sq.shape[0], -1).sum(axis=-1)
        total = term if total is None else total + term
    return total.mean()


def straight_through(S: ad.Tensor) -> ad.Tensor:
    """Hard permutations of a batch of matrices in the forward pass, identity gradient to ``S``."""
    P = np.zeros_like(S.data)
    for i, mat in enumerate(S.data):
        P[i, np.arange(len(mat)), solve_lap_max(mat)] = 1
    return S + (P - S.data)


def loss_lmc(weights, biases, weights2, biases2, mats, activation: str, x, y, loss: str,
             rng: np.random.Generator, batch: int | None = LMC_BATCH, lam=None, hard: bool = False):
    """Task loss at a random point of the segment from ``v`` to ``S#v2``.

    ``x``/``y`` carry one dataset per pair along the leading axis. A fresh
    ``lam ~ U(0, 1)`` is drawn per pair unless ``lam`` is given. With
    ``hard`` the merge uses the rounded permutations and passes gradients
    straight through to the relaxed ones.
    """
    if hard:
        mats = [straight_through(S) for S in mats]
    B = weights[0].shape[0]
    if x.shape[-2] == 0:
        raise ValueError("no task data for the LMC loss")
    if lam is None:
        lam = rng.uniform(size=B)
    lam = np.broadcast_to(np.asarray(lam, dtype=ad.default_dtype()), (B,))
    if batch is not None and batch < x.shape[-2]:
        idx = rng.choice(x.shape[-2], size=batch, replace=False)
        x, y = x[..., idx, :], y[..., idx, :]
    ws, bs = relaxed_action(mats, weights2, biases2)
    lw = lam[:, None, None]
    lb = lam[:, None]
    mw = [lw * a + (1 - lw) * c for a, c in zip(weights, ws)]
    mb = [lb * a + (1 - lb) * c for a, c in zip(biases, bs)]
    pred = forward_layers(mw, mb, activation, x)
    return loss_fn(loss, pred, y)


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    optimizer: dict = field(default_factory=dict)
    curves: dict = field(default_factory=lambda: {"step": [], "total": [], "sup": [], "align": [], "lmc": []})


def _task_arrays(tasks: Sequence[TaskSpec], dtype):
    x = np.stack([t.x for t in tasks]).astype(dtype)
    loss = tasks[0].loss
    y = np.stack([t.y for t in tasks])
    y = y.astype(dtype) if loss == "mse" else y
    return x, y, loss


def train_aligner(model: DeepAlign, labeled, unlabeled: Sequence[UnlabeledPair],
                  weights: LossWeights, steps: int, lr: float = ALIGNER_LR,
                  weight_decay: float = ALIGNER_WEIGHT_DECAY, batch: int = 8, seed: int = 0,
                  state: TrainState | None = None, log_every: int = 50,
                  callback: Callable[[int, dict], None] | None = None,
                  lmc_hard: bool = False, sup_on_sinkhorn: bool = False) -> TrainState:
    """AdamW on ``w_sup * l_sup + w_align * l_align + w_lmc * l_lmc``.

    ``labeled`` is a :class:`LabeledSampler` or a list of :class:`LabeledPair`.
    Each step uses ``batch`` labeled and ``batch`` unlabeled pairs. Labeled
    pairs feed every active loss, unlabeled pairs only the unsupervised
    ones. Passing a previous ``state`` resumes its optimizer and step count.
    ``lmc_hard`` evaluates the LMC loss on rounded permutations (straight-through).
    ``sup_on_sinkhorn`` feeds the Sinkhorn output instead of the raw scores to
    the supervised loss.
    """
    weights.validate()
    if isinstance(labeled, (list, tuple)):
        labeled = list(labeled)
    have_lab = labeled is not None and len(labeled) > 0
    have_unl = bool(unlabeled)
    if not have_lab and not have_unl:
        raise ValueError("both datasets are empty")
    if weights.sup > 0 and not have_lab:
        raise ValueError("supervised loss requested without labeled pairs")
    state = state or TrainState()
    params = model.parameters()
    opt = ad.AdamW(params, lr=lr, weight_decay=weight_decay)
    opt.state = state.optimizer
    dtype = ad.default_dtype()
    need_unsup = weights.align > 0 or weights.lmc > 0
    need_proj = need_unsup or (weights.sup > 0 and sup_on_sinkhorn)
    t0 = time.perf_counter()
    for _ in range(steps):
        # one stream per step so a resumed run replays an uninterrupted one
        rng = np.random.default_rng([seed, state.step])
        pairs, targets, tasks = [], [], []
        if have_lab:
            if isinstance(labeled, LabeledSampler):
                lab = labeled.sample(rng, batch)
            else:
                lab = [labeled[i] for i in rng.integers(len(labeled), size=batch)]
            pairs += [(p.v, p.v_prime) for p in lab]
            targets = [np.stack([p.target.perms[m] for p in lab]) for m in range(len(model.dims) - 2)]
            tasks += [p.task for p in lab]
        n_lab = len(pairs)
        if have_unl and need_unsup:
            unl = [unlabeled[i] for i in rng.integers(len(unlabeled), size=batch)]
            pairs += [(p.v, p.v_prime) for p in unl]
            tasks += [p.task for p in unl]
        W, Bv = model.stack([p[0] for p in pairs])
        W2, B2 = model.stack([p[1] for p in pairs])
        Qs = model.scores_stacked(W, Bv, W2, B2)
        parts = {}
        total = None
        S = model.project(Qs) if need_proj else None
        if weights.sup > 0:
            src = S if sup_on_sinkhorn else Qs
            parts["sup"] = loss_supervised([Q[:n_lab] for Q in src], targets, projected=sup_on_sinkhorn)
            total = ad.scale(parts["sup"], weights.sup)
        if need_unsup:
            if weights.align > 0:
                parts["align"] = loss_alignment(W, Bv, W2, B2, S)
                term = ad.scale(parts["align"], weights.align)
                total = term if total is None else total + term
            if weights.lmc > 0:
                if any(t is None for t in tasks):
                    raise ValueError("LMC loss needs a task for every pair")
                x, y, kind = _task_arrays(tasks, dtype)
                parts["lmc"] = loss_lmc(W, Bv, W2, B2, S, model_activation(pairs), x, y, kind, rng,
                                        hard=lmc_hard)
                term = ad.scale(parts["lmc"], weights.lmc)
                total = term if total is None else total + term
        value = total.item()
        if not np.isfinite(value):
            raise ad.NonFiniteError(f"aligner training diverged at step {state.step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        state.step += 1
        if state.step % log_every == 0 or state.step == 1:
            rec = {k: v.item() for k, v in parts.items()}
            state.curves["step"].append(state.step)
            state.curves["total"].append(value)
            for k in ("sup", "align", "lmc"):
                state.curves[k].append(rec.get(k, float("nan")))
            log.info("step %d loss %.4f %s (%.1fs)", state.step, value,
                     " ".join(f"{k}={v:.4f}" for k, v in rec.items()), time.perf_counter() - t0)
            if callback is not None:
                callback(state.step, rec)
    state.optimizer = opt.state
    return state


def model_activation(pairs) -> str:
    acts = {p[0].activation for p in pairs}
    if len(acts) != 1:
        raise ValueError(f"mixed activations in one batch: {acts}")
    return acts.pop()
