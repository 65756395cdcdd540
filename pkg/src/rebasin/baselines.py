"""Optimisation-based alignment baselines.

All methods return an :class:`AlignResult` whose permutation aligns the
second network onto the first, i.e. minimises ``||v - k#v2||^2`` or a
task-level proxy of it.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assignment import SINKHORN_ITERS, SINKHORN_TAU, round_stack, sinkhorn_project, solve_lap_max
from .mlp import TaskSpec, forward_layers, forward_with_activations, loss_fn
from .weights import (
    PermutationSequence,
    WeightSpaceVector,
    alignment_objective,
    relaxed_action,
    same_shape,
)

log = logging.getLogger(__name__)

SINKHORN_REBASIN_ITERS = 1000
SINKHORN_REBASIN_LR = 0.1
SINKHORN_REBASIN_BATCH = 64
WARM_START_LOGIT = 5.0


@dataclass
class AlignResult:
    perm: PermutationSequence
    objective: float
    wall_time: float
    iterations: int
    trace: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "perm": self.perm.tolist(),
            "objective": self.objective,
            "wall_time": self.wall_time,
            "iterations": self.iterations,
        }


def _result(v, v2, perm, t0, iterations, trace=None) -> AlignResult:
    elapsed = time.perf_counter() - t0
    return AlignResult(perm, alignment_objective(v, v2, perm), elapsed, iterations, trace or [])


def naive(v: WeightSpaceVector, v2: WeightSpaceVector) -> AlignResult:
    same_shape(v, v2)
    t0 = time.perf_counter()
    return _result(v, v2, PermutationSequence.identity(v.hidden_dims), t0, 0)


def weight_matching(v: WeightSpaceVector, v2: WeightSpaceVector, max_sweeps: int = 100,
                    seed: int = 0, use_bias: bool = True,
                    init: PermutationSequence | None = None) -> AlignResult:
    """Coordinate ascent over hidden layers, one exact LAP per layer update.

    Layers are visited in a seeded random order each sweep; iteration stops
    after a sweep that changes no permutation.
    """
    same_shape(v, v2)
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    W = [np.asarray(w, np.float64) for w in v.weights]
    W2 = [np.asarray(w, np.float64) for w in v2.weights]
    b, b2 = v.biases, v2.biases
    L = len(v.hidden_dims)
    perms = list((init or PermutationSequence.identity(v.hidden_dims)).perms)
    ident_in = np.arange(v.dims[0])
    ident_out = np.arange(v.dims[-1])
    trace = [alignment_objective(v, v2, PermutationSequence(tuple(perms)))]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        changed = False
        for l in rng.permutation(L):
            p_prev = perms[l - 1] if l > 0 else ident_in
            p_next = perms[l + 1] if l + 1 < L else ident_out
            cost = W[l] @ W2[l][:, p_prev].T + W[l + 1].T @ W2[l + 1][p_next]
            if use_bias:
                cost = cost + np.outer(b[l], b2[l])
            new = solve_lap_max(cost)
            if not np.array_equal(new, perms[l]):
                perms[l] = new
                changed = True
        trace.append(alignment_objective(v, v2, PermutationSequence(tuple(perms))))
        if trace[-1] > trace[-2] + 1e-9 * (1 + abs(trace[-2])):
            raise AssertionError(f"weight matching objective increased: {trace[-2]} -> {trace[-1]}")
        if not changed:
            break
    return _result(v, v2, PermutationSequence(tuple(perms)), t0, sweeps, trace)


def activation_matching(v: WeightSpaceVector, v2: WeightSpaceVector, probes: np.ndarray) -> AlignResult:
    """Per-layer LAP on the cross-correlation of hidden activations over ``probes``."""
    same_shape(v, v2)
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim != 2 or len(probes) == 0:
        raise ValueError("need a non-empty (N, d_0) probe batch")
    t0 = time.perf_counter()
    acts, _ = forward_with_activations(v.astype(np.float64), probes)
    acts2, _ = forward_with_activations(v2.astype(np.float64), probes)
    perms = tuple(solve_lap_max(a.T @ a2) for a, a2 in zip(acts, acts2))
    return _result(v, v2, PermutationSequence(perms), t0, 1)


def warm_start_logits(perm: PermutationSequence, kappa: float = WARM_START_LOGIT) -> list[np.ndarray]:
    """Sinkhorn logits ``kappa * (2P - 1)`` peaked on a given permutation."""
    return [kappa * (2 * P - 1) for P in perm.matrices()]


def sinkhorn_rebasin(v: WeightSpaceVector, v2: WeightSpaceVector, task: TaskSpec,
                     iters: int = SINKHORN_REBASIN_ITERS, lr: float = SINKHORN_REBASIN_LR,
                     batch: int = SINKHORN_REBASIN_BATCH, seed: int = 0,
                     tau: float = SINKHORN_TAU, sinkhorn_iters: int = SINKHORN_ITERS,
                     init_logits=None, random_init: bool = False) -> AlignResult:
    """Optimise relaxed permutations by the task loss along the merge segment.

    Each step draws ``lam ~ U(0, 1)`` and a data minibatch and descends
    ``L(lam v + (1 - lam) S(X)#v2)`` where ``S`` is the Sinkhorn projection of
    the free logits ``X``. The final alignment is the hard rounding of ``S(X)``.
    """
    same_shape(v, v2)
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    dtype = ad.default_dtype()
    if init_logits is not None:
        logits = [np.asarray(x, dtype=dtype) for x in init_logits]
    elif random_init:
        logits = [rng.standard_normal((d, d)).astype(dtype) for d in v.hidden_dims]
    else:
        logits = [np.zeros((d, d), dtype=dtype) for d in v.hidden_dims]
    X = [ad.Tensor(x.copy(), requires_grad=True) for x in logits]
    opt = ad.AdamW(X, lr=lr, weight_decay=0.0)
    W = [w.astype(dtype) for w in v.weights]
    B = [b.astype(dtype) for b in v.biases]
    W2 = [w.astype(dtype) for w in v2.weights]
    B2 = [b.astype(dtype) for b in v2.biases]
    x_all, y_all = task.split("train")
    x_all = x_all.astype(dtype)
    y_all = y_all.astype(dtype) if task.loss == "mse" else y_all
    n = len(x_all)
    if n == 0:
        raise ValueError("task has no training data")
    trace = []
    for step in range(iters):
        lam = float(rng.uniform())
        idx = rng.choice(n, size=min(batch, n), replace=False)
        # fixed inner count: the outer loop only needs a differentiable relaxation
        S = [sinkhorn_project(x, tau, sinkhorn_iters, tol=None) for x in X]
        ws, bs = relaxed_action(S, W2, B2)
        merged_w = [lam * a + (1 - lam) * c for a, c in zip(W, ws)]
        merged_b = [lam * a + (1 - lam) * c for a, c in zip(B, bs)]
        pred = forward_layers(merged_w, merged_b, v.activation, x_all[idx])
        loss = loss_fn(task.loss, pred, y_all[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise ad.NonFiniteError(f"sinkhorn re-basin diverged at step {step}")
        trace.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with ad.no_grad():
        S = [sinkhorn_project(x.data, tau, sinkhorn_iters, tol=None) for x in X]
    return _result(v, v2, round_stack(S), t0, iters, trace)
