"""Uniform entry point over every alignment method."""
from __future__ import annotations

import time

from .baselines import (
    SINKHORN_REBASIN_ITERS,
    WARM_START_LOGIT,
    AlignResult,
    activation_matching,
    naive,
    sinkhorn_rebasin,
    warm_start_logits,
    weight_matching,
)
from .deep_align import DeepAlign, align_forward_infer
from .mlp import TaskSpec
from .weights import WeightSpaceVector, alignment_objective

METHODS = ("naive", "wm", "am", "sinkhorn", "deep-align", "deep-align+sinkhorn")


def align_pair(method: str, v: WeightSpaceVector, v2: WeightSpaceVector, task: TaskSpec | None = None,
               model: DeepAlign | None = None, sinkhorn_iters: int = SINKHORN_REBASIN_ITERS,
               kappa: float = WARM_START_LOGIT, seed: int = 0) -> AlignResult:
    """Permutation aligning ``v2`` onto ``v`` with the named method."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method.startswith("deep-align") and model is None:
        raise ValueError(f"{method} requires a trained aligner checkpoint")
    if method in ("am", "sinkhorn", "deep-align+sinkhorn") and task is None:
        raise ValueError(f"{method} requires task data")
    if method == "naive":
        return naive(v, v2)
    if method == "wm":
        return weight_matching(v, v2, seed=seed)
    if method == "am":
        return activation_matching(v, v2, task.x)
    if method == "sinkhorn":
        return sinkhorn_rebasin(v, v2, task, iters=sinkhorn_iters, seed=seed)
    t0 = time.perf_counter()
    k = align_forward_infer(v, v2, model)
    if method == "deep-align":
        return AlignResult(k, alignment_objective(v, v2, k), time.perf_counter() - t0, 1)
    res = sinkhorn_rebasin(v, v2, task, iters=sinkhorn_iters, seed=seed,
                           init_logits=warm_start_logits(k, kappa))
    res.wall_time = time.perf_counter() - t0
    return res
