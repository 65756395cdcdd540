"""Merging metrics along the linear path between two networks, and timing."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .mlp import TaskSpec, forward_layers, loss_fn
from .weights import WeightSpaceVector, same_shape

DEFAULT_GRID = 25


@dataclass(frozen=True)
class InterpolationCurve:
    lambdas: np.ndarray
    losses: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        loss = np.asarray(self.losses, dtype=np.float64)
        if lam.ndim != 1 or lam.shape != loss.shape or len(lam) < 2:
            raise ValueError("need matching 1-D lambda and loss arrays of length >= 2")
        if lam[0] != 0.0 or lam[-1] != 1.0 or np.any(np.diff(lam) <= 0):
            raise ValueError("lambdas must increase strictly from 0 to 1")
        if not np.all(np.isfinite(loss)):
            raise ValueError("non-finite loss on the interpolation path")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "losses", loss)

    @property
    def loss_v(self) -> float:
        """Loss at ``lambda = 1``, i.e. the first network."""
        return float(self.losses[-1])

    @property
    def loss_v2(self) -> float:
        return float(self.losses[0])

    @property
    def psi(self) -> np.ndarray:
        # written as a + lam (b - a) so that equal endpoints give an exact chord
        chord = self.loss_v2 + self.lambdas * (self.loss_v - self.loss_v2)
        return self.losses - chord


def interpolation_curve(v: WeightSpaceVector, v2: WeightSpaceVector, task: TaskSpec,
                        grid_size: int = DEFAULT_GRID, split: str = "eval") -> InterpolationCurve:
    """Task loss of ``lam * v + (1 - lam) * v2`` on a uniform grid, all points in one batch."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    same_shape(v, v2)
    x, y = task.split(split)
    if len(x) == 0:
        raise ValueError("empty evaluation data")
    lam = np.linspace(0.0, 1.0, grid_size)
    lw = lam[:, None, None]
    ws = [b + lw * (a - b) for a, b in zip(v.weights, v2.weights)]
    bs = [b + lam[:, None] * (a - b) for a, b in zip(v.biases, v2.biases)]
    pred = forward_layers(ws, bs, v.activation, np.asarray(x, dtype=np.float64))
    losses = np.array([float(loss_fn(task.loss, pred[i], y)) for i in range(grid_size)])
    return InterpolationCurve(lam, losses)


def barrier(curve: InterpolationCurve) -> float:
    return max(0.0, float(curve.psi.max()))


def auc(curve: InterpolationCurve) -> float:
    psi = curve.psi
    area = float(np.sum(np.diff(curve.lambdas) * (psi[1:] + psi[:-1]) / 2))
    return max(0.0, area)


def write_curve(curve: InterpolationCurve, path: str | Path, extra: dict | None = None) -> None:
    """``lambda,loss,psi`` CSV plus a JSON sidecar with endpoint losses and metrics."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "loss", "psi"])
        for row in zip(curve.lambdas, curve.losses, curve.psi):
            w.writerow([repr(float(c)) for c in row])
    meta = {
        "loss_v": curve.loss_v,
        "loss_v2": curve.loss_v2,
        "barrier": barrier(curve),
        "auc": auc(curve),
        "grid_size": len(curve.lambdas),
    }
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def read_curve(path: str | Path) -> InterpolationCurve:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return InterpolationCurve(data[:, 0], data[:, 1])


@dataclass
class BenchResult:
    method: str
    mean: float
    std: float
    per_pair: np.ndarray

    def to_json(self) -> dict:
        return {"method": self.method, "mean_sec": self.mean, "std_sec": self.std,
                "pairs": len(self.per_pair)}


def bench_method(method: str, align: Callable[[WeightSpaceVector, WeightSpaceVector], object],
                 pairs: Sequence[tuple[WeightSpaceVector, WeightSpaceVector]],
                 repetitions: int = 1) -> BenchResult:
    """Wall seconds per alignment call; pairs are already in memory so no I/O is timed.

    The std is taken over repetitions of the per-pair mean.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if not pairs:
        raise ValueError("no pairs to benchmark")
    times = np.zeros((repetitions, len(pairs)))
    for r in range(repetitions):
        for i, (v, v2) in enumerate(pairs):
            t0 = time.perf_counter()
            align(v, v2)
            times[r, i] = time.perf_counter() - t0
    per_rep = times.mean(axis=1)
    std = float(per_rep.std(ddof=1)) if repetitions > 1 else 0.0
    return BenchResult(method, float(per_rep.mean()), std, times.mean(axis=0))
