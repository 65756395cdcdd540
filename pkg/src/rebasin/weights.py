"""MLP weight-space vectors, the hidden-layer permutation group and its action.

Permutations are integer index arrays with the convention
``P[i, perm[i]] = 1``: row ``i`` of a permuted object is row ``perm[i]`` of
the original. All group operations stay in index form, so applying and
composing permutations never introduces floating point error.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATION_TAGS = ("relu", "sine", "tanh")


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class WeightSpaceVector:
    """Parameters ``[W_m, b_m]`` of an M-layer MLP with widths ``dims``."""

    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", tuple(np.asarray(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b) for b in self.biases))
        if len(dims) < 3:
            raise ValueError("need at least one hidden layer (len(dims) >= 3)")
        if self.activation not in ACTIVATION_TAGS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionMismatch("layer count does not match dims")
        for m, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[m + 1], dims[m]) or b.shape != (dims[m + 1],):
                raise DimensionMismatch(
                    f"layer {m + 1}: got W{w.shape}, b{b.shape} for dims {dims}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return self.dims[1:-1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def layers(self):
        return list(zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    def astype(self, dtype) -> "WeightSpaceVector":
        return WeightSpaceVector(
            self.dims,
            tuple(w.astype(dtype) for w in self.weights),
            tuple(b.astype(dtype) for b in self.biases),
            self.activation,
        )

    def map(self, fn) -> "WeightSpaceVector":
        """Apply ``fn`` to every weight and bias array."""
        return WeightSpaceVector(
            self.dims,
            tuple(fn(w) for w in self.weights),
            tuple(fn(b) for b in self.biases),
            self.activation,
        )

    @classmethod
    def random(cls, dims: Sequence[int], rng: np.random.Generator, activation: str = "relu",
               scale: float = 1.0, dtype=np.float64) -> "WeightSpaceVector":
        ws = tuple((scale * rng.standard_normal((dims[m + 1], dims[m]))).astype(dtype)
                   for m in range(len(dims) - 1))
        bs = tuple((scale * rng.standard_normal(dims[m + 1])).astype(dtype)
                   for m in range(len(dims) - 1))
        return cls(tuple(dims), ws, bs, activation)


def same_shape(v: WeightSpaceVector, w: WeightSpaceVector) -> None:
    if v.dims != w.dims:
        raise DimensionMismatch(f"dims differ: {v.dims} vs {w.dims}")


@dataclass(frozen=True)
class PermutationSequence:
    """Group element ``(P_1, ..., P_{M-1})`` as index arrays."""

    perms: tuple[np.ndarray, ...] = field(default_factory=tuple)

    def __post_init__(self):
        perms = tuple(np.asarray(p, dtype=np.int64) for p in self.perms)
        for m, p in enumerate(perms):
            if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(len(p))):
                raise ValueError(f"perms[{m}] is not a bijection on [0, {len(p)})")
        object.__setattr__(self, "perms", perms)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(len(p) for p in self.perms)

    def __len__(self) -> int:
        return len(self.perms)

    def __getitem__(self, m: int) -> np.ndarray:
        return self.perms[m]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PermutationSequence):
            return NotImplemented
        return len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.perms, other.perms)
        )

    def __hash__(self) -> int:
        return hash(tuple(tuple(p.tolist()) for p in self.perms))

    def __repr__(self) -> str:
        return f"PermutationSequence({[p.tolist() for p in self.perms]})"

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(len(p))) for p in self.perms)

    def matrices(self, dtype=np.float64) -> list[np.ndarray]:
        return [perm_matrix(p, dtype) for p in self.perms]

    def tolist(self) -> list[list[int]]:
        return [p.tolist() for p in self.perms]

    @classmethod
    def identity(cls, hidden_dims: Sequence[int]) -> "PermutationSequence":
        return cls(tuple(np.arange(d) for d in hidden_dims))

    @classmethod
    def random(cls, hidden_dims: Sequence[int], rng: np.random.Generator) -> "PermutationSequence":
        return cls(tuple(rng.permutation(d) for d in hidden_dims))


def perm_matrix(perm, dtype=np.float64) -> np.ndarray:
    perm = np.asarray(perm)
    out = np.zeros((len(perm), len(perm)), dtype=dtype)
    out[np.arange(len(perm)), perm] = 1
    return out


def _check_compatible(g: PermutationSequence, dims: Sequence[int]) -> None:
    if g.dims != tuple(dims[1:-1]):
        raise DimensionMismatch(f"permutation dims {g.dims} do not match hidden dims {tuple(dims[1:-1])}")


def apply_action(g: PermutationSequence, v: WeightSpaceVector) -> WeightSpaceVector:
    """``g#v``: permute hidden neurons, leaving the network function unchanged."""
    _check_compatible(g, v.dims)
    M = v.num_layers
    ws, bs = [], []
    for m, (w, b) in enumerate(zip(v.weights, v.biases)):
        if m < M - 1:
            w = w[g.perms[m]]
            b = b[g.perms[m]]
        if m > 0:
            w = w[:, g.perms[m - 1]]
        ws.append(w)
        bs.append(b)
    return WeightSpaceVector(v.dims, tuple(ws), tuple(bs), v.activation)


def compose(g: PermutationSequence, h: PermutationSequence) -> PermutationSequence:
    """Layerwise matrix product ``P_m P'_m``."""
    if g.dims != h.dims:
        raise DimensionMismatch(f"cannot compose dims {g.dims} and {h.dims}")
    return PermutationSequence(tuple(q[p] for p, q in zip(g.perms, h.perms)))


def transpose_inverse(g: PermutationSequence) -> PermutationSequence:
    return PermutationSequence(tuple(np.argsort(p) for p in g.perms))


def alignment_objective(v: WeightSpaceVector, v2: WeightSpaceVector, k: PermutationSequence) -> float:
    """Squared distance ``||v - k#v2||^2`` over all weights and biases."""
    same_shape(v, v2)
    aligned = apply_action(k, v2)
    total = 0.0
    for a, b in zip(v.weights + v.biases, aligned.weights + aligned.biases):
        d = np.asarray(a, dtype=np.float64) - b
        total += float(np.sum(d * d))
    return total


def search_space_size(hidden_dims: Sequence[int]) -> int:
    return math.prod(math.factorial(d) for d in hidden_dims)


def brute_force_align(v: WeightSpaceVector, v2: WeightSpaceVector,
                      limit: int = 10**6) -> tuple[PermutationSequence, float]:
    """Exhaustive minimiser of :func:`alignment_objective`.

    Candidates are enumerated in lexicographic order and only a strictly
    smaller value replaces the incumbent, so exact ties resolve to the
    lexicographically smallest sequence.
    """
    same_shape(v, v2)
    size = search_space_size(v.hidden_dims)
    if size > limit:
        raise ValueError(f"search space has {size} elements (limit {limit})")
    best, best_val = None, math.inf
    for combo in itertools.product(*(itertools.permutations(range(d)) for d in v.hidden_dims)):
        k = PermutationSequence(combo)
        val = alignment_objective(v, v2, k)
        if val < best_val:
            best, best_val = k, val
    return best, best_val


def extract_bias_features(biases) -> list:
    """Activation-space features: the hidden-layer bias channels.

    ``biases`` lists the per-layer bias features for all M layers (shape
    ``(d_m,)`` or ``(d_m, c)``); the output layer is dropped and 1-D inputs
    gain a trailing channel axis.
    """
    if isinstance(biases, WeightSpaceVector):
        biases = biases.biases
    feats = []
    for b in list(biases)[:-1]:
        if getattr(b, "ndim", 0) == 1:
            b = b[:, None]
        feats.append(b)
    return feats


def _column(b):
    from . import autodiff as ad

    return ad.expand_dims(b, -1) if isinstance(b, ad.Tensor) else b[..., None]


def _squeeze_last(x):
    from . import autodiff as ad

    if isinstance(x, ad.Tensor):
        return x.reshape(x.shape[:-1])
    return x[..., 0]


def relaxed_action(mats: Sequence, weights: Sequence, biases: Sequence) -> tuple[list, list]:
    """``k#v`` with each ``P_m`` replaced by an arbitrary square matrix ``Q_m``.

    Operands may be arrays or autodiff tensors and may carry a leading batch
    dimension. With permutation matrices this reproduces :func:`apply_action`.
    """
    M = len(weights)
    if len(mats) != M - 1:
        raise DimensionMismatch(f"need {M - 1} matrices, got {len(mats)}")
    ws, bs = [], []
    for m in range(M):
        w, b = weights[m], biases[m]
        if m < M - 1:
            w = mats[m] @ w
            b = _squeeze_last(mats[m] @ _column(b))
        if m > 0:
            w = w @ mats[m - 1].swapaxes(-1, -2)
        ws.append(w)
        bs.append(b)
    return ws, bs
