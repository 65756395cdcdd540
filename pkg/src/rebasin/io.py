"""On-disk formats: weight vectors, permutations, pair manifests, checkpoints, score exports.

The byte layouts are documented in FORMATS.md.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .weights import PermutationSequence, WeightSpaceVector

MAGIC = b"WSV1"
VERSION_F32 = 1
VERSION_F64 = 2
ACTIVATION_TAGS = {"relu": 0, "sine": 1, "tanh": 2}
TAG_ACTIVATIONS = {v: k for k, v in ACTIVATION_TAGS.items()}
MAX_LAYERS = 1024
MAX_DIM = 1 << 20
MAX_PARAMS = 1 << 28


class FormatError(ValueError):
    """Malformed file; ``code`` names the failure (``bad_magic``, ``truncated``, ...)."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


# -- weight vectors ----------------------------------------------------------------

def encode_wsv(v: WeightSpaceVector, version: int | None = None) -> bytes:
    if version is None:
        version = VERSION_F64 if v.dtype == np.float64 else VERSION_F32
    if version not in (VERSION_F32, VERSION_F64):
        raise ValueError(f"unknown version {version}")
    dt = "<f4" if version == VERSION_F32 else "<f8"
    parts = [MAGIC, struct.pack("<BBI", version, ACTIVATION_TAGS[v.activation], v.num_layers),
             struct.pack(f"<{len(v.dims)}I", *v.dims)]
    for w, b in zip(v.weights, v.biases):
        parts.append(np.ascontiguousarray(w, dtype=dt).tobytes())
        parts.append(np.ascontiguousarray(b, dtype=dt).tobytes())
    return b"".join(parts)


def decode_wsv(data: bytes) -> WeightSpaceVector:
    """Parse a WSV byte string. Every failure raises :class:`FormatError`."""
    if len(data) < 4:
        raise FormatError("truncated", "shorter than the magic")
    if data[:4] != MAGIC:
        raise FormatError("bad_magic", f"expected {MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < 10:
        raise FormatError("truncated", "header incomplete")
    version, tag, M = struct.unpack_from("<BBI", data, 4)
    if version not in (VERSION_F32, VERSION_F64):
        raise FormatError("bad_version", f"version byte {version}")
    if tag not in TAG_ACTIVATIONS:
        raise FormatError("bad_activation", f"activation tag {tag}")
    if M < 2 or M > MAX_LAYERS:
        raise FormatError("dim_overflow", f"layer count {M} outside [2, {MAX_LAYERS}]")
    off = 10
    if len(data) < off + 4 * (M + 1):
        raise FormatError("truncated", "dims incomplete")
    dims = struct.unpack_from(f"<{M + 1}I", data, off)
    off += 4 * (M + 1)
    if min(dims) < 1 or max(dims) > MAX_DIM:
        raise FormatError("dim_overflow", f"dims {dims} outside [1, {MAX_DIM}]")
    count = sum(dims[m + 1] * dims[m] + dims[m + 1] for m in range(M))
    if count > MAX_PARAMS:
        raise FormatError("dim_overflow", f"{count} parameters")
    width = 4 if version == VERSION_F32 else 8
    need = off + width * count
    if len(data) < need:
        raise FormatError("truncated", f"payload needs {need} bytes, have {len(data)}")
    if len(data) > need:
        raise FormatError("trailing_bytes", f"{len(data) - need} bytes after payload")
    flat = np.frombuffer(data, dtype="<f4" if width == 4 else "<f8", count=count, offset=off)
    flat = flat.astype(np.float32 if width == 4 else np.float64)
    ws, bs, pos = [], [], 0
    for m in range(M):
        r, c = dims[m + 1], dims[m]
        ws.append(flat[pos:pos + r * c].reshape(r, c))
        pos += r * c
        bs.append(flat[pos:pos + r])
        pos += r
    return WeightSpaceVector(tuple(dims), tuple(ws), tuple(bs), TAG_ACTIVATIONS[tag])


def wsv_size(dims: Sequence[int], version: int = VERSION_F32) -> int:
    width = 4 if version == VERSION_F32 else 8
    M = len(dims) - 1
    return 10 + 4 * (M + 1) + width * sum(dims[m + 1] * dims[m] + dims[m + 1] for m in range(M))


def write_wsv(v: WeightSpaceVector, path: str | Path, version: int | None = None) -> None:
    Path(path).write_bytes(encode_wsv(v, version))


def read_wsv(path: str | Path) -> WeightSpaceVector:
    return decode_wsv(Path(path).read_bytes())


# -- permutations ------------------------------------------------------------------

def perm_to_json(perm: PermutationSequence, dims: Sequence[int]) -> dict:
    if tuple(perm.dims) != tuple(dims[1:-1]):
        raise ValueError(f"permutation sizes {perm.dims} do not fit dims {tuple(dims)}")
    return {"dims": [int(d) for d in dims], "perms": perm.tolist()}


def perm_from_json(obj: dict) -> tuple[PermutationSequence, tuple[int, ...]]:
    try:
        dims = tuple(int(d) for d in obj["dims"])
        perms = tuple(np.asarray(p, dtype=np.int64) for p in obj["perms"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("bad_perm", f"malformed permutation file: {exc}") from None
    if len(perms) != len(dims) - 2:
        raise FormatError("bad_perm", f"{len(perms)} permutations for {len(dims) - 1} layers")
    try:
        seq = PermutationSequence(perms)
    except ValueError as exc:
        raise FormatError("bad_perm", str(exc)) from None
    if seq.dims != dims[1:-1]:
        raise FormatError("bad_perm", f"permutation sizes {seq.dims} do not fit dims {dims}")
    return seq, dims


def write_perm(perm: PermutationSequence, dims: Sequence[int], path: str | Path) -> None:
    Path(path).write_text(json.dumps(perm_to_json(perm, dims)) + "\n")


def read_perm(path: str | Path) -> tuple[PermutationSequence, tuple[int, ...]]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError("bad_perm", f"invalid JSON: {exc}") from None
    return perm_from_json(obj)


# -- manifests ---------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    id: str
    path_a: str
    path_b: str
    split: str
    gt_perm_path: str | None = None
    meta: dict | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "path_a": self.path_a, "path_b": self.path_b, "split": self.split}
        if self.gt_perm_path is not None:
            out["gt_perm_path"] = self.gt_perm_path
        if self.meta:
            out["meta"] = self.meta
        return out


def write_manifest(entries: Sequence[ManifestEntry], path: str | Path) -> None:
    lines = [json.dumps(e.to_json(), sort_keys=True) for e in entries]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path: str | Path, check_files: bool = True) -> list[ManifestEntry]:
    """Load a JSON-lines manifest. Relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries, seen = [], {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            e = ManifestEntry(str(obj["id"]), obj["path_a"], obj["path_b"], obj["split"],
                              obj.get("gt_perm_path"), obj.get("meta"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError("bad_manifest", f"line {n}: {exc}") from None
        if e.split not in SPLITS:
            raise FormatError("bad_manifest", f"line {n}: unknown split {e.split!r}")
        if e.id in seen:
            raise FormatError("bad_manifest", f"id {e.id!r} appears twice (lines {seen[e.id]} and {n})")
        seen[e.id] = n
        for attr in ("path_a", "path_b", "gt_perm_path"):
            p = getattr(e, attr)
            if p is None:
                continue
            full = p if Path(p).is_absolute() else str(base / p)
            setattr(e, attr, full)
            if check_files and not Path(full).exists():
                raise FileNotFoundError(f"manifest line {n}: {full} does not exist")
        entries.append(e)
    return entries


# -- aligner checkpoints -----------------------------------------------------------

def save_checkpoint(path: str | Path, model, step: int = 0, optimizer: dict | None = None,
                    extra: dict | None = None) -> None:
    """Parameters, normalisation, config, step counter and optimizer moments in one ``.npz``."""
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    meta = {"config": model.config.to_dict(), "dims": list(model.dims), "seed": model.seed,
            "step": int(step), "extra": extra or {}}
    if optimizer:
        meta["opt_t"] = int(optimizer["t"])
        for i, (m, v) in enumerate(zip(optimizer["m"], optimizer["v"])):
            arrays[f"opt_m/{i}"] = m
            arrays[f"opt_v/{i}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    """Returns ``(model, step, optimizer_state, extra)``."""
    from .deep_align import AlignerConfig, DeepAlign

    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        opt = {}
        if "opt_t" in meta:
            n = sum(1 for k in z.files if k.startswith("opt_m/"))
            opt = {"t": meta["opt_t"], "m": [z[f"opt_m/{i}"] for i in range(n)],
                   "v": [z[f"opt_v/{i}"] for i in range(n)]}
    model = DeepAlign(meta["dims"], AlignerConfig(**meta["config"]), seed=meta["seed"])
    model.load_state_dict(state)
    return model, meta["step"], opt, meta.get("extra", {})


# -- score exports -----------------------------------------------------------------

def export_scores(Qs: Sequence[np.ndarray], path: str | Path, projected: Sequence | None = None,
                  ground_truth: PermutationSequence | None = None) -> list[Path]:
    """One CSV per layer (``<stem>_layer<m>.csv``) plus a combined JSON at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    written = []
    combined = {"scores": []}
    for m, Q in enumerate(Qs, 1):
        Q = np.asarray(Q, dtype=np.float32)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError(f"layer {m}: expected a square matrix, got {Q.shape}")
        out = Path(f"{stem}_layer{m}.csv")
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in Q:
                w.writerow([repr(float(x)) for x in row])
        written.append(out)
        combined["scores"].append(Q.tolist())
    if projected is not None:
        combined["projected"] = [np.asarray(p).tolist() for p in projected]
    if ground_truth is not None:
        combined["ground_truth"] = ground_truth.tolist()
    path.write_text(json.dumps(combined))
    return written


def import_scores(path: str | Path) -> list[np.ndarray]:
    obj = json.loads(Path(path).read_text())
    return [np.asarray(q, dtype=np.float32) for q in obj["scores"]]


def read_score_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2).astype(np.float32)
