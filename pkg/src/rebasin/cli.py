"""Command line interface: ``rebasin <subcommand> ...``.

Every run writes ``config.json`` (arguments, seed, precision) into its output
directory. Failures exit non-zero and write ``{"error": {...}}`` to stderr and,
when possible, to ``error.json`` in the output directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as rio
from .baselines import SINKHORN_REBASIN_ITERS, WARM_START_LOGIT
from .deep_align import AlignerConfig, DeepAlign, align_scores
from .evaluation import DEFAULT_GRID, auc, barrier, bench_method, interpolation_curve, write_curve
from .methods import METHODS, align_pair
from .assignment import round_stack
from .mlp import INR_LR, INR_STEPS, fit_sine_inrs, sine_task, task_loss, train_mlp
from .training import (
    AugmentConfig,
    LabeledPair,
    LabeledSampler,
    LossWeights,
    TrainState,
    UnlabeledPair,
    make_labeled_pair,
    train_aligner,
)
from .weights import apply_action

log = logging.getLogger("rebasin")

FREQ_RANGE = (0.5, 10.0)
VAL_FRACTION = 0.05
TEST_FRACTION = 0.05


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for a named purpose (``datagen``, ``init``, ...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *index])


def split_counts(count: int) -> tuple[int, int, int]:
    """Train/val/test wave counts in 90/5/5 proportions, rounding half up."""
    n_val = int(count * VAL_FRACTION + 0.5)
    n_test = int(count * TEST_FRACTION + 0.5)
    if n_val + n_test >= count:
        n_val = n_test = 0
    return count - n_val - n_test, n_val, n_test


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(args, out: Path) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["precision"] = "f64" if ad.default_dtype() == np.float64 else "f32"
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _task_for(entry: rio.ManifestEntry):
    meta = entry.meta or {}
    if "freq" not in meta:
        return None
    return sine_task(meta["freq"])


def _load_model(path):
    if path is None:
        return None
    model, _, _, _ = rio.load_checkpoint(path)
    return model


# -- gen-sine / train-inr ----------------------------------------------------------

def cmd_gen_sine(args) -> dict:
    if args.count < 1 or args.views < 1:
        raise CliError("bad_argument", "count and views must be >= 1")
    out = _out_dir(args)
    _snapshot(args, out)
    nets = out / "nets"
    nets.mkdir(exist_ok=True)
    rng = substream(args.seed, "datagen")
    freqs = rng.uniform(*FREQ_RANGE, args.count)
    seeds = [[int(x) for x in substream(args.seed, "init", i).integers(2**31, size=args.views)]
             for i in range(args.count)]
    flat_f = [freqs[i] for i in range(args.count) for _ in range(args.views)]
    flat_s = [seeds[i][j] for i in range(args.count) for j in range(args.views)]
    vecs, losses = fit_sine_inrs(flat_f, flat_s, steps=args.steps, lr=args.lr)
    resampled = 0
    for k in np.flatnonzero(~np.isfinite(losses)):
        for attempt in range(1, 11):
            new_seed = flat_s[k] + 7919 * attempt
            log.warning("fit %d diverged; resampling with seed %d", k, new_seed)
            (v,), loss = fit_sine_inrs([flat_f[k]], [new_seed], steps=args.steps, lr=args.lr)
            if np.isfinite(loss[0]):
                vecs[k], losses[k] = v, loss[0]
                resampled += 1
                break
        else:
            raise CliError("fit_diverged", f"INR {k} diverged after 10 reseeds")
    order = substream(args.seed, "split").permutation(args.count)
    n_tr, n_va, _ = split_counts(args.count)
    split_of = {}
    for pos, i in enumerate(order):
        split_of[int(i)] = "train" if pos < n_tr else ("val" if pos < n_tr + n_va else "test")
    entries = []
    for i in range(args.count):
        paths = []
        for j in range(args.views):
            p = nets / f"wave{i:05d}_view{j}.wsv"
            rio.write_wsv(vecs[i * args.views + j].astype(np.float32), p)
            paths.append(f"nets/{p.name}")
        meta = {"freq": float(freqs[i]), "fit_mse": [float(x) for x in losses[i * args.views:(i + 1) * args.views]]}
        others = paths[1:] or paths[:1]
        for j, pb in enumerate(others, 1):
            pid = f"wave{i:05d}" if len(others) == 1 else f"wave{i:05d}_v{j}"
            entries.append(rio.ManifestEntry(pid, paths[0], pb, split_of[i], meta=meta))
    rio.write_manifest(entries, out / "manifest.jsonl")
    return {"networks": len(vecs), "pairs": len(entries), "resampled": resampled,
            "splits": dict(zip(("train", "val", "test"), split_counts(args.count))),
            "mean_fit_mse": float(np.mean(losses))}


def cmd_train_inr(args) -> dict:
    out = _out_dir(args)
    _snapshot(args, out)
    task = sine_task(args.freq)
    v = train_mlp(args.seed, task, steps=args.steps, lr=args.lr)
    rio.write_wsv(v.astype(np.float32), out / "inr.wsv")
    return {"path": str(out / "inr.wsv"), "train_mse": task_loss(v, task)}


# -- make-pairs --------------------------------------------------------------------

def cmd_make_pairs(args) -> dict:
    """Labeled pairs ``(v, t^T # f_aug(v))`` with ground-truth ``t`` from a manifest's networks."""
    entries = rio.read_manifest(args.manifest)
    out = _out_dir(args)
    _snapshot(args, out)
    (out / "nets").mkdir(exist_ok=True)
    (out / "perms").mkdir(exist_ok=True)
    cfg = AugmentConfig(noise_rel=0.0 if args.no_aug else args.noise,
                        mask_prob=0.0 if args.no_aug else args.mask,
                        relu_scaling=not args.no_aug)
    new = []
    for n, e in enumerate(e for e in entries if args.split in (None, e.split)):
        v = rio.read_wsv(e.path_a)
        for c in range(args.copies):
            rng = substream(args.seed, "pairs", n, c)
            pair = make_labeled_pair(v, rng, cfg)
            pid = f"{e.id}_lab{c}"
            pb = out / "nets" / f"{pid}.wsv"
            rio.write_wsv(pair.v_prime.astype(v.dtype), pb)
            gt = out / "perms" / f"{pid}.json"
            rio.write_perm(pair.target, v.dims, gt)
            new.append(rio.ManifestEntry(pid, str(Path(e.path_a).resolve()), f"nets/{pb.name}", e.split,
                                         f"perms/{gt.name}", e.meta))
    rio.write_manifest(new, out / "manifest.jsonl")
    return {"pairs": len(new)}


# -- train-align -------------------------------------------------------------------

def _write_curves(state: TrainState, path: Path) -> None:
    keys = ["step", "total", "sup", "align", "lmc"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in zip(*(state.curves[k] for k in keys)):
            w.writerow(row)


def cmd_train_align(args) -> dict:
    entries = [e for e in rio.read_manifest(args.manifest) if e.split == "train"]
    if not entries:
        raise CliError("empty_dataset", "manifest has no training pairs")
    out = _out_dir(args)
    _snapshot(args, out)
    weights = LossWeights.from_names(args.losses.split(","))
    weights.validate()
    nets = [(rio.read_wsv(e.path_a), rio.read_wsv(e.path_b), _task_for(e)) for e in entries]
    labeled = [LabeledPair(a, b, rio.read_perm(e.gt_perm_path)[0], t)
               for e, (a, b, t) in zip(entries, nets) if e.gt_perm_path]
    unlabeled = [UnlabeledPair(a, b, t) for e, (a, b, t) in zip(entries, nets) if not e.gt_perm_path]
    if not labeled:
        # synthesise fresh labeled pairs from every training network on the fly
        pool = [a for a, _, _ in nets] + [b for _, b, _ in nets]
        tasks = [t for _, _, t in nets] * 2
        labeled = LabeledSampler(pool, tasks, AugmentConfig(noise_rel=args.noise, mask_prob=args.mask))
    if args.checkpoint:
        model, step, opt, _ = rio.load_checkpoint(args.checkpoint)
        state = TrainState(step=step, optimizer=opt)
    else:
        cfg = AlignerConfig(hidden=args.hidden, out=args.out_dim, depth=args.depth)
        model = DeepAlign(nets[0][0].dims, cfg, seed=args.seed)
        model.fit_normalization([a for a, _, _ in nets] + [b for _, b, _ in nets])
        state = TrainState()
    if args.steps > 0:
        state = train_aligner(model, labeled, unlabeled, weights, args.steps, lr=args.lr,
                              batch=args.batch, seed=args.seed, state=state, log_every=args.log_every,
                              lmc_hard=args.lmc_hard, sup_on_sinkhorn=args.sup_on_sinkhorn)
    ckpt = out / "aligner.npz"
    rio.save_checkpoint(ckpt, model, state.step, state.optimizer,
                        extra={"losses": args.losses, "manifest": str(args.manifest)})
    _write_curves(state, out / "loss_curves.csv")
    return {"checkpoint": str(ckpt), "step": state.step}


# -- align / eval / bench ------------------------------------------------------------

def _align_job(job):
    (method, path_a, path_b, task_freq, ckpt, iters, kappa, seed, precision) = job
    ad.set_precision(precision)
    v, v2 = rio.read_wsv(path_a), rio.read_wsv(path_b)
    task = sine_task(task_freq) if task_freq is not None else None
    model = _load_model(ckpt)
    return align_pair(method, v, v2, task, model, iters, kappa, seed)


def _pairs_from_args(args):
    if args.pair:
        meta = {"freq": args.freq} if args.freq is not None else None
        return [rio.ManifestEntry("pair", args.pair[0], args.pair[1], "test", meta=meta)]
    if not args.manifest:
        raise CliError("bad_argument", "give --pair A B or --manifest")
    entries = rio.read_manifest(args.manifest)
    if args.split:
        entries = [e for e in entries if e.split == args.split]
    if args.limit:
        entries = entries[:args.limit]
    if not entries:
        raise CliError("empty_dataset", "no pairs selected")
    return entries


def _precision_name() -> str:
    return "f64" if ad.default_dtype() == np.float64 else "f32"


def cmd_align(args) -> dict:
    if args.method.startswith("deep-align") and not args.checkpoint:
        raise CliError("missing_checkpoint", f"{args.method} requires --checkpoint")
    if args.checkpoint and not Path(args.checkpoint).exists():
        raise CliError("missing_checkpoint", f"{args.checkpoint} not found")
    entries = _pairs_from_args(args)
    out = _out_dir(args)
    _snapshot(args, out)
    perm_dir = out / "perms"
    perm_dir.mkdir(exist_ok=True)
    jobs = [(args.method, e.path_a, e.path_b, (e.meta or {}).get("freq"), args.checkpoint,
             args.sinkhorn_iters, args.kappa, args.seed, _precision_name()) for e in entries]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_align_job, jobs))
    else:
        results = [_align_job(j) for j in jobs]
    report = []
    for e, res in zip(entries, results):
        dims = rio.read_wsv(e.path_a).dims
        rio.write_perm(res.perm, dims, perm_dir / f"{e.id}.json")
        report.append({"id": e.id, **res.to_json()})
    (out / "report.json").write_text(json.dumps({"method": args.method, "pairs": report}, indent=1) + "\n")
    return {"method": args.method, "pairs": len(report),
            "mean_wall_time": float(np.mean([r["wall_time"] for r in report]))}


def _summary(values) -> dict:
    values = np.asarray(values, dtype=np.float64)
    return {"mean": float(values.mean()), "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0}


def cmd_eval(args) -> dict:
    """Barrier/AUC per pair for each ``--perms`` directory (one per seed), then mean/std."""
    entries = _pairs_from_args(args)
    out = _out_dir(args)
    _snapshot(args, out)
    rows = []
    per_seed = []
    for s, pdir in enumerate(args.perms or [None]):
        bs, aus = [], []
        for e in entries:
            v, v2 = rio.read_wsv(e.path_a), rio.read_wsv(e.path_b)
            task = _task_for(e)
            if task is None:
                raise CliError("missing_artifact", f"pair {e.id} has no task metadata")
            if pdir is not None:
                pf = Path(pdir) / f"{e.id}.json"
                if not pf.exists():
                    raise CliError("missing_artifact", f"no permutation for {e.id} in {pdir}")
                k, _ = rio.read_perm(pf)
                v2 = apply_action(k, v2)
            curve = interpolation_curve(v, v2, task, args.grid)
            if args.curves:
                write_curve(curve, out / "curves" / f"run{s}_{e.id}.csv", {"id": e.id, "run": s})
            b, a = barrier(curve), auc(curve)
            bs.append(b)
            aus.append(a)
            rows.append({"run": s, "perms": str(pdir), "id": e.id, "barrier": b, "auc": a})
        per_seed.append((np.mean(bs), np.mean(aus)))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["run", "perms", "id", "barrier", "auc"])
        w.writeheader()
        w.writerows(rows)
    per_seed = np.array(per_seed)
    summary = {"pairs": len(entries), "runs": len(per_seed), "grid": args.grid,
               "barrier_mean": float(per_seed[:, 0].mean()),
               "barrier_std": _summary(per_seed[:, 0])["std"],
               "auc_mean": float(per_seed[:, 1].mean()),
               "auc_std": _summary(per_seed[:, 1])["std"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_bench(args) -> dict:
    entries = _pairs_from_args(args)
    out = _out_dir(args)
    _snapshot(args, out)
    model = _load_model(args.checkpoint)
    pairs = [(rio.read_wsv(e.path_a), rio.read_wsv(e.path_b)) for e in entries]
    tasks = {id(p[0]): _task_for(e) for p, e in zip(pairs, entries)}
    rows = []
    for method in args.methods.split(","):
        method = method.strip()
        if method not in METHODS:
            raise CliError("bad_argument", f"unknown method {method!r}")
        if method.startswith("deep-align") and model is None:
            raise CliError("missing_checkpoint", f"{method} requires --checkpoint")

        def run(v, v2, method=method):
            return align_pair(method, v, v2, tasks[id(v)], model, args.sinkhorn_iters, args.kappa, args.seed)

        res = bench_method(method, run, pairs, args.reps)
        rows.append({**res.to_json(), "reps": args.reps})
    with open(out / "runtime.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["method", "mean_sec", "std_sec", "reps", "pairs"])
        w.writeheader()
        w.writerows(rows)
    return {"methods": rows}


def cmd_export_scores(args) -> dict:
    if not args.checkpoint:
        raise CliError("missing_checkpoint", "export-scores requires --checkpoint")
    model = _load_model(args.checkpoint)
    v, v2 = rio.read_wsv(args.pair[0]), rio.read_wsv(args.pair[1])
    Qs = align_scores(v, v2, model)
    hard = round_stack(Qs)
    gt = rio.read_perm(args.gt)[0] if args.gt else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(args, out)
    files = rio.export_scores(Qs, out / "scores.json", projected=hard.tolist(), ground_truth=gt)
    result = {"layers": len(files), "hard": hard.tolist()}
    if gt is not None:
        result["matches_ground_truth"] = hard == gt
    return result


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rebasin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    def pair_source(sp):
        sp.add_argument("--pair", nargs=2, metavar=("A", "B"), help="two .wsv files")
        sp.add_argument("--freq", type=float, help="sine frequency of a --pair (task data)")
        sp.add_argument("--manifest")
        sp.add_argument("--split", default="test", help="manifest split to use ('' for all)")
        sp.add_argument("--limit", type=int, default=0)

    def method_flags(sp):
        sp.add_argument("--checkpoint")
        sp.add_argument("--sinkhorn-iters", type=int, default=SINKHORN_REBASIN_ITERS)
        sp.add_argument("--kappa", type=float, default=WARM_START_LOGIT,
                        help="warm-start logit scale for deep-align+sinkhorn")

    sp = common(sub.add_parser("gen-sine", help="fit a sine-wave INR dataset"))
    sp.add_argument("--count", type=int, default=2000)
    sp.add_argument("--views", type=int, default=2)
    sp.add_argument("--steps", type=int, default=INR_STEPS)
    sp.add_argument("--lr", type=float, default=INR_LR)
    sp.set_defaults(func=cmd_gen_sine)

    sp = common(sub.add_parser("train-inr", help="fit one sine INR"))
    sp.add_argument("--freq", type=float, required=True)
    sp.add_argument("--steps", type=int, default=INR_STEPS)
    sp.add_argument("--lr", type=float, default=INR_LR)
    sp.set_defaults(func=cmd_train_inr)

    sp = common(sub.add_parser("make-pairs", help="labeled pairs with ground-truth permutations"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--copies", type=int, default=1)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--mask", type=float, default=0.05)
    sp.add_argument("--no-aug", action="store_true", help="noiseless pairs")
    sp.set_defaults(func=cmd_make_pairs)

    sp = common(sub.add_parser("train-align", help="train the learned aligner"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--losses", default="sup,lmc")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--lr", type=float, default=5e-4)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--hidden", type=int, default=64)
    sp.add_argument("--out-dim", type=int, default=128)
    sp.add_argument("--depth", type=int, default=4)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--mask", type=float, default=0.05)
    sp.add_argument("--log-every", type=int, default=50)
    sp.add_argument("--lmc-hard", action="store_true",
                    help="LMC loss on rounded permutations with straight-through gradients")
    sp.add_argument("--sup-on-sinkhorn", action="store_true",
                    help="supervised loss on Sinkhorn output instead of raw scores")
    sp.add_argument("--checkpoint", help="resume from this checkpoint")
    sp.set_defaults(func=cmd_train_align)

    sp = common(sub.add_parser("align", help="align pairs with one method"))
    sp.add_argument("--method", choices=METHODS, required=True)
    sp.add_argument("--jobs", type=int, default=1)
    pair_source(sp)
    method_flags(sp)
    sp.set_defaults(func=cmd_align)

    sp = common(sub.add_parser("eval", help="barrier and AUC of aligned pairs"))
    pair_source(sp)
    sp.add_argument("--perms", nargs="*", help="permutation directories (one per seed); none = naive")
    sp.add_argument("--grid", type=int, default=DEFAULT_GRID)
    sp.add_argument("--curves", action="store_true", help="also write per-pair curve CSVs")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("bench", help="alignment wall time per pair"))
    sp.add_argument("--methods", default="naive,wm,am,deep-align")
    sp.add_argument("--reps", type=int, default=3)
    pair_source(sp)
    method_flags(sp)
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("export-scores", help="dump raw aligner scores for one pair"))
    sp.add_argument("--pair", nargs=2, metavar=("A", "B"), required=True)
    sp.add_argument("--gt", help="ground-truth permutation file")
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_export_scores)
    return p


def _error_payload(exc: BaseException) -> dict:
    code = getattr(exc, "code", None) or type(exc).__name__
    return {"error": {"code": code, "type": type(exc).__name__, "message": str(exc)}}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "split", None) == "":
        args.split = None
    try:
        result = args.func(args)
    except (CliError, rio.FormatError, ValueError, FileNotFoundError, KeyError, ad.NonFiniteError,
            ZeroDivisionError) as exc:
        payload = _error_payload(exc)
        print(json.dumps(payload), file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            try:
                Path(out).mkdir(parents=True, exist_ok=True)
                (Path(out) / "error.json").write_text(json.dumps(payload, indent=2) + "\n")
            except OSError:
                pass
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
