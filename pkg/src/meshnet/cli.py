"""``meshnet`` command line: preprocess, train, eval, embed, retrieve, gradcheck, params, visualize."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .model import AGGREGATION_MODES, REFERENCE_PARAM_COUNT, ConfigError, ablation_configs

log = logging.getLogger("meshnet")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3
MESH_SUFFIXES = (".off", ".obj")
PREDICT_BATCH = 16


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    env = os.environ.get("MESHNET_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MESHNET_SEED must be an integer, got {env!r}") from None


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# ---------------------------------------------------------------- preprocess

def _scan(root: Path) -> tuple[list[str], dict[str, list[tuple[Path, int]]]]:
    categories = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not categories:
        raise UsageError(f"{root}: no class directories")
    splits: dict[str, list[tuple[Path, int]]] = {"train": [], "test": []}
    for label, name in enumerate(categories):
        for split in splits:
            d = root / name / split
            if d.is_dir():
                files = sorted(p for p in d.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
                splits[split] += [(p, label) for p in files]
    return categories, splits


def _prepare_one(job):
    from .mesh_io import DatasetRecord, load_mesh
    from .preprocess import fill_to_budget, prepare

    path, label, faces, seed = job
    try:
        fs = prepare(load_mesh(path), faces)
    except Exception as e:  # reported and skipped by the caller
        return None, f"{path}: {e}"
    filled = fill_to_budget(fs, faces, np.random.default_rng(seed))
    return DatasetRecord(filled, label, fs.F, str(path)), None


def cmd_preprocess(args) -> int:
    from .mesh_io import write_cache, write_manifest

    root = Path(args.root)
    if not root.is_dir():
        raise UsageError(f"{root}: not a directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    categories, splits = _scan(root)
    manifest_splits, skipped = {}, []
    for s_idx, (split, items) in enumerate(splits.items()):
        jobs = [(p, lab, args.faces, [args.seed, s_idx, i]) for i, (p, lab) in enumerate(items)]
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                results = list(pool.map(_prepare_one, jobs, chunksize=4))
        else:
            results = [_prepare_one(j) for j in jobs]
        records = []
        for rec, err in results:
            if err:
                log.warning("skipping %s", err)
                skipped.append(err)
            else:
                records.append(rec)
        write_cache(records, out / f"{split}.mnet", num_categories=len(categories))
        manifest_splits[split] = [os.path.relpath(r.source_path, root) for r in records]
        print(f"{split}: {len(records)} records -> {out / f'{split}.mnet'}")
    write_manifest(out / "manifest.json", {c: i for i, c in enumerate(categories)}, manifest_splits,
                   faces=args.faces, seed=args.seed, skipped=skipped)
    return EXIT_OK


# ---------------------------------------------------------------- helpers

def _run_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    model = {}
    if getattr(args, "ablation", None):
        abl = ablation_configs(cfg.model)[args.ablation]
        model.update({k: v for k, v in abl.to_dict().items() if v != cfg.model.to_dict()[k]})
    if getattr(args, "aggregation", None):
        model["aggregation_mode"] = args.aggregation
    train = {k: getattr(args, k, None) for k in ("epochs", "batch_size", "lr", "seed")}
    paths = {k: getattr(args, k, None) for k in ("train_cache", "test_cache", "manifest", "checkpoint", "out_dir")}
    return cfg.override(model=model, train=train, paths=paths)


def _class_names(manifest: str | None, n: int) -> list[str] | None:
    if not manifest:
        return None
    from .mesh_io import read_manifest

    cats = read_manifest(manifest)["categories"]
    names = sorted(cats, key=cats.get)
    return names if len(names) == n else None


_WORKER_MODEL = None


def _init_worker(checkpoint):
    global _WORKER_MODEL
    from .checkpoint import load_checkpoint

    _WORKER_MODEL = load_checkpoint(checkpoint)[0]


def _predict_chunk(records):
    from .evaluation import predict

    return predict(_WORKER_MODEL, records, PREDICT_BATCH)


def _predict(model, records, checkpoint, jobs: int):
    """Eval-mode logits and features, optionally split across worker processes.

    Chunks are cut on batch boundaries so every worker sees the same batches
    a serial run would, which keeps the output independent of ``jobs``.
    """
    from .evaluation import predict

    n_batches = -(-len(records) // PREDICT_BATCH)
    if jobs <= 1 or n_batches < 2:
        return predict(model, records, PREDICT_BATCH)
    per_job = -(-n_batches // jobs) * PREDICT_BATCH
    chunks = [records[i:i + per_job] for i in range(0, len(records), per_job)]
    with ProcessPoolExecutor(min(jobs, len(chunks)), initializer=_init_worker, initargs=(checkpoint,)) as pool:
        parts = list(pool.map(_predict_chunk, chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- train / eval / embed / retrieve

def cmd_train(args) -> int:
    from .mesh_io import read_cache
    from .model import MeshNet
    from .plotting import plot_training_curves
    from .train import train

    cfg = _run_config(args).validate()
    if "train_cache" not in cfg.paths:
        raise UsageError("train needs --train-cache (or paths.train_cache in --config)")
    train_records, ncat = read_cache(cfg.paths["train_cache"])
    test_records = read_cache(cfg.paths["test_cache"])[0] if "test_cache" in cfg.paths else None
    if cfg.model.num_classes != ncat:
        cfg.model = cfg.model.replace(classifier_widths=cfg.model.classifier_widths[:-1] + (ncat,))
    out = Path(cfg.paths.get("out_dir", "run"))
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    model = MeshNet(cfg.model, seed=cfg.train.seed)
    log_path = out / "metrics.jsonl"
    log_path.unlink(missing_ok=True)
    history = train(train_records, cfg.train, model, test_records, log_path=log_path, checkpoint_dir=out)
    plot_training_curves(history, out / "training_curves.png")
    last = history[-1] if history else None
    if last:
        print(f"epoch {last['epoch']}: {last['split']} loss {last['loss']:.4f} accuracy {last['accuracy']:.4f}")
    print(f"checkpoints and logs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import format_report, precision_recall_curve, report_from_outputs
    from .mesh_io import read_cache
    from .plotting import plot_face_count_groups, plot_per_class_accuracy, plot_precision_recall

    model, _, _ = load_checkpoint(args.checkpoint)
    records, _ = read_cache(args.data)
    if not records:
        raise UsageError(f"{args.data}: empty evaluation set")
    logits, emb = _predict(model, records, args.checkpoint, args.jobs)
    labels = np.array([r.label for r in records])
    counts = np.array([r.face_count for r in records])
    ncls = model.config.num_classes
    report = report_from_outputs(logits, emb, labels, counts, ncls, budget=records[0].face_set.F)
    names = _class_names(args.manifest, ncls)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(format_report(report, names))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        _write_csv(out / "per_class.csv", ["class", "name", "accuracy"],
                   [(c, names[c] if names else c, a) for c, a in enumerate(report.per_class_accuracy)])
        _write_csv(out / "face_groups.csv", ["range", "count", "proportion", "accuracy"],
                   [(g.label, g.count, g.proportion, g.accuracy) for g in report.face_count_groups])
        plot_per_class_accuracy(report.per_class_accuracy, out / "per_class.png", names)
        plot_face_count_groups(report.face_count_groups, out / "face_groups.png")
        rec, prec = precision_recall_curve(emb, labels)
        plot_precision_recall(rec, prec, out / "precision_recall.png", report.mAP)
    return EXIT_OK


def cmd_embed(args) -> int:
    from .checkpoint import load_checkpoint, write_embeddings
    from .mesh_io import read_cache

    model, _, _ = load_checkpoint(args.checkpoint)
    records, _ = read_cache(args.data)
    _, emb = _predict(model, records, args.checkpoint, args.jobs)
    labels = np.array([r.label for r in records])
    write_embeddings(args.out, emb.astype(np.float32), labels, source=str(args.data))
    print(f"{emb.shape[0]} x {emb.shape[1]} embeddings -> {args.out}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    from .checkpoint import read_embeddings
    from .evaluation import precision_recall_curve, retrieval_map, retrieval_ranking
    from .plotting import plot_precision_recall

    emb, labels, _ = read_embeddings(args.embeddings)
    if args.query is not None:
        if not 0 <= args.query < len(emb):
            raise UsageError(f"query index {args.query} outside [0, {len(emb)})")
        order = retrieval_ranking(emb.astype(np.float64), args.query)[: args.top]
        d = np.linalg.norm(emb[order].astype(np.float64) - emb[args.query], axis=1)
        print(f"{'rank':>4} {'index':>6} {'label':>6} {'distance':>10}")
        for r, (i, dist) in enumerate(zip(order, d), 1):
            print(f"{r:>4} {i:>6} {labels[i]:>6} {dist:>10.4f}")
    mAP, aps = retrieval_map(emb, labels, return_per_query=True)
    print(f"mAP {mAP:.4f} over {sum(a is not None for a in aps)} of {len(aps)} queries")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "per_query_ap.csv", ["query", "label", "ap"],
                   [(q, int(labels[q]), "" if a is None else repr(a)) for q, a in enumerate(aps)])
        rec, prec = precision_recall_curve(emb, labels)
        _write_csv(out / "precision_recall.csv", ["recall", "precision"], zip(rec, prec))
        plot_precision_recall(rec, prec, out / "precision_recall.png", mAP)
    return EXIT_OK


# ---------------------------------------------------------------- verification and reports

def cmd_gradcheck(args) -> int:
    from .gradcheck import REL_TOL, run_all

    t0 = time.perf_counter()
    results = run_all(seed=args.seed, batch=args.batch, faces=args.faces)
    print(f"{'op':<26}{'max rel error':>15}{'checked':>9}{'skipped':>9}  status")
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op:<26}{r.max_error:>15.3e}{r.checked:>9}{r.skipped:>9}  {status}")
    failed = [r.op for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ops below {REL_TOL:g} in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_params(args) -> int:
    from .model import mac_estimate, param_breakdown
    from .plotting import plot_param_breakdown

    cfg = _run_config(args).validate(check_paths=False).model
    parts = param_breakdown(cfg)
    total = sum(parts.values())
    macs = mac_estimate(cfg, args.faces)
    print(f"{'module':<26}{'params':>12}{'MACs':>16}")
    for name, n in parts.items():
        print(f"{name:<26}{n:>12,}{macs.get(name, 0):>16,}")
    print(f"{'total':<26}{total:>12,}{sum(macs.values()):>16,}")
    delta = total - REFERENCE_PARAM_COUNT
    print(f"reference 4.25M: delta {delta:+,.0f} ({100 * delta / REFERENCE_PARAM_COUNT:+.1f}%)")
    print(f"notes: {cfg.fkc_vectors_per_kernel} vectors per kernel; fusion {cfg.fusion_in()} -> {cfg.fusion_width}; "
          f"MACs per {args.faces}-face sample")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "params.csv", ["module", "params", "macs"],
                   [(k, v, macs.get(k, 0)) for k, v in parts.items()] + [("total", total, sum(macs.values()))])
        plot_param_breakdown(parts, out / "params.png")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .checkpoint import load_checkpoint
    from .mesh_io import load_mesh
    from .visualize import visualize

    model, _, _ = load_checkpoint(args.checkpoint)
    width = model.config.frc_k2 if args.which == "frc" else model.config.fkc_kernels
    if not 0 <= args.channel < width:
        raise UsageError(f"channel {args.channel} out of range for {args.which} (width {width})")
    res = visualize(model, load_mesh(args.mesh), args.channel, args.which, args.out,
                    faces=args.faces, render=not args.no_render)
    for kind, p in res["paths"].items():
        print(f"{kind}: {p}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshnet", description="Face-based mesh classification and retrieval.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def seed_arg(sp):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $MESHNET_SEED or 0)")

    def jobs_arg(sp):
        sp.add_argument("--jobs", type=int, default=default_jobs(), help="worker processes")

    def model_args(sp):
        sp.add_argument("--config", help="run config JSON (model/train/paths sections)")
        sp.add_argument("--ablation", choices=sorted(ablation_configs()), help="descriptor ablation preset")
        sp.add_argument("--aggregation", choices=AGGREGATION_MODES, help="mesh-conv aggregation mode")

    sp = sub.add_parser("preprocess", help="build face-set caches from a <class>/<split>/*.off tree")
    sp.add_argument("root")
    sp.add_argument("--out", required=True, help="output directory for train.mnet, test.mnet, manifest.json")
    sp.add_argument("--faces", type=int, default=1024)
    seed_arg(sp)
    jobs_arg(sp)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train a model on a cache")
    model_args(sp)
    sp.add_argument("--train-cache")
    sp.add_argument("--test-cache")
    sp.add_argument("--out-dir", help="directory for checkpoints, metrics.jsonl and figures")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    seed_arg(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy, retrieval mAP and face-count groups")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="cache file to evaluate")
    sp.add_argument("--manifest", help="manifest for class names")
    sp.add_argument("--json", action="store_true", help="print the report as JSON")
    sp.add_argument("--out-dir", help="write report.json, CSV tables and figures here")
    jobs_arg(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("embed", help="write global features for a cache")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    jobs_arg(sp)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("retrieve", help="L2 retrieval mAP over an embeddings file")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--query", type=int, help="print the ranking for this sample")
    sp.add_argument("--top", type=int, default=10)
    sp.add_argument("--out-dir", help="write per-query AP, precision-recall CSV and figure here")
    sp.set_defaults(func=cmd_retrieve)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer op")
    seed_arg(sp)
    sp.add_argument("--faces", type=int, default=8)
    sp.add_argument("--batch", type=int, default=2)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("params", help="parameter and multiply-accumulate counts")
    model_args(sp)
    sp.add_argument("--faces", type=int, default=1024)
    sp.add_argument("--out-dir", help="write params.csv and params.png here")
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("visualize", help="color mesh faces by one structural feature channel")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--channel", type=int, required=True)
    sp.add_argument("--which", choices=("frc", "fkc"), required=True)
    sp.add_argument("--out", required=True, help="output prefix (.ply, .csv, .png)")
    sp.add_argument("--faces", type=int, default=1024)
    sp.add_argument("--no-render", action="store_true", help="skip the PNG render")
    sp.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = default_seed()
        for name in ("jobs", "faces", "top", "batch"):
            if getattr(args, name, 1) < 1:
                raise UsageError(f"--{name} must be >= 1")
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, IsADirectoryError) as e:
        print(f"meshnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        log.debug("runtime failure", exc_info=True)
        print(f"meshnet: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
