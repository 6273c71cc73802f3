"""Command line entry point.

    mochi train --config CFG [--out DIR] [--set key=value ...] [--workers N]
    mochi eval --checkpoint CKPT (--data CSV | --config CFG) [--split-seed S] [--out DIR]
    mochi analyze --embeddings CSV [--alpha A] [--t T] [--top-m M] [--out DIR]
    mochi demo-synthesis --config CFG [--out DIR] [--queries Q] [--set key=value ...]

Exit status 0 on success, 2 on configuration or input-format errors, 1 on
any other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .config import TrainConfig, dump_config, load_config
from .datasets import ToyDataset, load_csv, make_sphere_clusters, split, write_csv
from .encoder import encode
from .errors import ClassTooSmall, ConfigInvalid, InvalidInput, MochiError, TooFewPoints
from .memory_queue import QueueSnapshot
from .rng import DEMO, keyed_rng
from .synthesis import synthesize
from .trainer import load_checkpoint, run
from .vecspace import l2_normalize, pca_project_2d

DEMO_DIM = 32
TRAIN_FRACTION = 0.8
PROBE_EPOCHS = 500
PROBE_LR = 1.0


class UsageError(MochiError):
    pass


def build_dataset(cfg: TrainConfig) -> ToyDataset:
    d = cfg.dataset
    if d.kind == "csv":
        return load_csv(d.path)
    return make_sphere_clusters(d.classes, d.per_class, d.input_dim, d.separation, d.spread, d.seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, output_dir=str(out))
    (out / "resolved-config.json").write_text(dump_config(cfg))
    dataset = build_dataset(cfg)
    history, _ = run(cfg, dataset, out, workers=args.workers)
    if history:
        last = history[-1]
        print(f"epoch {last['epoch']}: loss {last['mean_loss']:.4f} proxy {last['proxy_accuracy']:.3f}")
    print(f"wrote {out}")
    return 0


def probe_report(inputs, labels, params, split_seed: int) -> tuple[dict, np.ndarray]:
    emb = encode(params, inputs)
    data = ToyDataset(emb, labels)
    train, test = split(data, TRAIN_FRACTION, split_seed)
    acc = analysis.linear_probe(
        analysis.LabeledEmbeddingSet(train.inputs, train.labels),
        analysis.LabeledEmbeddingSet(test.inputs, test.labels),
        PROBE_EPOCHS,
        PROBE_LR,
    )
    report = {
        "probe_accuracy": acc,
        "n_train": len(train),
        "n_test": len(test),
        "split_seed": split_seed,
        "train_fraction": TRAIN_FRACTION,
    }
    return report, emb


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    if args.data:
        dataset = load_csv(args.data)
    elif args.config:
        dataset = build_dataset(load_config(args.config, args.set))
    else:
        raise UsageError("eval needs --data or --config")
    if dataset.dim != ckpt.pair.query.in_dim:
        raise ConfigInvalid(f"dataset has width {dataset.dim}, encoder expects {ckpt.pair.query.in_dim}")
    report, emb = probe_report(dataset.inputs, dataset.labels, ckpt.pair.query, args.split_seed)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    write_csv(out / "embeddings.csv", emb, dataset.labels)
    print(f"probe accuracy {report['probe_accuracy']:.4f}")
    return 0


def analysis_report(features, labels, alpha: float, t: float, top_m: int, seed: int = 0) -> dict:
    """The analysis report; fields that cannot be computed for the input are null."""
    emb = analysis.LabeledEmbeddingSet(features, labels)
    align = analysis.class_alignment(emb, alpha, seed)
    try:
        train, test = split(ToyDataset(features, labels), TRAIN_FRACTION, seed)
        probe = analysis.linear_probe(
            analysis.LabeledEmbeddingSet(train.inputs, train.labels),
            analysis.LabeledEmbeddingSet(test.inputs, test.labels),
            PROBE_EPOCHS,
            PROBE_LR,
        )
    except ClassTooSmall:
        probe = None
    try:
        _, retained = pca_project_2d(features)
    except TooFewPoints:
        retained = None
    return {
        "neg_uniformity": -analysis.uniformity_loss(features, t),
        "neg_alignment": align,
        "probe_accuracy": probe,
        "fn_fraction_top_m": analysis.mean_fn_fraction(emb, top_m),
        "retained_variance_2d": retained,
    }


def cmd_analyze(args) -> int:
    if not args.embeddings:
        raise UsageError("analyze needs --embeddings")
    data = load_csv(args.embeddings)
    feats = data.inputs
    norms = np.linalg.norm(feats, axis=1)
    if feats.shape[0] < 2 or np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidInput("embeddings must be at least 2 unit-norm rows")
    report = analysis_report(feats, data.labels, args.alpha, args.t, args.top_m, args.seed)
    out = Path(args.out or Path(args.embeddings).parent)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def demo_rows(cfg: TrainConfig, queries: int):
    """Random unit negatives, ``queries`` random queries and their synthetics."""
    m = cfg.mochi
    if m is None:
        raise ConfigInvalid("demo-synthesis needs a mochi section", "mochi")
    rng = keyed_rng(cfg.seed, DEMO)
    negatives = l2_normalize(rng.standard_normal((cfg.queue_capacity, DEMO_DIM)))
    snap = QueueSnapshot(negatives)
    rows = [("negative", -1, i, -1, float("nan"), v) for i, v in enumerate(negatives)]
    for qi in range(queries):
        q = l2_normalize(rng.standard_normal(DEMO_DIM))
        k = l2_normalize(q + 0.1 * rng.standard_normal(DEMO_DIM))
        rows.append(("query", qi, -1, -1, float("nan"), q))
        for h in synthesize(q, k, snap, m, m.warmup_epochs, keyed_rng(cfg.seed, DEMO, qi + 1)):
            a = h.source_indices[0]
            b = h.source_indices[1] if len(h.source_indices) > 1 else -1
            rows.append((h.kind.value, qi, a, b, h.coefficient, h.feature))
    return rows


def cmd_demo(args) -> int:
    cfg = load_config(args.config, args.set)
    rows = demo_rows(cfg, args.queries)
    coords, retained = pca_project_2d(np.stack([r[-1] for r in rows]))
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "demo.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "query", "source_a", "source_b", "coefficient", "pc0", "pc1"] + [f"c{i}" for i in range(DEMO_DIM)])
        for (kind, qi, a, b, coef, vec), pc in zip(rows, coords):
            w.writerow([kind, qi, a, b, "" if np.isnan(coef) else repr(coef), repr(float(pc[0])), repr(float(pc[1]))] + [repr(float(v)) for v in vec])
    print(f"wrote {out / 'demo.csv'} (retained variance {retained:.3f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mochi", description="Momentum contrast with hard negative mixing (toy scale).")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required):
        sp.add_argument("--config", required=config_required, help="JSON run config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")

    t = sub.add_parser("train", help="train and write metrics.jsonl and checkpoints")
    common(t, True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="linear probe of a checkpoint's query encoder")
    common(e, False)
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="labeled input CSV (label,c0,...)")
    e.add_argument("--split-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="alignment/uniformity/FN report for an embedding CSV")
    common(a, False)
    a.add_argument("--embeddings")
    a.add_argument("--alpha", type=float, default=2.0)
    a.add_argument("--t", type=float, default=2.0)
    a.add_argument("--top-m", type=int, default=64)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("demo-synthesis", help="synthetic negatives for random embeddings, with PCA coordinates")
    common(d, True)
    d.add_argument("--queries", type=int, default=2)
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        where = f" [{exc.key}]" if exc.key else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return 2
    except (InvalidInput, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
