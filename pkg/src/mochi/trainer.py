"""Momentum-contrast training loop with optional hard negative mixing.

One step, for a batch of raw inputs:

1. two augmented views per sample (keyed noise + gain)
2. queries from the query encoder, keys from the key encoder
3. negatives = queue snapshot (or the batch's other keys while the queue
   holds fewer than ``batch_size`` entries), optionally oracle-filtered
4. synthetic negatives appended to each query's logits after warm-up
5. loss gradient w.r.t. each query, backprop, SGD on the query encoder
6. momentum update of the key encoder, then the keys enter the queue

Synthetic negatives are constants for the gradient and never enter the queue.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import TrainConfig
from .datasets import ToyDataset
from .encoder import EncoderPair, EncoderParams, Layer, backward, encode, forward, init_params, momentum_update, sgd_update
from .errors import ConfigInvalid, MissingLabels, ParseError
from .infonce import batch_logits, batch_loss_and_probs
from .memory_queue import NegativeQueue
from .rng import AUGMENT, SHUFFLE, SYNTH, keyed_rng
from .synthesis import synthesize_batch

HIDDEN_WIDTH = 128
METRIC_TOP_M = 64
CHECKPOINT_VERSION = "mochi-ckpt-1"
WALL_CLOCK_FIELD = "wall_clock_seconds"


def cosine_lr(epoch: float, total_epochs: int, base_lr: float) -> float:
    if total_epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def augment(x, sigma: float, rng: np.random.Generator, gain_range=(0.8, 1.2)) -> np.ndarray:
    """``(x + N(0, sigma^2)) * gain`` with one gain per view.

    ``gain_range=None`` disables the gain (the identity when sigma is 0).
    """
    x = np.asarray(x, dtype=np.float64)
    noise = rng.normal(0.0, sigma, size=x.shape) if sigma > 0 else np.zeros_like(x)
    gain = 1.0 if gain_range is None else rng.uniform(*gain_range)
    return (x + noise) * gain


def augment_pair(x: np.ndarray, sigma: float, seed: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Query and key views for a batch; sample ``i`` draws from key (seed, AUGMENT, step, i)."""
    xq = np.empty_like(x, dtype=np.float64)
    xk = np.empty_like(x, dtype=np.float64)
    for i, row in enumerate(x):
        rng = keyed_rng(seed, AUGMENT, step, i)
        xq[i] = augment(row, sigma, rng)
        xk[i] = augment(row, sigma, rng)
    return xq, xk


def layer_sizes(config: TrainConfig, input_dim: int) -> list[int]:
    return [input_dim, HIDDEN_WIDTH, config.embed_dim]


@dataclass
class TrainState:
    pair: EncoderPair
    queue: NegativeQueue
    step: int = 0
    epoch: int = 0
    seed: int = 0


def init_state(config: TrainConfig, input_dim: int) -> TrainState:
    query = init_params(layer_sizes(config, input_dim), config.seed)
    return TrainState(
        EncoderPair.from_query(query, config.momentum),
        NegativeQueue(config.queue_capacity, config.embed_dim),
        0,
        0,
        config.seed,
    )


@dataclass
class StepMetrics:
    """Per-query diagnostics for one step; rows of skipped queries are dropped."""

    losses: np.ndarray
    proxy_hit: np.ndarray  # key beats every negative incl. synthetics
    proxy_hit_base: np.ndarray  # key beats every queue negative
    profile_rows: np.ndarray  # (n, METRIC_TOP_M) sorted negative matching probs
    fn_top: Optional[np.ndarray]
    fn_top_unfiltered: Optional[np.ndarray]
    fn_in_negatives: Optional[int]
    syn_fn_one: Optional[np.ndarray]
    syn_fn_both: Optional[np.ndarray]
    syn_fn_query_mix: Optional[np.ndarray]
    synthetic_count: int
    logit_count: np.ndarray  # extended negatives per query (valid ones)
    skipped: int

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses.size else float("nan")


def _top_fraction(logits: np.ndarray, same: np.ndarray, valid: np.ndarray, top_m: int) -> np.ndarray:
    """Per-row share of same-class entries among the top_m valid logits."""
    if top_m < logits.shape[1]:
        order = np.argpartition(-logits, top_m - 1, axis=1)[:, :top_m]
    else:
        order = np.broadcast_to(np.arange(logits.shape[1]), logits.shape)
    rows = np.arange(logits.shape[0])[:, None]
    m = np.minimum(top_m, valid.sum(axis=1))
    hit = same[rows, order] & valid[rows, order]
    return hit.sum(axis=1) / np.maximum(m, 1)


def train_step(
    state: TrainState,
    config: TrainConfig,
    x: np.ndarray,
    labels: Optional[np.ndarray],
    epoch: int,
    lr: float,
    executor=None,
) -> tuple[TrainState, StepMetrics]:
    b = x.shape[0]
    tau = config.tau
    step = state.step
    mochi = config.mochi
    pair = state.pair

    xq, xk = augment_pair(x, config.aug_noise, state.seed, step)
    q, tape = forward(pair.query, xq)
    k = encode(pair.key, xk)

    if len(state.queue) >= b:
        snap = state.queue.snapshot()
        negs, neg_labels = snap.features, snap.labels
        base_mask = np.ones((b, negs.shape[0]), dtype=bool)
    else:
        negs, neg_labels = k, labels
        base_mask = ~np.eye(b, dtype=bool)

    labeled = labels is not None and neg_labels is not None
    same = (neg_labels[None, :] == labels[:, None]) if labeled else None
    mask = base_mask
    if config.oracle_training:
        if not labeled:
            raise MissingLabels("oracle training needs labels for every sample and queue entry")
        mask = base_mask & ~same

    pos, neg = batch_logits(q, k, negs, tau, mask)
    n_valid = mask.sum(axis=1)
    skipped = n_valid == 0

    synth = None
    if mochi is not None and mochi.active(epoch):
        eligible = mask
        if mochi.oracle_synthesis:
            if not labeled:
                raise MissingLabels("oracle synthesis needs labels")
            eligible = mask & ~same
        rngs = _LazyRngs(state.seed, epoch, step)
        synth = synthesize_batch(q, k, negs, eligible, mochi, rngs, executor)
        skipped = skipped | synth.skipped
        weights = np.ones((b, mochi.num_synthetic))
        if mochi.weight_query_mix_logits:
            weights[:, mochi.s :] = synth.coefficient[:, mochi.s :]
        syn_logits = np.einsum("bd,bsd->bs", q, synth.features) / tau * weights
        full_neg = np.concatenate([neg, syn_logits], axis=1)
    else:
        full_neg = neg

    active = ~skipped
    n_active = int(active.sum())
    losses, probs = batch_loss_and_probs(pos, full_neg)
    m = negs.shape[0]
    pulled = probs[:, 1 : 1 + m] @ negs
    if synth is not None:
        pulled = pulled + np.einsum("bs,bsd->bd", probs[:, 1 + m :] * weights, synth.features)
    grad_q = -((1.0 - probs[:, 0])[:, None] * k - pulled) / tau
    if n_active:
        upstream = np.where(active[:, None], grad_q, 0.0) / n_active
        grads, _ = backward(tape, upstream)
        query = sgd_update(pair.query, grads, lr)
    else:
        query = pair.query
    new_pair = momentum_update(EncoderPair(query, pair.key, pair.momentum))
    state.queue.push_batch(k, labels)

    # diagnostics
    _, base_probs = batch_loss_and_probs(pos, neg) if synth is not None else (None, probs)
    top_m = min(METRIC_TOP_M, config.queue_capacity)
    prof_ok = active & (n_valid >= top_m)
    pn = base_probs[prof_ok, 1 : 1 + m]
    if top_m < m:
        pn = -np.partition(-pn, top_m - 1, axis=1)[:, :top_m]
    profile_rows = -np.sort(-pn, axis=1)[:, :top_m]

    fn_top = fn_top_unf = syn_one = syn_both = syn_qm = None
    fn_count = None
    if labeled:
        fn_top = _top_fraction(neg, same, mask, top_m)[active]
        raw_logits = np.where(base_mask, (q @ negs.T) / tau, -np.inf)
        fn_top_unf = _top_fraction(raw_logits, same, base_mask, top_m)[active]
        fn_count = int((same & mask).sum())
        if synth is not None:
            src_same = np.where(synth.sources >= 0, neg_labels[np.maximum(synth.sources, 0)] == labels[:, None, None], False)
            pair_hits = src_same[:, : mochi.s].sum(axis=2)
            if mochi.s:
                syn_one = np.mean(pair_hits >= 1, axis=1)[active]
                syn_both = np.mean(pair_hits == 2, axis=1)[active]
            if mochi.s_prime:
                syn_qm = np.mean(src_same[:, mochi.s :, 0], axis=1)[active]

    valid_full = np.isfinite(full_neg).sum(axis=1)
    metrics = StepMetrics(
        losses=losses[active],
        proxy_hit=(pos > full_neg.max(axis=1))[active],
        proxy_hit_base=(pos > neg.max(axis=1))[active],
        profile_rows=profile_rows,
        fn_top=fn_top,
        fn_top_unfiltered=fn_top_unf,
        fn_in_negatives=fn_count,
        syn_fn_one=syn_one,
        syn_fn_both=syn_both,
        syn_fn_query_mix=syn_qm,
        synthetic_count=0 if synth is None else n_active * mochi.num_synthetic,
        logit_count=valid_full[active],
        skipped=int(skipped.sum()),
    )
    return TrainState(new_pair, state.queue, step + 1, epoch, state.seed), metrics


class _LazyRngs:
    """Per-query synthesis generators keyed by (seed, epoch, step, query)."""

    def __init__(self, seed: int, epoch: int, step: int):
        self.key = (seed, SYNTH, epoch, step)

    def __getitem__(self, i: int) -> np.random.Generator:
        return keyed_rng(*self.key, i)


def _mean(parts):
    parts = [p for p in parts if p is not None and p.size]
    if not parts:
        return None
    return float(np.mean(np.concatenate(parts)))


def summarize_epoch(epoch: int, lr: float, steps: list[StepMetrics], seconds: float) -> dict:
    """Reduce step metrics (in step order) to one JSON-ready record."""
    labeled = all(s.fn_top is not None for s in steps) and bool(steps)
    profiles = [s.profile_rows for s in steps if s.profile_rows.size]
    n_queries = sum(s.losses.size for s in steps)
    out = {
        "epoch": epoch,
        "steps": len(steps),
        "learning_rate": lr,
        "mean_loss": _mean([s.losses for s in steps]),
        "proxy_accuracy": _mean([s.proxy_hit.astype(float) for s in steps]),
        "proxy_accuracy_no_synthetic": _mean([s.proxy_hit_base.astype(float) for s in steps]),
        "matching_profile": np.mean(np.concatenate(profiles), axis=0).tolist() if profiles else [],
        "fn_fraction_top": _mean([s.fn_top for s in steps]) if labeled else None,
        "fn_fraction_top_unfiltered": _mean([s.fn_top_unfiltered for s in steps]) if labeled else None,
        "fn_in_negatives": sum(s.fn_in_negatives for s in steps) if labeled else None,
        "fn_in_negatives_max_step": max(s.fn_in_negatives for s in steps) if labeled else None,
        "synthetic_fn_at_least_one": _mean([s.syn_fn_one for s in steps]) if labeled else None,
        "synthetic_fn_both": _mean([s.syn_fn_both for s in steps]) if labeled else None,
        "synthetic_fn_query_mix": _mean([s.syn_fn_query_mix for s in steps]) if labeled else None,
        "synthetic_per_query": (sum(s.synthetic_count for s in steps) / n_queries) if n_queries else 0.0,
        "mean_logit_count": _mean([s.logit_count.astype(float) for s in steps]),
        "skipped_queries": sum(s.skipped for s in steps),
        WALL_CLOCK_FIELD: seconds,
    }
    return out


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def checkpoint_epochs(epochs: int) -> set[int]:
    """1-based epoch numbers after which an intermediate checkpoint is written."""
    if epochs <= 0:
        return set()
    every = math.ceil(epochs / 4)
    return set(range(every, epochs + 1, every))


def run(
    config: TrainConfig,
    dataset: ToyDataset,
    output_dir=None,
    workers: int = 1,
    use_labels: bool = True,
) -> tuple[list[dict], TrainState]:
    """Train for ``config.epochs`` epochs; returns the metrics history and final state.

    Batches are drawn from a keyed per-epoch permutation; a final partial
    batch is dropped. With ``output_dir`` the metrics stream and checkpoints
    are written there.
    """
    if len(dataset) < config.batch_size:
        raise ConfigInvalid(f"dataset has {len(dataset)} samples, fewer than batch_size", "batch_size")
    if config.oracle_training and not use_labels:
        raise ConfigInvalid("oracle_training needs labels", "oracle_training")
    state = init_state(config, dataset.dim)
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    history: list[dict] = []
    if config.epochs == 0:
        if out is not None:
            save_checkpoint(out / "ckpt-final.json", state)
        return history, state

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    n = len(dataset)
    n_batches = n // config.batch_size
    ckpt_at = checkpoint_epochs(config.epochs)
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            lr = cosine_lr(epoch, config.epochs, config.base_lr)
            perm = keyed_rng(config.seed, SHUFFLE, epoch).permutation(n)
            state.epoch = epoch
            steps = []
            for bi in range(n_batches):
                idx = perm[bi * config.batch_size : (bi + 1) * config.batch_size]
                labels = dataset.labels[idx] if use_labels else None
                state, sm = train_step(state, config, dataset.inputs[idx], labels, epoch, lr, executor)
                steps.append(sm)
            record = summarize_epoch(epoch, lr, steps, time.perf_counter() - t0)
            history.append(record)
            if out is not None:
                with open(out / "metrics.jsonl", "a") as fh:
                    fh.write(metrics_line(record))
                if epoch + 1 in ckpt_at and epoch + 1 != config.epochs:
                    save_checkpoint(out / f"ckpt-epoch{epoch + 1}.json", state)
        state.epoch = config.epochs
    finally:
        if executor is not None:
            executor.shutdown()
    if out is not None:
        save_checkpoint(out / "ckpt-final.json", state)
    return history, state


# ---------------------------------------------------------------------------
# checkpoints


def _params_to_json(params: EncoderParams) -> list[dict]:
    return [
        {
            "weight_shape": list(layer.weight.shape),
            "weight": layer.weight.ravel(order="C").tolist(),
            "bias": layer.bias.tolist(),
        }
        for layer in params.layers
    ]


def _params_from_json(raw) -> EncoderParams:
    layers = []
    for item in raw:
        shape = tuple(item["weight_shape"])
        w = np.array(item["weight"], dtype=np.float64)
        if w.size != shape[0] * shape[1]:
            raise ParseError(f"weight of shape {shape} has {w.size} values")
        layers.append(Layer(w.reshape(shape), np.array(item["bias"], dtype=np.float64)))
    return EncoderParams(layers)


def save_checkpoint(path, state: TrainState) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": state.pair.query.sizes,
        "momentum": state.pair.momentum,
        "query_encoder": _params_to_json(state.pair.query),
        "key_encoder": _params_to_json(state.pair.key),
        "optimizer_step": state.step,
        "epoch": state.epoch,
        "rng_root_key": state.seed,
    }
    Path(path).write_text(json.dumps(doc) + "\n")


@dataclass
class Checkpoint:
    pair: EncoderPair
    step: int
    epoch: int
    seed: int
    layer_sizes: list = field(default_factory=list)


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
    try:
        query = _params_from_json(doc["query_encoder"])
        key = _params_from_json(doc["key_encoder"])
        pair = EncoderPair(query, key, float(doc["momentum"]))
        return Checkpoint(pair, int(doc["optimizer_step"]), int(doc["epoch"]), int(doc["rng_root_key"]), list(doc["layer_sizes"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed checkpoint ({exc})") from exc
