"""Representation diagnostics: alignment, uniformity, false-negative audits,
and a linear probe on frozen embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .errors import BadProvenance, EmptyInput, LabelUniverseMismatch, MissingLabels, TooFewNegatives, TooFewPoints
from .memory_queue import QueueSnapshot
from .rng import PAIRS, keyed_rng
from .synthesis import MixKind, SyntheticNegative, rank_negatives

MAX_POSITIVE_PAIRS = 100_000


@dataclass
class LabeledEmbeddingSet:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"features {self.features.shape} and labels {self.labels.shape} do not match")

    def __len__(self) -> int:
        return self.features.shape[0]


def alignment_expectation(x, y, alpha: float = 2.0) -> float:
    """Mean of ``|x_i - y_i|^alpha`` over positive pairs (rows of ``x`` and ``y``)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.size == 0:
        raise EmptyInput("alignment of no pairs")
    if x.shape != y.shape:
        raise ValueError(f"pair arrays differ in shape: {x.shape} vs {y.shape}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float(np.mean(np.linalg.norm(x - y, axis=1) ** alpha))


def uniformity_loss(features, t: float = 2.0) -> float:
    """``log`` of the mean Gaussian potential ``exp(-t |x - y|^2)`` over distinct unordered pairs."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise TooFewPoints("uniformity needs at least 2 points")
    if t <= 0:
        raise ValueError("t must be positive")
    sq = pdist(x, "sqeuclidean")
    return float(np.log(np.mean(np.exp(-t * sq))))


def class_positive_pairs(labels, max_pairs: int = MAX_POSITIVE_PAIRS, seed: int = 0) -> np.ndarray:
    """All same-label index pairs ``(i, j)``, ``i < j``, uniformly subsampled to ``max_pairs``."""
    labels = np.asarray(labels)
    pairs = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < 2:
            continue
        i, j = np.triu_indices(members.size, k=1)
        pairs.append(np.stack([members[i], members[j]], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    out = np.concatenate(pairs)
    if out.shape[0] > max_pairs:
        keep = np.sort(keyed_rng(seed, PAIRS).choice(out.shape[0], size=max_pairs, replace=False))
        out = out[keep]
    return out


def class_alignment(emb: LabeledEmbeddingSet, alpha: float = 2.0, seed: int = 0) -> Optional[float]:
    """Alignment with positives defined by the class labels; None without any pair."""
    pairs = class_positive_pairs(emb.labels, seed=seed)
    if pairs.shape[0] == 0:
        return None
    return alignment_expectation(emb.features[pairs[:, 0]], emb.features[pairs[:, 1]], alpha)


def same_class_cosine(emb: LabeledEmbeddingSet, seed: int = 0) -> float:
    """Mean cosine similarity over same-class pairs."""
    pairs = class_positive_pairs(emb.labels, seed=seed)
    if pairs.shape[0] == 0:
        raise EmptyInput("no same-class pairs")
    return float(np.mean(np.sum(emb.features[pairs[:, 0]] * emb.features[pairs[:, 1]], axis=1)))


def _labeled(entries) -> QueueSnapshot:
    if not isinstance(entries, QueueSnapshot):
        entries = QueueSnapshot.from_entries(list(entries))
    if entries.labels is None:
        raise MissingLabels("false-negative audits need labeled entries")
    return entries


def fn_fraction_top(q, entries, query_label: int, top_m: int) -> float:
    """Share of the ``top_m`` highest-logit entries that carry ``query_label``."""
    entries = _labeled(entries)
    if top_m <= 0 or top_m > len(entries):
        raise TooFewNegatives(f"top_m={top_m} with {len(entries)} entries")
    order = rank_negatives(q, entries)[:top_m]
    return float(np.mean(entries.labels[order] == int(query_label)))


def synthetic_fn_stats(synthetics: Sequence[SyntheticNegative], entries, query_label: int) -> tuple[float, float]:
    """``(at_least_one, both)`` false-negative fractions over the pair mixes.

    Query mixes are excluded from both numerator and denominator. With no
    pair mixes the result is ``(0.0, 0.0)``.
    """
    entries = _labeled(entries)
    one = both = total = 0
    for h in synthetics:
        if h.kind is not MixKind.PAIR:
            continue
        if len(h.source_indices) != 2 or not all(0 <= i < len(entries) for i in h.source_indices):
            raise BadProvenance(f"bad source indices {h.source_indices}")
        hits = sum(int(entries.labels[i]) == int(query_label) for i in h.source_indices)
        total += 1
        one += hits >= 1
        both += hits == 2
    if total == 0:
        return 0.0, 0.0
    return one / total, both / total


def linear_probe(train: LabeledEmbeddingSet, test: LabeledEmbeddingSet, epochs: int = 500, lr: float = 1.0) -> float:
    """Softmax regression on frozen features, zero init, full-batch gradient descent.

    Returns top-1 accuracy on ``test``.
    """
    if train.features.shape[1] != test.features.shape[1]:
        raise LabelUniverseMismatch("train and test embeddings differ in dimension")
    classes = np.unique(train.labels)
    if not np.isin(test.labels, classes).all():
        raise LabelUniverseMismatch("test set has labels never seen in training")
    if len(test) == 0:
        raise EmptyInput("empty test set")
    x = train.features
    y = np.searchsorted(classes, train.labels)
    n, d = x.shape
    c = classes.size
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((d, c))
    b = np.zeros(c)
    for _ in range(epochs):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    pred = classes[np.argmax(test.features @ w + b, axis=1)]
    return float(np.mean(pred == test.labels))


def nearest_class_mean_accuracy(train: LabeledEmbeddingSet, test: LabeledEmbeddingSet) -> float:
    classes = np.unique(train.labels)
    means = np.stack([train.features[train.labels == c].mean(axis=0) for c in classes])
    d2 = ((test.features[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(classes[np.argmin(d2, axis=1)] == test.labels))


def mean_fn_fraction(emb: LabeledEmbeddingSet, top_m: int) -> float:
    """Average of :func:`fn_fraction_top` with each point as the query and all
    other points as its negatives. ``top_m`` is clipped to ``n - 1``."""
    n = len(emb)
    if n < 2:
        raise TooFewPoints("need at least 2 points")
    m = min(top_m, n - 1)
    sims = emb.features @ emb.features.T
    fracs = np.empty(n)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        order = others[np.argsort(-sims[i, others], kind="stable")[:m]]
        fracs[i] = np.mean(emb.labels[order] == emb.labels[i])
    return float(np.mean(fracs))
