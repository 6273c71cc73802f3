"""Contrastive (InfoNCE) loss over a key and a set of negatives.

Per-query functions (``compute_logits``, ``matching_probs``, ``loss``,
``grad_wrt_query``) mirror the textbook formulation. ``batch_*`` helpers do
the same computation for a whole batch with a mask of valid negatives; the
trainer uses those.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, EmptyNegatives, NonPositiveTemperature, TooFewNegatives
from .vecspace import tempered_softmax


@dataclass(frozen=True)
class LogitRecord:
    """Positive logit, negative logits (queue order, synthetics last) and tau."""

    positive_logit: float
    negative_logits: np.ndarray
    tau: float
    # per-negative gradient weights; only differs from 1 for beta-weighted logits
    weights: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def num_negatives(self) -> int:
        return int(self.negative_logits.shape[0])


@dataclass(frozen=True)
class MatchDistribution:
    p_key: float
    p_negatives: np.ndarray

    def total(self) -> float:
        return self.p_key + float(np.sum(self.p_negatives))


def _check(q, k, negatives, tau):
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    negs = np.asarray(negatives, dtype=np.float64)
    if negs.size == 0:
        raise EmptyNegatives("at least one negative is required")
    if negs.ndim == 1:
        negs = negs[None, :]
    if q.ndim != 1 or k.shape != q.shape or negs.shape[1] != q.shape[0]:
        raise DimensionMismatch(f"query {q.shape}, key {k.shape}, negatives {negs.shape}")
    return q, k, negs


def compute_logits(q, k, negatives, tau: float) -> LogitRecord:
    q, k, negs = _check(q, k, negatives, tau)
    return LogitRecord(float(q @ k) / tau, (negs @ q) / tau, float(tau))


def matching_probs(record: LogitRecord) -> MatchDistribution:
    p = tempered_softmax(np.concatenate([[record.positive_logit], record.negative_logits]), 1.0)
    return MatchDistribution(float(p[0]), p[1:])


def loss(dist: MatchDistribution) -> float:
    return float(-np.log(dist.p_key))


def grad_wrt_query(q, k, negatives, tau: float, dist: Optional[MatchDistribution] = None, weights=None) -> np.ndarray:
    """Gradient of the loss w.r.t. the query, holding key and negatives fixed.

    ``dist`` pins the matching probabilities (otherwise they are computed
    from the inputs). ``weights`` scales each negative's direction, which is
    the chain-rule factor for negatives whose logit was multiplied by a
    constant.
    """
    q, k, negs = _check(q, k, negatives, tau)
    if dist is None:
        dist = matching_probs(compute_logits(q, k, negs, tau))
    pn = np.asarray(dist.p_negatives, dtype=np.float64)
    if pn.shape[0] != negs.shape[0]:
        raise DimensionMismatch(f"{pn.shape[0]} probabilities for {negs.shape[0]} negatives")
    if weights is not None:
        pn = pn * np.asarray(weights, dtype=np.float64)
    return -((1.0 - dist.p_key) * k - pn @ negs) / tau


def proxy_accuracy(records: Sequence[LogitRecord]) -> float:
    """Fraction of records whose positive logit beats every negative strictly."""
    if len(records) == 0:
        raise EmptyInput("proxy accuracy of no records")
    wins = sum(1 for r in records if r.positive_logit > np.max(r.negative_logits))
    return wins / len(records)


def ranked_matching_profile(records: Sequence[LogitRecord], top_m: int) -> np.ndarray:
    """Position-wise mean of the ``top_m`` largest negative matching probabilities."""
    if len(records) == 0:
        raise EmptyInput("profile of no records")
    rows = []
    for r in records:
        if r.num_negatives < top_m:
            raise TooFewNegatives(f"record has {r.num_negatives} negatives, need {top_m}")
        p = matching_probs(r).p_negatives
        rows.append(np.sort(p)[::-1][:top_m])
    return np.mean(np.stack(rows), axis=0)


# ---------------------------------------------------------------------------
# batched forms


def batch_logits(q: np.ndarray, k: np.ndarray, negatives: np.ndarray, tau: float, mask=None):
    """Logits for a batch of queries against a shared negative matrix.

    Returns ``(pos, neg)`` with shapes (B,) and (B, M). Entries where ``mask``
    is False are set to ``-inf`` so they carry zero probability.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    pos = np.sum(q * k, axis=1) / tau
    neg = (q @ negatives.T) / tau
    if mask is not None:
        neg = np.where(mask, neg, -np.inf)
    return pos, neg


def batch_loss_and_probs(pos: np.ndarray, neg: np.ndarray):
    """Per-row loss ``-log p_key`` and the full probability matrix (key first)."""
    logits = np.concatenate([pos[:, None], neg], axis=1)
    top = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - top)
    z = np.sum(e, axis=1, keepdims=True)
    probs = e / z
    losses = (np.log(z[:, 0]) + top[:, 0]) - pos
    return losses, probs


def batch_grad_wrt_query(k: np.ndarray, negatives: np.ndarray, probs: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise gradient w.r.t. each query.

    ``negatives`` is either a shared (M, d) matrix or per-row (B, M, d);
    ``probs`` is (B, 1 + M) with the key first. Negative weights, if any,
    must already be folded into ``probs[:, 1:]``.
    """
    pk = probs[:, 0]
    pn = probs[:, 1:]
    if negatives.ndim == 2:
        pulled = pn @ negatives
    else:
        pulled = np.einsum("bm,bmd->bd", pn, negatives)
    return -((1.0 - pk)[:, None] * k - pulled) / tau
