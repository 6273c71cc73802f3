"""Hard negative mixing in feature space.

For each query the queue negatives are ranked by similarity to an anchor (the
query, or optionally the key), truncated to the hardest ``n``, and two kinds
of synthetic negatives are built from that top set:

* pair mixes ``normalize(alpha * n_i + (1 - alpha) * n_j)``, alpha in (0, 1)
* query mixes ``normalize(beta * q + (1 - beta) * n_j)``, beta in (0, 0.5)

The random choices for one query come from a :class:`MixPlan` drawn from that
query's own generator. The single-query functions and the batched path in
:func:`synthesize_batch` consume identical plans, so they agree exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadProvenance,
    EmptyInput,
    MissingLabels,
    NoEligibleNegatives,
    NotEnoughNegatives,
    TruncationTooSmall,
)
from .infonce import LogitRecord
from .memory_queue import QueueSnapshot
from .rng import open_unit
from .vecspace import l2_normalize, tempered_softmax


class Anchor(str, enum.Enum):
    QUERY = "query"
    KEY = "key"


class Sampling(str, enum.Enum):
    UNIFORM = "uniform"
    SOFTMAX = "softmax"


class MixKind(str, enum.Enum):
    PAIR = "pair_mix"
    QUERY = "query_mix"


@dataclass(frozen=True)
class MochiConfig:
    # Oracle runs filter same-class entries first and rank what is left.
    n: int = 1024
    s: int = 1024
    s_prime: int = 128
    warmup_epochs: int = 10
    ranking_anchor: Anchor = Anchor.QUERY
    hard_mix_anchor: Anchor = Anchor.QUERY
    weight_query_mix_logits: bool = False
    sampling: Sampling = Sampling.UNIFORM
    sampling_tau: Optional[float] = None
    oracle_synthesis: bool = False

    def __post_init__(self):
        for name in ("ranking_anchor", "hard_mix_anchor"):
            object.__setattr__(self, name, Anchor(getattr(self, name)))
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        if self.n <= 0:
            raise ValueError(f"mochi.n must be positive, got {self.n}")
        if self.s < 0 or self.s_prime < 0:
            raise ValueError("mochi.s and mochi.s_prime must be non-negative")
        if self.warmup_epochs < 0:
            raise ValueError("mochi.warmup_epochs must be non-negative")
        if self.s > 0 and self.n < 2:
            raise TruncationTooSmall("pair mixing needs mochi.n >= 2")
        if self.sampling is Sampling.SOFTMAX:
            if self.sampling_tau is None or self.sampling_tau <= 0:
                raise ValueError("softmax sampling needs a positive mochi.sampling_tau")

    @property
    def num_synthetic(self) -> int:
        return self.s + self.s_prime

    def active(self, epoch: int) -> bool:
        return epoch >= self.warmup_epochs and self.num_synthetic > 0


@dataclass(frozen=True)
class SyntheticNegative:
    feature: np.ndarray
    kind: MixKind
    source_indices: tuple
    coefficient: float
    fn_component_count: Optional[int] = None


@dataclass(frozen=True)
class MixPlan:
    """Random choices for one query.

    Source positions index the ranked top list (0 is the hardest negative).
    """

    pair_sources: np.ndarray  # (s, 2)
    alpha: np.ndarray  # (s,)
    mix_sources: np.ndarray  # (s_prime,)
    beta: np.ndarray  # (s_prime,)


def _distinct_pair(rng, n_top: int, probs: Optional[np.ndarray]):
    if probs is None:
        i = int(rng.integers(n_top))
        j = int(rng.integers(n_top - 1))
        return i, j + (j >= i)
    i = int(rng.choice(n_top, p=probs))
    rest = probs.copy()
    rest[i] = 0.0
    total = rest.sum()
    if total <= 0.0:
        # all remaining mass underflowed; fall back to uniform over the others
        rest = np.ones(n_top)
        rest[i] = 0.0
        total = rest.sum()
    j = int(rng.choice(n_top, p=rest / total))
    return i, j


def draw_mix_plan(rng: np.random.Generator, n_top: int, s: int, s_prime: int, probs=None) -> MixPlan:
    """Draw pair sources, alphas, query-mix sources and betas, in that order."""
    if s > 0 and n_top < 2:
        raise NotEnoughNegatives(f"pair mixing needs 2 candidates, have {n_top}")
    if s_prime > 0 and n_top < 1:
        raise NotEnoughNegatives("query mixing needs a candidate negative")
    if probs is None:
        i = rng.integers(n_top, size=s)
        j = rng.integers(max(n_top - 1, 1), size=s)
        pairs = np.stack([i, j + (j >= i)], axis=1) if s else np.zeros((0, 2), dtype=np.int64)
    else:
        pairs = np.array([_distinct_pair(rng, n_top, probs) for _ in range(s)], dtype=np.int64).reshape(s, 2)
    alpha = open_unit(rng, s)
    if probs is None:
        mix = rng.integers(n_top, size=s_prime)
    else:
        mix = rng.choice(n_top, size=s_prime, p=probs)
    beta = 0.5 * open_unit(rng, s_prime)
    return MixPlan(pairs.astype(np.int64), alpha, np.asarray(mix, dtype=np.int64), beta)


def sampling_probs(config: MochiConfig, top_sims: np.ndarray) -> Optional[np.ndarray]:
    if config.sampling is Sampling.UNIFORM:
        return None
    return tempered_softmax(top_sims, config.sampling_tau)


def top_n_stable(sims: np.ndarray, n: int) -> np.ndarray:
    """First ``n`` indices of a stable descending argsort of ``sims``, without the full sort."""
    size = sims.shape[0]
    if n >= size:
        return np.argsort(-sims, kind="stable")
    threshold = np.partition(sims, size - n)[size - n]
    cand = np.flatnonzero(sims >= threshold)
    return cand[np.argsort(-sims[cand], kind="stable")[:n]]


def rank_negatives(anchor, entries) -> np.ndarray:
    """Indices of ``entries`` by decreasing similarity to ``anchor``; ties keep queue order."""
    feats = entries.features if isinstance(entries, QueueSnapshot) else np.asarray(entries, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise EmptyInput("cannot rank an empty set of negatives")
    sims = feats @ np.asarray(anchor, dtype=np.float64)
    return np.argsort(-sims, kind="stable")


def _features(entries) -> np.ndarray:
    return entries.features if isinstance(entries, QueueSnapshot) else np.asarray(entries, dtype=np.float64)


def _fn_count(entries, indices, query_label):
    if query_label is None or not isinstance(entries, QueueSnapshot) or entries.labels is None:
        return None
    return int(sum(int(entries.labels[i]) == int(query_label) for i in indices))


def _pair_synthetics(feats, top, plan: MixPlan, entries=None, query_label=None):
    out = []
    for (a, b), alpha in zip(plan.pair_sources, plan.alpha):
        i, j = int(top[a]), int(top[b])
        h = l2_normalize(alpha * feats[i] + (1.0 - alpha) * feats[j])
        out.append(SyntheticNegative(h, MixKind.PAIR, (i, j), float(alpha), _fn_count(entries, (i, j), query_label)))
    return out


def _query_synthetics(anchor, feats, top, plan: MixPlan, entries=None, query_label=None):
    anchor = np.asarray(anchor, dtype=np.float64)
    out = []
    for a, beta in zip(plan.mix_sources, plan.beta):
        j = int(top[a])
        h = l2_normalize(beta * anchor + (1.0 - beta) * feats[j])
        out.append(SyntheticNegative(h, MixKind.QUERY, (j,), float(beta), _fn_count(entries, (j,), query_label)))
    return out


def mix_pair_negatives(anchor_rank, entries, n: int, s: int, rng, probs=None, query_label=None) -> list[SyntheticNegative]:
    feats = _features(entries)
    if s > 0 and n < 2:
        raise TruncationTooSmall("pair mixing needs n >= 2")
    if n > feats.shape[0]:
        raise NotEnoughNegatives(f"truncation {n} exceeds {feats.shape[0]} negatives")
    top = np.asarray(anchor_rank)[:n]
    plan = draw_mix_plan(rng, len(top), s, 0, probs)
    return _pair_synthetics(feats, top, plan, entries, query_label)


def mix_query_negatives(q, anchor_rank, entries, n: int, s_prime: int, rng, probs=None, query_label=None) -> list[SyntheticNegative]:
    """Mix ``q`` (whatever anchor the caller passes: query or key) into hard negatives."""
    feats = _features(entries)
    if n > feats.shape[0] or (s_prime > 0 and n < 1):
        raise NotEnoughNegatives(f"truncation {n} invalid for {feats.shape[0]} negatives")
    top = np.asarray(anchor_rank)[:n]
    plan = draw_mix_plan(rng, len(top), 0, s_prime, probs)
    return _query_synthetics(q, feats, top, plan, entries, query_label)


def synthesize(q, k, entries, config: MochiConfig, epoch: int, rng, query_label: Optional[int] = None) -> list[SyntheticNegative]:
    """All synthetic negatives for one query: ``s`` pair mixes, then ``s_prime`` query mixes.

    Empty during warm-up. With ``oracle_synthesis`` the same-class entries
    are removed before ranking, and source indices refer to the filtered set's
    positions mapped back to ``entries``. If fewer than ``n`` entries remain,
    the top set is everything that remains.
    """
    if not config.active(epoch):
        return []
    if not isinstance(entries, QueueSnapshot):
        entries = QueueSnapshot(np.asarray(entries, dtype=np.float64))
    pool = np.arange(len(entries))
    if config.oracle_synthesis:
        if entries.labels is None or query_label is None:
            raise MissingLabels("oracle synthesis needs labeled entries and a query label")
        pool = np.flatnonzero(entries.labels != int(query_label))
        if pool.size == 0:
            raise NoEligibleNegatives("every entry shares the query's label")
    anchor = q if config.ranking_anchor is Anchor.QUERY else k
    sims = entries.features[pool] @ np.asarray(anchor, dtype=np.float64)
    n_top = min(config.n, pool.size)
    order = top_n_stable(sims, n_top)
    top = pool[order]
    plan = draw_mix_plan(rng, n_top, config.s, config.s_prime, sampling_probs(config, sims[order]))
    mix_anchor = q if config.hard_mix_anchor is Anchor.QUERY else k
    return _pair_synthetics(entries.features, top, plan, entries, query_label) + _query_synthetics(
        mix_anchor, entries.features, top, plan, entries, query_label
    )


def extend_logits(record: LogitRecord, q, synthetics: Sequence[SyntheticNegative], tau: float, weight_flag: bool = False) -> LogitRecord:
    """Append ``q . h / tau`` for every synthetic (query mixes scaled by beta if ``weight_flag``)."""
    if not synthetics:
        return record
    q = np.asarray(q, dtype=np.float64)
    extra = np.array([float(q @ h.feature) / tau for h in synthetics])
    w = np.ones(len(synthetics))
    if weight_flag:
        for idx, h in enumerate(synthetics):
            if h.kind is MixKind.QUERY:
                w[idx] = h.coefficient
        extra = extra * w
    base_w = record.weights if record.weights is not None else np.ones(record.num_negatives)
    weights = np.concatenate([base_w, w]) if (weight_flag or record.weights is not None) else None
    return replace(record, negative_logits=np.concatenate([record.negative_logits, extra]), weights=weights)


def replay_pair(h: SyntheticNegative, entries) -> np.ndarray:
    """Recompute a pair mix from its recorded provenance."""
    feats = _features(entries)
    if h.kind is not MixKind.PAIR or len(h.source_indices) != 2:
        raise BadProvenance("not a pair mix")
    i, j = h.source_indices
    if not (0 <= i < feats.shape[0] and 0 <= j < feats.shape[0]):
        raise BadProvenance(f"source indices {h.source_indices} out of range")
    return l2_normalize(h.coefficient * feats[i] + (1.0 - h.coefficient) * feats[j])


# ---------------------------------------------------------------------------
# batched synthesis used by the trainer


@dataclass
class SyntheticBatch:
    """Synthetics for a batch; every row has ``s + s_prime`` columns, pair mixes first.

    ``sources[b, c]`` holds the queue indices (second is -1 for query mixes);
    ``coefficient`` is alpha or beta. Rows listed in ``skipped`` are zeros.
    """

    features: np.ndarray  # (B, S, d)
    sources: np.ndarray  # (B, S, 2)
    coefficient: np.ndarray  # (B, S)
    s: int
    s_prime: int
    skipped: np.ndarray  # bool (B,)

    @property
    def is_query_mix(self) -> np.ndarray:
        return np.arange(self.s + self.s_prime) >= self.s


def plan_for_query(config: MochiConfig, sims_row: np.ndarray, eligible_row: np.ndarray, rng):
    """Rank one query's eligible negatives and draw its plan.

    Returns ``(top_indices, plan)`` or None if the query cannot be served.
    """
    pool = np.flatnonzero(eligible_row)
    need = 2 if config.s > 0 else 1
    if pool.size < need:
        return None
    sims = sims_row[pool]
    n_top = min(config.n, pool.size)
    order = top_n_stable(sims, n_top)
    top = pool[order]
    plan = draw_mix_plan(rng, n_top, config.s, config.s_prime, sampling_probs(config, sims[order]))
    return top, plan


def synthesize_batch(q, k, negatives, eligible, config: MochiConfig, rngs, executor=None) -> SyntheticBatch:
    """Batched :func:`synthesize` over queries ``q`` against shared ``negatives``.

    ``eligible`` is a (B, M) mask of negatives each query may mix from.
    ``rngs`` yields one generator per query. An optional executor fans the
    per-query ranking and drawing out; results are collected in query order.
    """
    b, d = q.shape
    s, sp = config.s, config.s_prime
    anchor = q if config.ranking_anchor is Anchor.QUERY else k
    sims = anchor @ negatives.T
    jobs = [(config, sims[i], eligible[i], rngs[i]) for i in range(b)]
    if executor is None:
        plans = [plan_for_query(*job) for job in jobs]
    else:
        plans = list(executor.map(lambda job: plan_for_query(*job), jobs))

    total = s + sp
    feats = np.zeros((b, total, d))
    sources = np.full((b, total, 2), -1, dtype=np.int64)
    coef = np.zeros((b, total))
    skipped = np.zeros(b, dtype=bool)
    mix_anchor = q if config.hard_mix_anchor is Anchor.QUERY else k
    for i, got in enumerate(plans):
        if got is None:
            skipped[i] = True
            continue
        top, plan = got
        pi = top[plan.pair_sources[:, 0]]
        pj = top[plan.pair_sources[:, 1]]
        mj = top[plan.mix_sources]
        sources[i, :s, 0], sources[i, :s, 1] = pi, pj
        sources[i, s:, 0] = mj
        coef[i, :s], coef[i, s:] = plan.alpha, plan.beta
    ok = ~skipped
    if s:
        a = coef[ok, :s, None]
        raw = a * negatives[sources[ok, :s, 0]] + (1.0 - a) * negatives[sources[ok, :s, 1]]
        feats[ok, :s] = l2_normalize(raw.reshape(-1, d)).reshape(-1, s, d)
    if sp:
        bb = coef[ok, s:, None]
        raw = bb * mix_anchor[ok][:, None, :] + (1.0 - bb) * negatives[sources[ok, s:, 0]]
        feats[ok, s:] = l2_normalize(raw.reshape(-1, d)).reshape(-1, sp, d)
    return SyntheticBatch(feats, sources, coef, s, sp, skipped)
