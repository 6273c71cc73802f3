import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mochi.errors import EmptyInput, MissingLabels, NoEligibleNegatives, NotEnoughNegatives, TruncationTooSmall
from mochi.infonce import LogitRecord, compute_logits
from mochi.memory_queue import QueueSnapshot
from mochi.rng import keyed_rng
from mochi.synthesis import (
    MixKind,
    MixPlan,
    MochiConfig,
    SyntheticNegative,
    _pair_synthetics,
    draw_mix_plan,
    extend_logits,
    mix_pair_negatives,
    mix_query_negatives,
    rank_negatives,
    replay_pair,
    synthesize,
    synthesize_batch,
    top_n_stable,
)
from mochi.vecspace import l2_normalize


def unit_rows(rng, m, d):
    return l2_normalize(rng.standard_normal((m, d)))


def test_rank_examples():
    np.testing.assert_array_equal(rank_negatives([1.0, 0.0], [[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]]), [1, 0, 2])
    np.testing.assert_array_equal(rank_negatives([0.6, 0.8], np.tile([1.0, 0.0], (5, 1))), np.arange(5))
    with pytest.raises(EmptyInput):
        rank_negatives([1.0, 0.0], np.zeros((0, 2)))


def test_rank_matches_naive_sort():
    rng = np.random.default_rng(0)
    feats = unit_rows(rng, 256, 8)
    q = l2_normalize(rng.standard_normal(8))
    sims = [float(sum(a * b for a, b in zip(q, f))) for f in feats]
    expected = sorted(range(256), key=lambda i: (-sims[i], i))
    assert list(rank_negatives(q, feats)) == expected


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=40), st.integers(1, 45))
def test_top_n_stable_equals_prefix_of_full_sort(values, n):
    sims = np.array(values, dtype=float) / 3
    full = np.argsort(-sims, kind="stable")
    np.testing.assert_array_equal(top_n_stable(sims, n), full[:n])


def test_pair_mix_fixed_point():
    # two identical entries: any alpha gives the entry back
    n = l2_normalize([0.2, -0.5, 0.9])
    out = mix_pair_negatives([0, 1], np.stack([n, n]), 2, 20, keyed_rng(1))
    for h in out:
        np.testing.assert_allclose(h.feature, n, atol=1e-12)


def test_pair_mix_symmetric_example():
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    plan = MixPlan(np.array([[0, 1]]), np.array([0.5]), np.zeros(0, dtype=np.int64), np.zeros(0))
    (h,) = _pair_synthetics(feats, np.array([0, 1]), plan)
    np.testing.assert_allclose(h.feature, [math.sqrt(0.5)] * 2, atol=1e-15)
    assert h.source_indices == (0, 1) and h.coefficient == 0.5


def test_pair_mix_errors():
    feats = np.eye(3)
    with pytest.raises(TruncationTooSmall):
        mix_pair_negatives([0, 1, 2], feats, 1, 2, keyed_rng(0))
    with pytest.raises(NotEnoughNegatives):
        mix_pair_negatives([0, 1, 2], feats, 4, 2, keyed_rng(0))
    with pytest.raises(TruncationTooSmall):
        MochiConfig(n=1, s=1, s_prime=0)


def test_pair_mix_sources_distinct_and_in_top():
    rng = np.random.default_rng(3)
    feats = unit_rows(rng, 50, 6)
    q = l2_normalize(rng.standard_normal(6))
    rank = rank_negatives(q, feats)
    out = mix_pair_negatives(rank, feats, 10, 500, keyed_rng(3))
    top = set(int(i) for i in rank[:10])
    for h in out:
        i, j = h.source_indices
        assert i != j and i in top and j in top
        assert 0 < h.coefficient < 1


def test_query_mix_examples():
    q = np.array([1.0, 0.0])
    feats = np.array([[0.0, 1.0]])
    plan = MixPlan(np.zeros((0, 2), dtype=np.int64), np.zeros(0), np.array([0]), np.array([0.25]))
    from mochi.synthesis import _query_synthetics

    (h,) = _query_synthetics(q, feats, np.array([0]), plan)
    np.testing.assert_allclose(h.feature, [0.3162, 0.9487], atol=1e-4)
    plan = MixPlan(plan.pair_sources, plan.alpha, plan.mix_sources, np.array([1e-9]))
    (h,) = _query_synthetics(q, feats, np.array([0]), plan)
    np.testing.assert_allclose(h.feature, feats[0], atol=1e-6)


def test_query_mix_coefficients_and_errors():
    rng = np.random.default_rng(4)
    feats = unit_rows(rng, 20, 4)
    q = l2_normalize(rng.standard_normal(4))
    out = mix_query_negatives(q, rank_negatives(q, feats), feats, 5, 300, keyed_rng(4))
    assert len(out) == 300
    assert all(0 < h.coefficient < 0.5 and h.kind is MixKind.QUERY for h in out)
    with pytest.raises(NotEnoughNegatives):
        mix_query_negatives(q, [], np.zeros((0, 4)), 0, 1, keyed_rng(0))


def test_synthesize_invariants_over_many_draws():
    """Unit norm, exact provenance replay, query-mix monotonicity, count contract.

    About 2*10^4 synthetics over many small random instances.
    """
    rng = np.random.default_rng(5)
    total = 0
    violations = 0
    while total < 20_000:
        d = int(rng.integers(2, 17))
        m = int(rng.integers(4, 65))
        n = int(rng.integers(2, m + 1))
        s, sp = int(rng.integers(0, 40)), int(rng.integers(0, 40))
        entries = QueueSnapshot(unit_rows(rng, m, d))
        q = l2_normalize(rng.standard_normal(d))
        cfg = MochiConfig(n=n, s=s, s_prime=sp, warmup_epochs=0)
        out = synthesize(q, q, entries, cfg, 0, keyed_rng(total))
        assert len(out) == s + sp
        assert [h.kind for h in out] == [MixKind.PAIR] * s + [MixKind.QUERY] * sp
        for h in out:
            assert abs(np.linalg.norm(h.feature) - 1.0) < 1e-9
            if h.kind is MixKind.PAIR:
                assert np.array_equal(replay_pair(h, entries), h.feature)
            else:
                violations += float(q @ h.feature) < float(q @ entries.features[h.source_indices[0]]) - 1e-9
        total += len(out)
    assert violations == 0


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(1e-6, 0.5 - 1e-9, exclude_max=True), st.integers(2, 12), st.integers(0, 2**31))
def test_query_mix_never_less_similar(c, beta, d, seed):
    rng = np.random.default_rng(seed)
    q = l2_normalize(rng.standard_normal(d))
    w = rng.standard_normal(d)
    w = l2_normalize(w - (w @ q) * q)
    n = c * q + math.sqrt(max(0.0, 1 - c * c)) * w
    n = l2_normalize(n)
    if np.allclose(beta * q + (1 - beta) * n, 0):
        return
    h = l2_normalize(beta * q + (1 - beta) * n)
    assert q @ h >= q @ n - 1e-9


def test_warmup_gate_and_counts():
    rng = np.random.default_rng(6)
    entries = QueueSnapshot(unit_rows(rng, 8, 3))
    q = l2_normalize(rng.standard_normal(3))
    assert synthesize(q, q, entries, MochiConfig(n=4, s=2, s_prime=3, warmup_epochs=10), 3, keyed_rng(0)) == []
    out = synthesize(q, q, entries, MochiConfig(n=4, s=2, s_prime=3, warmup_epochs=0), 0, keyed_rng(0))
    assert [h.kind for h in out] == [MixKind.PAIR] * 2 + [MixKind.QUERY] * 3


def test_key_anchor_ranking_uses_key():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    q, k = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    cfg = MochiConfig(n=1, s=0, s_prime=5, warmup_epochs=0, ranking_anchor="key")
    out = synthesize(q, k, QueueSnapshot(feats), cfg, 0, keyed_rng(0))
    assert {h.source_indices[0] for h in out} == {1}
    cfg = MochiConfig(n=1, s=0, s_prime=5, warmup_epochs=0, hard_mix_anchor="key")
    out = synthesize(q, k, QueueSnapshot(feats), cfg, 0, keyed_rng(0))
    for h in out:
        np.testing.assert_allclose(h.feature, l2_normalize(h.coefficient * k + (1 - h.coefficient) * feats[0]))


def test_oracle_synthesis():
    rng = np.random.default_rng(7)
    feats = unit_rows(rng, 30, 5)
    labels = rng.integers(0, 3, size=30)
    entries = QueueSnapshot(feats, labels)
    q = l2_normalize(rng.standard_normal(5))
    cfg = MochiConfig(n=8, s=50, s_prime=50, warmup_epochs=0, oracle_synthesis=True)
    out = synthesize(q, q, entries, cfg, 0, keyed_rng(1), query_label=1)
    assert len(out) == 100
    assert all(h.fn_component_count == 0 for h in out)
    assert all(labels[i] != 1 for h in out for i in h.source_indices)
    # ranking happens after filtering
    allowed = np.flatnonzero(labels != 1)
    best = allowed[np.argsort(-(feats[allowed] @ q), kind="stable")[:8]]
    assert {i for h in out for i in h.source_indices} <= set(best.tolist())
    with pytest.raises(NoEligibleNegatives):
        synthesize(q, q, QueueSnapshot(feats, np.ones(30, dtype=int)), cfg, 0, keyed_rng(1), query_label=1)
    with pytest.raises(MissingLabels):
        synthesize(q, q, QueueSnapshot(feats), cfg, 0, keyed_rng(1), query_label=1)


def test_fn_component_counts_without_oracle():
    feats = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    entries = QueueSnapshot(l2_normalize(feats), np.array([1, 1, 0]))
    cfg = MochiConfig(n=2, s=10, s_prime=4, warmup_epochs=0)
    out = synthesize(np.array([1.0, 0.0]), np.array([1.0, 0.0]), entries, cfg, 0, keyed_rng(2), query_label=1)
    assert all(h.fn_component_count == len(h.source_indices) for h in out)


def test_softmax_sampling_prefers_hardest():
    rng = np.random.default_rng(8)
    feats = unit_rows(rng, 40, 6)
    q = feats[0] * 0.99 + 0.01 * feats[1]
    q = l2_normalize(q)
    entries = QueueSnapshot(feats)
    uni = MochiConfig(n=20, s=0, s_prime=4000, warmup_epochs=0)
    soft = MochiConfig(n=20, s=0, s_prime=4000, warmup_epochs=0, sampling="softmax", sampling_tau=0.05)
    top = rank_negatives(q, feats)[0]
    frac = lambda out: np.mean([h.source_indices[0] == top for h in out])
    assert frac(synthesize(q, q, entries, soft, 0, keyed_rng(0))) > 3 * frac(synthesize(q, q, entries, uni, 0, keyed_rng(0)))
    out = synthesize(q, q, entries, MochiConfig(n=20, s=200, s_prime=0, warmup_epochs=0, sampling="softmax", sampling_tau=0.05), 0, keyed_rng(1))
    assert all(h.source_indices[0] != h.source_indices[1] for h in out)
    with pytest.raises(ValueError):
        MochiConfig(sampling="softmax")


def test_synthesis_deterministic():
    rng = np.random.default_rng(9)
    entries = QueueSnapshot(unit_rows(rng, 64, 8))
    q = l2_normalize(rng.standard_normal(8))
    cfg = MochiConfig(n=16, s=8, s_prime=8, warmup_epochs=0)
    a = synthesize(q, q, entries, cfg, 0, keyed_rng(4, 2))
    b = synthesize(q, q, entries, cfg, 0, keyed_rng(4, 2))
    assert all(np.array_equal(x.feature, y.feature) and x.source_indices == y.source_indices for x, y in zip(a, b))
    c = synthesize(q, q, entries, cfg, 0, keyed_rng(4, 3))
    assert any(not np.array_equal(x.feature, y.feature) for x, y in zip(a, c))


def test_draw_plan_pairs_distinct():
    plan = draw_mix_plan(keyed_rng(0), 2, 1000, 0)
    assert np.all(plan.pair_sources[:, 0] != plan.pair_sources[:, 1])
    assert np.all((plan.alpha > 0) & (plan.alpha < 1))


def test_extend_logits_examples():
    q = l2_normalize([0.3, 0.4, 0.5])
    rec = compute_logits(q, q, [[1.0, 0.0, 0.0]], 0.2)
    assert extend_logits(rec, q, [], 0.2) is rec
    h = SyntheticNegative(q.copy(), MixKind.PAIR, (0, 0), 0.5)
    ext = extend_logits(rec, q, [h], 0.2)
    assert ext.num_negatives == 2
    assert ext.negative_logits[-1] == pytest.approx(1 / 0.2, abs=1e-12)
    n = l2_normalize([0.0, 1.0, 0.2])
    hq = SyntheticNegative(n, MixKind.QUERY, (0,), 0.3)
    plain = extend_logits(rec, q, [hq], 0.2).negative_logits[-1]
    weighted = extend_logits(rec, q, [hq], 0.2, weight_flag=True)
    assert weighted.negative_logits[-1] == pytest.approx(0.3 * plain, abs=1e-15)
    np.testing.assert_array_equal(weighted.weights, [1.0, 0.3])


def test_extend_logits_count():
    rng = np.random.default_rng(10)
    entries = QueueSnapshot(unit_rows(rng, 12, 4))
    q = l2_normalize(rng.standard_normal(4))
    cfg = MochiConfig(n=6, s=2, s_prime=3, warmup_epochs=0)
    out = synthesize(q, q, entries, cfg, 0, keyed_rng(0))
    assert extend_logits(compute_logits(q, q, entries.features, 0.2), q, out, 0.2).num_negatives == 12 + 5


def test_batched_matches_single_query():
    rng = np.random.default_rng(11)
    b, m, d = 6, 40, 5
    negs = unit_rows(rng, m, d)
    q = unit_rows(rng, b, d)
    k = unit_rows(rng, b, d)
    cfg = MochiConfig(n=10, s=4, s_prime=3, warmup_epochs=0, ranking_anchor="key")
    eligible = np.ones((b, m), dtype=bool)
    rngs = [keyed_rng(7, i) for i in range(b)]
    batch = synthesize_batch(q, k, negs, eligible, cfg, rngs)
    for i in range(b):
        single = synthesize(q[i], k[i], QueueSnapshot(negs), cfg, 0, keyed_rng(7, i))
        for c, h in enumerate(single):
            np.testing.assert_allclose(batch.features[i, c], h.feature, atol=1e-14)
            assert tuple(x for x in batch.sources[i, c] if x >= 0) == h.source_indices
            assert batch.coefficient[i, c] == h.coefficient
    assert not batch.skipped.any()


def test_batched_skips_queries_without_negatives():
    rng = np.random.default_rng(12)
    negs = unit_rows(rng, 5, 3)
    q = unit_rows(rng, 2, 3)
    eligible = np.array([[True] * 5, [True] + [False] * 4])
    cfg = MochiConfig(n=4, s=2, s_prime=1, warmup_epochs=0)
    batch = synthesize_batch(q, q, negs, eligible, cfg, [keyed_rng(0), keyed_rng(1)])
    assert batch.skipped.tolist() == [False, True]
    assert np.all(batch.features[1] == 0)
