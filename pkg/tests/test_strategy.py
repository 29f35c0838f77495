import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowal.strategy import (
    Candidates,
    RalState,
    Strategy,
    StrategyConfig,
    info_density_scores,
    mean_buffer_similarity,
    ral_feedback,
    ral_step,
    rbf_sigma,
    score_entropy,
    score_info_density,
    score_least_confident,
    score_margin,
    score_qbc_kl,
    select_random,
    select_ranked_batch,
    select_top_k,
    similarity,
    weighted_vote,
)


def simplex(k):
    return arrays(np.float64, k, elements=st.floats(0.0, 1.0)).filter(lambda v: v.sum() > 1e-6).map(
        lambda v: v / v.sum())


# -- scorers -------------------------------------------------------------------

@pytest.mark.parametrize("p, lc, margin", [([1.0, 0.0], 0.0, 0.0), ([0.5, 0.5], 0.5, 1.0), ([0.6, 0.4], 0.4, 0.8)])
def test_least_confident_and_margin(p, lc, margin):
    assert score_least_confident(p) == pytest.approx(lc)
    assert score_margin(p) == pytest.approx(margin)


def test_entropy_values():
    assert score_entropy([1.0, 0.0]) == 0.0
    assert score_entropy([0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)
    # -(0.9 ln 0.9 + 0.1 ln 0.1), evaluated separately
    assert score_entropy([0.9, 0.1]) == pytest.approx(0.325083, abs=1e-6)


@given(st.integers(2, 6).flatmap(simplex))
def test_scorer_ranges(p):
    k = p.shape[0]
    assert 0.0 <= score_least_confident(p) <= 1.0 - 1.0 / k + 1e-12
    assert 0.0 <= score_margin(p) <= 1.0 + 1e-12
    assert 0.0 <= score_entropy(p) <= math.log(k) + 1e-12


@given(st.lists(simplex(3), min_size=1, max_size=20))
def test_scorers_vectorize(rows):
    P = np.stack(rows)
    for f in (score_least_confident, score_margin, score_entropy):
        np.testing.assert_allclose(f(P), [f(r) for r in rows])


# -- information density -------------------------------------------------------------

def test_info_density_examples():
    x = np.array([1.0, 0.0])
    buffer = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
    assert score_info_density(0.5, x, buffer, beta=1.0) == pytest.approx(0.125)
    assert score_info_density(0.37, x, buffer, beta=0.0) == 0.37
    assert score_info_density(0.37, x, x[None, :], beta=2.0) == pytest.approx(0.37)


def test_cosine_similarity_is_clipped_to_unit_interval():
    assert similarity([1.0, 0.0], [-1.0, 0.0]) == 0.0
    assert similarity([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0)
    assert similarity([0.0, 0.0], [1.0, 0.0]) == 0.0


def test_rbf_similarity_and_sigma():
    assert similarity([0.0], [0.0], "euclidean-rbf", 1.0) == 1.0
    assert similarity([0.0], [2.0], "euclidean-rbf", 1.0) == pytest.approx(math.exp(-2.0))
    X = np.array([[0.0], [1.0], [3.0]])
    assert rbf_sigma(X) == pytest.approx(2.0)  # distances 1, 2, 3
    assert rbf_sigma(np.zeros((4, 2))) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["cosine", "euclidean-rbf"]))
def test_mean_buffer_similarity_matches_pairwise(seed, kind):
    X = np.random.default_rng(seed).normal(size=(12, 3))
    sigma = rbf_sigma(X) if kind == "euclidean-rbf" else 1.0
    brute = [np.mean([similarity(a, b, kind, sigma) for b in X]) for a in X]
    np.testing.assert_allclose(mean_buffer_similarity(X, kind), brute, atol=1e-12)
    for i in (0, 5):
        assert score_info_density(1.0, X[i], X, 1.0, kind) == pytest.approx(brute[i], abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_info_density_is_monotone_in_base(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 4))
    base = rng.random(20)
    s = info_density_scores(base, X, 1.0)
    s2 = info_density_scores(base * 2, X, 1.0)
    np.testing.assert_allclose(s2, 2 * s)


# -- QBC -------------------------------------------------------------------------

def test_qbc_examples():
    assert score_qbc_kl([[0.3, 0.7]] * 4) == 0.0
    assert score_qbc_kl([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(math.log(2), abs=1e-12)
    assert score_qbc_kl([[0.2, 0.8]]) == 0.0


def test_qbc_smoothing_limit():
    vals = [score_qbc_kl([[1.0, 0.0], [0.0, 1.0]], eps) for eps in (1e-2, 1e-4, 1e-6, 1e-9)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(math.log(2), abs=1e-6)


@given(st.integers(1, 5).flatmap(lambda m: st.lists(simplex(3), min_size=m, max_size=m)))
def test_qbc_is_non_negative_and_zero_when_unanimous(members):
    C = np.stack(members)
    assert score_qbc_kl(C) >= 0.0
    assert score_qbc_kl(np.repeat(C[:1], 3, axis=0)) == 0.0


# -- selection -------------------------------------------------------------------

def test_random_selection():
    rng = np.random.default_rng(0)
    assert sorted(d.record_id for d in select_random([4, 2, 9, 1, 7], 5, rng)) == [1, 2, 4, 7, 9]
    assert select_random([], 10, rng) == []
    ids = np.arange(10_000)
    a = select_random(ids, 10, np.random.default_rng(5))
    b = select_random(ids, 10, np.random.default_rng(5))
    assert a == b and len({d.record_id for d in a}) == 10


def test_top_k_examples():
    assert [d.record_id for d in select_top_k([0, 1, 2], [0.9, 0.1, 0.5], 2)] == [0, 2]
    assert [d.record_id for d in select_top_k([7, 3], [0.5, 0.5], 1)] == [3]
    assert [d.record_id for d in select_top_k([0, 1, 2], [0.9, 0.1, 0.5], 2, threshold=0.8)] == [0]


@given(st.lists(st.tuples(st.integers(0, 10**6), st.sampled_from([0.0, 0.25, 0.5, 1.0])),
                unique_by=lambda t: t[0], max_size=40), st.integers(1, 10))
def test_top_k_matches_full_sort(pairs, k):
    ids = [p[0] for p in pairs]
    scores = [p[1] for p in pairs]
    expected = [i for _, i in sorted(zip([-s for s in scores], ids))][:k]
    assert [d.record_id for d in select_top_k(ids, scores, k)] == expected


def brute_ranked_batch(ids, X, unc, L, k):
    """Reference greedy trace written with plain loops."""
    def cos(a, b):
        na, nb = math.sqrt(sum(v * v for v in a)), math.sqrt(sum(v * v for v in b))
        if na == 0 or nb == 0:
            return 0.0
        return min(1.0, max(0.0, sum(x * y for x, y in zip(a, b)) / (na * nb)))

    ref = [list(r) for r in L]
    remaining = sorted(range(len(ids)), key=lambda i: ids[i])
    picks = []
    for _ in range(min(k, len(ids))):
        u = len(remaining)
        alpha = u / (u + len(ref))
        best, best_s = None, -1.0
        for i in remaining:
            ms = max([cos(X[i], r) for r in ref], default=0.0)
            s = alpha * (1 - ms) + (1 - alpha) * unc[i]
            if s > best_s:
                best, best_s = i, s
        picks.append(ids[best])
        remaining.remove(best)
        ref.append(list(X[best]))
    return picks


def test_ranked_batch_matches_brute_force_toy_trace():
    ids = [10, 11, 12, 13, 14]
    X = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -0.2]])
    unc = np.array([0.5, 0.5, 0.5, 0.5, 0.5])
    L = np.array([[1.0, 0.1]])
    got = [d.record_id for d in select_ranked_batch(ids, X, unc, L, 4)]
    assert got == brute_ranked_batch(ids, X, unc, L, 4) == [12, 13, 14, 10]
    # 11 duplicates 10, so it is left for last
    assert [d.record_id for d in select_ranked_batch(ids, X, unc, L, 5)][-1] == 11


def test_ranked_batch_first_pick_with_empty_reference():
    ids = [5, 3, 9]
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    first = select_ranked_batch(ids, X, np.array([0.1, 0.4, 0.2]), np.zeros((0, 2)), 1)[0]
    assert first.record_id == 3 and first.score == 1.0


def test_ranked_batch_reduces_to_uncertainty_with_huge_reference():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 3))
    unc = np.array([0.1, 0.9, 0.3, 0.7, 0.5, 0.2])
    L = rng.normal(size=(200_000, 3))
    got = [d.record_id for d in select_ranked_batch(np.arange(6), X, unc, L, 3)]
    assert got == [1, 3, 4]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_ranked_batch_property_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    n = 8
    ids = list(rng.permutation(100)[:n])
    X = rng.normal(size=(n, 3))
    unc = rng.random(n)
    L = rng.normal(size=(int(rng.integers(0, 4)), 3))
    got = [d.record_id for d in select_ranked_batch(ids, X, unc, L, k)]
    assert got == brute_ranked_batch(ids, X, unc, L, k)


# -- RAL -------------------------------------------------------------------------

def test_ral_step_examples():
    unanimous = [[0.9, 0.1], [0.8, 0.2]]
    q, _ = ral_step(unanimous, RalState(0.5, (0.5, 0.5), 5), None, epsilon=0.0)
    assert q is False
    split = [[0.9, 0.1], [0.2, 0.8]]
    q, _ = ral_step(split, RalState(0.5, (0.5, 0.5), 0), None, epsilon=0.0)
    assert q is False
    assert weighted_vote([0, 1], [0.5, 0.5], 2) == (0, 0.5)
    q, state = ral_step(split, RalState(0.4, (0.5, 0.5), 3), None, epsilon=0.0)
    assert q is True and state.budget_remaining == 2


def test_ral_feedback_examples():
    s = RalState(0.5, (0.5, 0.5), 1)
    useful = ral_feedback(s, queried_prediction=0, true_label=1, votes=[1, 0], eta=0.1)
    assert useful.theta == pytest.approx(0.45)
    assert useful.weights == pytest.approx((0.55 / 1.05, 0.5 / 1.05))
    assert useful.weights[0] == pytest.approx(0.5238095, abs=1e-7)
    useless = ral_feedback(s, queried_prediction=1, true_label=1, votes=[1, 0], eta=0.1)
    assert useless.theta == pytest.approx(0.55)
    assert useless.weights == (0.5, 0.5)


@given(st.floats(0.02, 0.98), st.floats(0.01, 0.9), st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1),
                                                                        st.lists(st.integers(0, 1), min_size=3, max_size=3)),
                                                              max_size=30))
def test_ral_feedback_keeps_theta_bounded_and_weights_normalized(theta, eta, events):
    s = RalState(theta, (1 / 3, 1 / 3, 1 / 3), 0)
    for pred, truth, votes in events:
        s = ral_feedback(s, pred, truth, votes, eta, 0.01, 0.99)
        assert 0.01 <= s.theta <= 0.99
        assert sum(s.weights) == pytest.approx(1.0)
        assert min(s.weights) > 0


def test_ral_strategy_respects_loop_budget():
    cfg = StrategyConfig(kind="ral", select_k=10, ral_budget=0.3, ral_theta=0.05, ral_epsilon=0.5)
    strat = Strategy(cfg, n_members=3)
    rng = np.random.default_rng(0)
    for loop in range(100):
        n = 200
        committee = rng.dirichlet([1, 1], size=(3, n))
        cand = Candidates(np.arange(n) + loop * n, rng.normal(size=(n, 2)), committee.mean(0), committee)
        picks = strat.select(cand, rng)
        assert len(picks) <= strat.loop_budget() == 3
        for d in picks:
            strat.feedback(d.record_id, int(rng.integers(0, 2)))


# -- configured strategies ----------------------------------------------------------

def _cand(rng, n=300, members=4, k=2):
    committee = rng.dirichlet(np.ones(k), size=(members, n))
    return Candidates(rng.permutation(10_000)[:n], rng.normal(size=(n, 3)), committee.mean(0), committee,
                      rng.normal(size=(20, 3)))


@pytest.mark.parametrize("kind", ["random", "least_confident", "margin", "entropy", "info_density",
                                  "ranked_batch", "qbc_kl", "ral"])
def test_every_strategy_selects_at_most_k_distinct_candidates(kind):
    rng = np.random.default_rng(3)
    cand = _cand(rng)
    picks = Strategy(StrategyConfig(kind=kind, select_k=7), 4).select(cand, np.random.default_rng(0))
    ids = [d.record_id for d in picks]
    assert len(ids) <= 7 and len(set(ids)) == len(ids)
    assert set(ids) <= set(cand.record_ids.tolist())
    if kind != "ral":
        assert len(ids) == 7


def test_none_strategy_never_queries():
    cand = _cand(np.random.default_rng(0))
    assert Strategy(StrategyConfig(kind="none")).select(cand, np.random.default_rng(0)) == []


def test_no_model_falls_back_to_random():
    rng = np.random.default_rng(0)
    cand = Candidates(np.arange(50), rng.normal(size=(50, 2)))
    picks = Strategy(StrategyConfig(kind="entropy", select_k=5)).select(cand, np.random.default_rng(1))
    assert [d.record_id for d in picks] == [d.record_id for d in select_random(np.arange(50), 5, np.random.default_rng(1))]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["least_confident", "margin", "entropy"]))
def test_beta_zero_matches_base_strategy(seed, base):
    cand = _cand(np.random.default_rng(seed))
    a = Strategy(StrategyConfig(kind="info_density", beta=0.0, base=base, select_k=10)).select(cand, None)
    b = Strategy(StrategyConfig(kind=base, select_k=10)).select(cand, None)
    assert [d.record_id for d in a] == [d.record_id for d in b]


def test_ral_state_round_trip():
    s = Strategy(StrategyConfig(kind="ral"), 3)
    s.ral = RalState(0.3, (0.2, 0.3, 0.5), 1)
    t = Strategy(StrategyConfig(kind="ral"), 3)
    t.set_state(s.get_state())
    assert t.ral == s.ral


def test_config_validation():
    for bad in (dict(kind="nope"), dict(select_k=0), dict(beta=-1.0), dict(similarity="manhattan"),
                dict(base="qbc_kl"), dict(ral_theta=1.0), dict(ral_eta=0.0), dict(ral_budget=0.0),
                dict(qbc_smoothing=-1.0)):
        with pytest.raises(ValueError):
            StrategyConfig(**bad)
