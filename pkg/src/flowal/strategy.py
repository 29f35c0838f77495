"""Query strategies: uncertainty scorers, information density, ranked batch,
query-by-committee and reinforcement active learning (RAL).

Scorers work on the last axis, so they accept a single distribution of
shape (k,) or a batch of shape (n, k). Higher scores always mean "more
worth annotating". Ties are broken by ascending record id everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from flowal import kernels

STRATEGY_KINDS = (
    "none",
    "random",
    "least_confident",
    "margin",
    "entropy",
    "info_density",
    "ranked_batch",
    "qbc_kl",
    "ral",
)
BASE_SCORERS = ("least_confident", "margin", "entropy")
SIMILARITIES = tuple(kernels.SIMILARITY_CODES)

# Rows used to estimate the RBF bandwidth (median pairwise distance).
SIGMA_SAMPLE_ROWS = 2000


@dataclass(frozen=True)
class QueryDecision:
    record_id: int
    score: float
    selected: bool = True


# -- scorers -----------------------------------------------------------------

def score_least_confident(p) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    out = 1.0 - p.max(axis=-1)
    return float(out) if out.ndim == 0 else out


def score_margin(p) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    top2 = np.sort(p, axis=-1)[..., -2:]
    out = 1.0 - (top2[..., 1] - top2[..., 0])
    return float(out) if out.ndim == 0 else out


def score_entropy(p) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    out = -terms.sum(axis=-1)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


SCORERS: dict[str, Callable] = {
    "least_confident": score_least_confident,
    "margin": score_margin,
    "entropy": score_entropy,
}


def rbf_sigma(X: np.ndarray) -> float:
    """Median pairwise euclidean distance, estimated on at most
    ``SIGMA_SAMPLE_ROWS`` evenly spaced rows. Never returns 0."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > SIGMA_SAMPLE_ROWS:
        X = X[np.linspace(0, X.shape[0] - 1, SIGMA_SAMPLE_ROWS).astype(np.intp)]
    if X.shape[0] < 2:
        return 1.0
    sq = (X * X).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    iu = np.triu_indices(X.shape[0], k=1)
    med = float(np.sqrt(np.median(np.maximum(d2[iu], 0.0))))
    return med if med > 0.0 else 1.0


def similarity(a, b, kind: str = "cosine", sigma: float = 1.0) -> float:
    """Similarity of two vectors in [0, 1]."""
    A = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
    B = np.ascontiguousarray(np.atleast_2d(b), dtype=np.float64)
    return float(kernels.max_similarity(A, B, kernels.SIMILARITY_CODES[kind], sigma)[0])


def mean_buffer_similarity(X: np.ndarray, kind: str = "cosine", sigma: float | None = None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if kind == "euclidean-rbf" and sigma is None:
        sigma = rbf_sigma(X)
    return kernels.mean_similarity(X, kernels.SIMILARITY_CODES[kind], sigma or 1.0)


def score_info_density(base_score: float, x, buffer, beta: float,
                       similarity: str = "cosine", sigma: float | None = None) -> float:
    """``base_score * mean_similarity(x, buffer) ** beta``."""
    B = np.ascontiguousarray(np.atleast_2d(buffer), dtype=np.float64)
    if B.shape[0] == 0:
        raise ValueError("buffer must not be empty")
    if beta == 0.0:
        return float(base_score)
    if similarity == "euclidean-rbf" and sigma is None:
        sigma = rbf_sigma(B)
    code = kernels.SIMILARITY_CODES[similarity]
    xa = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    sims = [kernels.max_similarity(xa, B[j:j + 1], code, sigma or 1.0)[0] for j in range(B.shape[0])]
    return float(base_score) * float(np.mean(sims)) ** beta


def info_density_scores(base_scores: np.ndarray, X: np.ndarray, beta: float,
                        similarity: str = "cosine") -> np.ndarray:
    base_scores = np.asarray(base_scores, dtype=np.float64)
    if beta == 0.0:
        return base_scores.copy()
    return base_scores * mean_buffer_similarity(X, similarity) ** beta


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    if eps == 0.0:
        return p
    k = p.shape[-1]
    return (p + eps) / (1.0 + k * eps)


def score_qbc_kl(committee, smoothing: float = 0.0) -> np.ndarray | float:
    """Mean KL divergence (natural log) of each member from the consensus.

    ``committee`` has shape (members, k) or (members, n, k). Member
    distributions are additively smoothed by ``smoothing`` first. The
    consensus is the member mean, so the divergence is finite even without
    smoothing.
    """
    P = _smooth(np.asarray(committee, dtype=np.float64), smoothing)
    C = P.mean(axis=0)
    # where every member agrees the mean must be that value exactly
    agree = (P == P[:1]).all(axis=0)
    C = np.where(agree, P[0], C)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(P > 0.0, P / np.where(C > 0.0, C, 1.0), 1.0)
        kl = np.where(P > 0.0, P * np.log(ratio), 0.0).sum(axis=-1)
    out = np.maximum(kl.mean(axis=0), 0.0)
    return float(out) if out.ndim == 0 else out


# -- selection ---------------------------------------------------------------

def select_random(record_ids, k: int, rng: np.random.Generator) -> list[QueryDecision]:
    ids = np.sort(np.asarray(record_ids, dtype=np.int64))
    m = min(k, ids.shape[0])
    if m == 0:
        return []
    picked = rng.choice(ids.shape[0], size=m, replace=False)
    return [QueryDecision(int(ids[i]), 0.0) for i in picked]


def top_k_indices(record_ids: np.ndarray, scores: np.ndarray, k: int,
                  threshold: float | None = None) -> np.ndarray:
    """Indices of the ``k`` best scores, best first, ties by lower record id."""
    record_ids = np.asarray(record_ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    pool = np.arange(scores.shape[0])
    if threshold is not None:
        pool = pool[scores >= threshold]
    if pool.shape[0] > k:
        kth = np.partition(scores[pool], pool.shape[0] - k)[pool.shape[0] - k]
        pool = pool[scores[pool] >= kth]
    order = np.lexsort((record_ids[pool], -scores[pool]))
    return pool[order][:k]


def select_top_k(record_ids, scores, k: int, threshold: float | None = None) -> list[QueryDecision]:
    record_ids = np.asarray(record_ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    return [QueryDecision(int(record_ids[i]), float(scores[i]))
            for i in top_k_indices(record_ids, scores, k, threshold)]


def select_ranked_batch(record_ids, X, uncertainty, labeled_X, k: int,
                        similarity: str = "cosine", sigma: float | None = None) -> list[QueryDecision]:
    """Greedy ranked batch: trade dissimilarity to the labeled set (and to
    picks made so far) against uncertainty, weighting dissimilarity by the
    share of still-unlabeled candidates."""
    record_ids = np.asarray(record_ids, dtype=np.int64)
    order = np.argsort(record_ids, kind="stable")
    record_ids = record_ids[order]
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64)[order])
    unc = np.asarray(uncertainty, dtype=np.float64)[order]
    n = X.shape[0]
    if n == 0:
        return []
    L = np.ascontiguousarray(labeled_X, dtype=np.float64).reshape(-1, X.shape[1])
    if similarity == "euclidean-rbf" and sigma is None:
        sigma = rbf_sigma(X)
    code = kernels.SIMILARITY_CODES[similarity]
    sigma = sigma or 1.0
    max_sim = kernels.max_similarity(X, L, code, sigma)
    available = np.ones(n, dtype=bool)
    n_labeled = L.shape[0]
    picks = []
    for step in range(min(k, n)):
        u = n - step
        alpha = u / (u + n_labeled + step)
        scores = alpha * (1.0 - max_sim) + (1.0 - alpha) * unc
        scores[~available] = -np.inf
        best = int(np.argmax(scores))
        picks.append(QueryDecision(int(record_ids[best]), float(scores[best])))
        available[best] = False
        sim_new = kernels.max_similarity(X, X[best:best + 1], code, sigma)
        np.maximum(max_sim, sim_new, out=max_sim)
    return picks


# -- reinforcement active learning ---------------------------------------------

@dataclass(frozen=True)
class RalState:
    theta: float
    weights: tuple[float, ...]
    budget_remaining: int

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0, 1), got {self.theta}")


def member_votes(committee) -> np.ndarray:
    """Class voted by each member; shape (members,) or (members, n)."""
    return np.argmax(np.asarray(committee, dtype=np.float64), axis=-1)


def weighted_vote(votes, weights, n_classes: int) -> tuple[int, float]:
    """Weighted-majority class (lowest class id on ties) and the weight of
    the members disagreeing with it."""
    w = np.asarray(weights, dtype=np.float64)
    totals = np.bincount(np.asarray(votes), weights=w, minlength=n_classes)
    majority = int(np.argmax(totals))
    return majority, float(w.sum() - totals[majority])


def ral_step(committee, state: RalState, rng: np.random.Generator | None = None,
             epsilon: float = 0.01) -> tuple[bool, RalState]:
    committee = np.asarray(committee, dtype=np.float64)
    _, informativeness = weighted_vote(member_votes(committee), state.weights, committee.shape[-1])
    explore = False
    if epsilon > 0.0 and rng is not None:
        explore = bool(rng.random() < epsilon)
    query = (informativeness > state.theta or explore) and state.budget_remaining > 0
    if query:
        state = replace(state, budget_remaining=state.budget_remaining - 1)
    return query, state


def ral_feedback(state: RalState, queried_prediction: int, true_label: int, votes, eta: float,
                 theta_min: float = 0.01, theta_max: float = 0.99) -> RalState:
    """Adapt the threshold and member weights after an annotation.

    A query that exposed a wrong committee prediction lowers the threshold
    and rewards the members that voted for the true class; a query that
    only confirmed the prediction raises the threshold.
    """
    w = np.asarray(state.weights, dtype=np.float64)
    if true_label != queried_prediction:
        theta = max(theta_min, state.theta * (1.0 - eta))
        w = np.where(np.asarray(votes) == true_label, w * (1.0 + eta), w)
    else:
        theta = min(theta_max, state.theta * (1.0 + eta))
    w = w / w.sum()
    return replace(state, theta=theta, weights=tuple(float(v) for v in w))


# -- configured strategies ---------------------------------------------------

@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "random"
    select_k: int = 10
    beta: float = 1.0
    similarity: str = "cosine"
    score_threshold: float | None = None
    base: str = "least_confident"
    qbc_smoothing: float = 0.0
    ral_theta: float = 0.5
    ral_eta: float = 0.1
    ral_budget: float = 1.0
    ral_epsilon: float = 0.01
    ral_theta_min: float = 0.01
    ral_theta_max: float = 0.99
    rng_seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.select_k < 1:
            raise ValueError("select_k must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.base not in BASE_SCORERS:
            raise ValueError(f"unknown base scorer {self.base!r}")
        if not 0.0 < self.ral_theta < 1.0:
            raise ValueError("ral theta must be in (0, 1)")
        if self.ral_eta <= 0:
            raise ValueError("ral eta must be > 0")
        if not 0.0 < self.ral_budget <= 1.0:
            raise ValueError("ral budget must be in (0, 1]")
        if not 0.0 <= self.ral_epsilon <= 1.0:
            raise ValueError("ral epsilon must be in [0, 1]")
        if self.qbc_smoothing < 0:
            raise ValueError("qbc smoothing must be >= 0")

    @property
    def display_name(self) -> str:
        return self.name or self.kind


@dataclass
class Candidates:
    """Buffer snapshot handed to a strategy.

    ``proba`` and ``committee`` are computed once per buffer when the
    records are read and classified; they are ``None`` while no model
    exists.
    """

    record_ids: np.ndarray
    X: np.ndarray
    proba: np.ndarray | None = None
    committee: np.ndarray | None = None
    labeled_X: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __len__(self):
        return int(self.record_ids.shape[0])


class Strategy:
    """A configured query strategy. Stateless except for RAL."""

    def __init__(self, config: StrategyConfig, n_members: int = 1):
        self.config = config
        self.name = config.display_name
        self.ral: RalState | None = None
        self._pending: dict[int, tuple[int, np.ndarray]] = {}
        if config.kind == "ral":
            self.ral = RalState(config.ral_theta, tuple([1.0 / n_members] * n_members), 0)

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def needs_committee(self) -> bool:
        return self.kind in ("qbc_kl", "ral")

    def loop_budget(self) -> int:
        return max(1, int(math.floor(self.config.ral_budget * self.config.select_k)))

    def select(self, cand: Candidates, rng: np.random.Generator) -> list[QueryDecision]:
        cfg = self.config
        k = cfg.select_k
        if self.kind == "none" or len(cand) == 0:
            return []
        if self.kind == "random":
            return select_random(cand.record_ids, k, rng)
        if cand.proba is None:
            # no model yet: bootstrap the dataset with uniform picks
            if self.kind == "ral":
                return select_random(cand.record_ids, min(k, self.loop_budget()), rng)
            return select_random(cand.record_ids, k, rng)
        if self.kind in SCORERS:
            return select_top_k(cand.record_ids, SCORERS[self.kind](cand.proba), k, cfg.score_threshold)
        if self.kind == "info_density":
            base = SCORERS[cfg.base](cand.proba)
            scores = info_density_scores(base, cand.X, cfg.beta, cfg.similarity)
            return select_top_k(cand.record_ids, scores, k, cfg.score_threshold)
        if self.kind == "ranked_batch":
            base = SCORERS[cfg.base](cand.proba)
            return select_ranked_batch(cand.record_ids, cand.X, base, cand.labeled_X, k, cfg.similarity)
        if self.kind == "qbc_kl":
            scores = score_qbc_kl(cand.committee, cfg.qbc_smoothing)
            return select_top_k(cand.record_ids, scores, k, cfg.score_threshold)
        if self.kind == "ral":
            return self._select_ral(cand, rng)
        raise AssertionError(self.kind)

    def _select_ral(self, cand: Candidates, rng: np.random.Generator) -> list[QueryDecision]:
        cfg = self.config
        committee = cand.committee
        if self.ral is None or len(self.ral.weights) != committee.shape[0]:
            m = committee.shape[0]
            theta = self.ral.theta if self.ral else cfg.ral_theta
            self.ral = RalState(theta, tuple([1.0 / m] * m), 0)
        state = replace(self.ral, budget_remaining=self.loop_budget())
        n_classes = committee.shape[-1]
        votes = member_votes(committee)  # (members, n)
        w = np.asarray(state.weights)
        totals = np.einsum("m,mnk->nk", w, np.eye(n_classes)[votes])
        majority = np.argmax(totals, axis=1)
        informativeness = w.sum() - totals[np.arange(totals.shape[0]), majority]
        order = np.argsort(cand.record_ids, kind="stable")
        explore = (rng.random(order.shape[0]) < cfg.ral_epsilon) if cfg.ral_epsilon > 0 else None
        picks = []
        self._pending = {}
        for pos, i in enumerate(order):
            if state.budget_remaining <= 0:
                break
            if informativeness[i] > state.theta or (explore is not None and explore[pos]):
                state = replace(state, budget_remaining=state.budget_remaining - 1)
                rid = int(cand.record_ids[i])
                picks.append(QueryDecision(rid, float(informativeness[i])))
                self._pending[rid] = (int(majority[i]), votes[:, i].copy())
        self.ral = state
        return picks

    def feedback(self, record_id: int, true_class: int) -> None:
        """Hand an annotator's answer for a selected record back to RAL."""
        if self.ral is None or record_id not in self._pending:
            return
        predicted, votes = self._pending.pop(record_id)
        cfg = self.config
        self.ral = ral_feedback(self.ral, predicted, true_class, votes, cfg.ral_eta,
                                cfg.ral_theta_min, cfg.ral_theta_max)

    def get_state(self) -> dict:
        if self.ral is None:
            return {}
        return {"theta": self.ral.theta, "weights": list(self.ral.weights),
                "budget_remaining": self.ral.budget_remaining}

    def set_state(self, state: dict) -> None:
        if state and self.kind == "ral":
            self.ral = RalState(state["theta"], tuple(state["weights"]), state["budget_remaining"])
