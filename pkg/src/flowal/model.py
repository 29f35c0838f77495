"""Probabilistic classifier used by the loop: a bagged ensemble of randomized
CART trees whose members double as the query-by-committee committee."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from flowal import kernels
from flowal.core import (
    Dataset,
    DimensionMismatch,
    FeatureVector,
    InsufficientClasses,
    ModelSnapshot,
    validate_feature_vector,
)


@dataclass(frozen=True)
class EnsembleConfig:
    num_members: int = 10
    max_depth: int = 12
    min_samples_split: int = 2
    feature_subsample: float = 0.7
    rng_seed: int = 0
    # Laplace pseudo-count added to leaf class counts; 1.0 is add-one smoothing.
    leaf_smoothing: float = 0.0

    def __post_init__(self):
        if self.num_members < 1:
            raise ValueError("num_members must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError("feature_subsample must be in (0, 1]")
        if self.leaf_smoothing < 0.0:
            raise ValueError("leaf_smoothing must be >= 0")


class Classifier(Protocol):
    """What the loop and the strategies need from a trained model."""

    n_classes: int
    n_features: int

    def committee_proba(self, X: np.ndarray) -> np.ndarray:
        """Per-member class distributions, shape (members, rows, classes)."""

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Mean of the committee, shape (rows, classes)."""


@dataclass
class Tree:
    feature: np.ndarray    # intp, -1 marks a leaf
    threshold: np.ndarray  # float64; rows with x <= threshold go left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # (nodes, classes) leaf distributions

    def apply(self, X: np.ndarray) -> np.ndarray:
        return kernels.apply_tree(X, self.feature, self.threshold, self.left, self.right)

    def proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])


def build_tree(X, y, sample, n_classes, rng, max_depth, min_samples_split,
               feature_subsample, leaf_smoothing=0.0) -> Tree:
    """Grow one CART tree on the rows ``sample`` (indices into X, may repeat)."""
    n_features = X.shape[1]
    n_try = max(1, int(round(feature_subsample * n_features)))
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[rows], minlength=n_classes))
        return len(feature) - 1

    pending = [(new_node(sample), sample, 0)]
    while pending:
        node, rows, depth = pending.pop(0)
        c = counts[node]
        if depth >= max_depth or rows.shape[0] < min_samples_split or np.count_nonzero(c) < 2:
            continue
        if n_try < n_features:
            cand = np.sort(rng.choice(n_features, n_try, replace=False)).astype(np.intp)
        else:
            cand = np.arange(n_features, dtype=np.intp)
        f, thr, _ = kernels.best_split(X, y, rows, cand, n_classes)
        if f < 0:
            continue
        mask = X[rows, f] <= thr
        feature[node] = f
        threshold[node] = thr
        lrows = np.ascontiguousarray(rows[mask])
        rrows = np.ascontiguousarray(rows[~mask])
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        pending.append((left[node], lrows, depth + 1))
        pending.append((right[node], rrows, depth + 1))

    counts = np.array(counts, dtype=np.float64) + leaf_smoothing
    value = counts / counts.sum(axis=1, keepdims=True)
    return Tree(
        np.array(feature, dtype=np.intp),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        value,
    )


class TreeEnsemble:
    """Bagged randomized trees; every member is one committee vote."""

    def __init__(self, trees: list[Tree], n_classes: int, n_features: int, config: EnsembleConfig):
        self.trees = trees
        self.n_classes = n_classes
        self.n_features = n_features
        self.config = config

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, n_classes: int, config: EnsembleConfig) -> TreeEnsemble:
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.intp)
        n = X.shape[0]
        trees = []
        for child in np.random.SeedSequence(config.rng_seed).spawn(config.num_members):
            rng = np.random.default_rng(child)
            sample = np.ascontiguousarray(rng.integers(0, n, size=n), dtype=np.intp)
            trees.append(build_tree(X, y, sample, n_classes, rng, config.max_depth,
                                    config.min_samples_split, config.feature_subsample,
                                    config.leaf_smoothing))
        return cls(trees, n_classes, X.shape[1], config)

    def _check(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def committee_proba(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        return np.stack([t.proba(X) for t in self.trees])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.committee_proba(X).mean(axis=0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_state(self) -> dict:
        return {
            "kind": "tree_ensemble",
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "config": asdict(self.config),
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_state(cls, state: dict) -> TreeEnsemble:
        trees = [
            Tree(
                np.array(t["feature"], dtype=np.intp),
                np.array(t["threshold"], dtype=np.float64),
                np.array(t["left"], dtype=np.intp),
                np.array(t["right"], dtype=np.intp),
                np.array(t["value"], dtype=np.float64).reshape(len(t["feature"]), state["n_classes"]),
            )
            for t in state["trees"]
        ]
        return cls(trees, state["n_classes"], state["n_features"], EnsembleConfig(**state["config"]))


def train(dataset: Dataset, config: EnsembleConfig, trained_at: float | None = None) -> ModelSnapshot:
    """Fit a fresh ensemble on ``dataset``.

    Raises InsufficientClasses unless at least two distinct classes are
    present; the loop keeps annotating without a model in that case.
    """
    present = dataset.present_classes()
    if len(present) < 2:
        raise InsufficientClasses(f"need examples of >= 2 classes, have {present}")
    X, y = dataset.matrix()
    model = TreeEnsemble.fit(X, y, len(dataset.labels), config)
    return ModelSnapshot(dataset.generation, model, time.time() if trained_at is None else trained_at)


def predict_proba(snapshot: ModelSnapshot, x: FeatureVector) -> np.ndarray:
    validate_feature_vector(x, snapshot.model.n_features)
    return snapshot.model.predict_proba(x.values[None, :])[0]


def committee_predict(snapshot: ModelSnapshot, x: FeatureVector) -> list[np.ndarray]:
    validate_feature_vector(x, snapshot.model.n_features)
    return list(snapshot.model.committee_proba(x.values[None, :])[:, 0, :])
