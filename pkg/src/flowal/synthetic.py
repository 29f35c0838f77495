"""Seeded synthetic flow corpora for experiments and tests."""

from __future__ import annotations

import csv
import os
from typing import Sequence

import numpy as np

from flowal.core import Dataset, FeatureVector, FlowRecord, LabeledExample, LabelSet, Provenance

DEFAULT_LABELS = ("benign", "miner")


def _records(X: np.ndarray, y: np.ndarray, labels: Sequence[str], start_id: int = 0) -> list[FlowRecord]:
    names = [f"f{i}" for i in range(X.shape[1])]
    return [
        FlowRecord(start_id + i, dict(zip(names, map(float, row))), labels[int(c)])
        for i, (row, c) in enumerate(zip(X, y))
    ]


# Miner traffic is a box in two features; at the drift point the box
# widens (lower thresholds on both), so a frozen model misses the new
# positives near the old edges.
_PRE_DRIFT = (0.8, 0.0)
_POST_DRIFT = (0.0, -0.5)


def _box(X: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    return ((X[:, 0] > bounds[0]) & (X[:, 1] > bounds[1])).astype(np.intp)


def drift_arrays(n: int, n_features: int = 10, seed: int = 0, drift_at: float = 0.4,
                 label_noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian features whose positive region changes at ``drift_at``.

    Before the drift about 11% of rows are positive, afterwards about 35%.
    Features past the first two carry no signal.
    """
    if n_features < 2:
        raise ValueError("the drift corpus needs at least two features")
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, n_features))
    cut = int(round(drift_at * n))
    y = np.concatenate([_box(X[:cut], _PRE_DRIFT), _box(X[cut:], _POST_DRIFT)])
    if label_noise > 0:
        flip = rng.random(n) < label_noise
        y[flip] = 1 - y[flip]
    return X, y


def drift_initial_arrays(n: int = 200, n_features: int = 10, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """An initial labeled sample of pre-drift traffic, drawn independently of
    the stream with the same ``seed``."""
    rng = np.random.default_rng([seed, 1])
    X = rng.normal(size=(n, n_features))
    return X, _box(X, _PRE_DRIFT)


def drift_stream(n: int, n_features: int = 10, seed: int = 0, drift_at: float = 0.4,
                 label_noise: float = 0.0, labels: Sequence[str] = DEFAULT_LABELS) -> list[FlowRecord]:
    X, y = drift_arrays(n, n_features, seed, drift_at, label_noise)
    return _records(X, y, labels)


def drift_initial(n: int = 200, n_features: int = 10, seed: int = 0,
                  labels: Sequence[str] = DEFAULT_LABELS) -> list[FlowRecord]:
    X, y = drift_initial_arrays(n, n_features, seed)
    return _records(X, y, labels)


def records_to_dataset(records: Sequence[FlowRecord], label_set: LabelSet) -> Dataset:
    """Initial dataset from labeled records, with record ids -1, -2, ..."""
    ds = Dataset(label_set)
    for i, rec in enumerate(records):
        fv = FeatureVector(np.array(list(rec.fields.values()), dtype=np.float64), -1 - i)
        ds.add(LabeledExample(fv, label_set.by_name(rec.ground_truth), Provenance.INITIAL, 0))
    return ds


def separable_arrays(n: int, n_features: int = 4, seed: int = 0, distance: float = 8.0,
                     positive_rate: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Two unit-variance Gaussian blobs ``distance`` apart along the diagonal."""
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < positive_rate).astype(np.intp)
    direction = np.ones(n_features) / np.sqrt(n_features)
    X = rng.normal(size=(n, n_features)) + np.outer(y * distance, direction)
    return X, y


def separable_stream(n: int, n_features: int = 4, seed: int = 0, distance: float = 8.0,
                     positive_rate: float = 0.5, labels: Sequence[str] = DEFAULT_LABELS) -> list[FlowRecord]:
    X, y = separable_arrays(n, n_features, seed, distance, positive_rate)
    return _records(X, y, labels)


def write_csv(records: Sequence[FlowRecord], path: str | os.PathLike, label_column: str = "label") -> None:
    if not records:
        raise ValueError("no records to write")
    columns = list(records[0].fields)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns + [label_column])
        for rec in records:
            writer.writerow([repr(rec.fields[c]) if isinstance(rec.fields[c], float) else rec.fields[c]
                             for c in columns] + [rec.ground_truth or ""])
