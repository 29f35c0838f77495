"""Domain types shared across the framework."""

from __future__ import annotations

import enum
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


class FlowalError(Exception):
    """Base class for all framework errors."""


class DimensionMismatch(FlowalError):
    pass


class NonFiniteValue(FlowalError):
    pass


class MissingColumn(FlowalError):
    pass


class MalformedRow(FlowalError):
    pass


class UnknownLabel(FlowalError):
    pass


class UnknownRecordId(FlowalError):
    pass


class InsufficientClasses(FlowalError):
    """Raised by training when fewer than two classes are present."""


class EmptyMatrix(FlowalError):
    pass


class ConnectionLost(FlowalError):
    pass


class CorruptCheckpoint(FlowalError):
    pass


@dataclass(frozen=True)
class FlowRecord:
    """One raw flow observation.

    ``ground_truth`` is only filled for offline corpora and is never read on
    the model path; annotators are the only consumers.
    """

    record_id: int
    fields: Mapping[str, Any]
    ground_truth: str | None = None

    def __post_init__(self):
        if not self.fields:
            raise MalformedRow(f"record {self.record_id} has no fields")


@dataclass(frozen=True)
class Label:
    class_id: int
    name: str


class LabelSet:
    """Fixed, ordered set of class labels configured before a run."""

    def __init__(self, names: Sequence[str]):
        names = [str(n).strip() for n in names]
        if len(names) < 2:
            raise ValueError("at least two labels are required")
        if len(set(names)) != len(names):
            raise ValueError(f"label names must be unique: {names}")
        self._labels = tuple(Label(i, n) for i, n in enumerate(names))
        self._by_name = {lab.name: lab for lab in self._labels}

    def __len__(self):
        return len(self._labels)

    def __iter__(self):
        return iter(self._labels)

    def __getitem__(self, class_id: int) -> Label:
        return self._labels[class_id]

    def __eq__(self, other):
        return isinstance(other, LabelSet) and self.names == other.names

    @property
    def names(self) -> list[str]:
        return [lab.name for lab in self._labels]

    def by_name(self, name: str) -> Label:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownLabel(f"label {name!r} is not one of {self.names}") from None


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    record_id: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def validate_feature_vector(v: FeatureVector, expected_dim: int) -> None:
    """Raise unless ``v`` has ``expected_dim`` finite values."""
    if v.values.ndim != 1 or v.values.shape[0] != expected_dim:
        raise DimensionMismatch(
            f"record {v.record_id}: expected dimension {expected_dim}, got {v.values.shape}"
        )
    if not np.all(np.isfinite(v.values)):
        raise NonFiniteValue(f"record {v.record_id}: non-finite feature value")


class Provenance(str, enum.Enum):
    INITIAL = "initial"
    ANNOTATED = "annotated"
    RELABELED = "relabeled"


@dataclass
class LabeledExample:
    features: FeatureVector
    label: Label
    provenance: Provenance = Provenance.ANNOTATED
    generation_added: int = 0

    @property
    def record_id(self) -> int:
        return self.features.record_id


class Dataset:
    """Generation-indexed labeled training set.

    Mutation goes through the methods below so that ``class_counts`` always
    matches a recount of ``examples``.
    """

    def __init__(self, labels: LabelSet, examples: Iterable[LabeledExample] = (), generation: int = 0):
        self.labels = labels
        self.generation = generation
        self._examples: list[LabeledExample] = []
        self.class_counts: Counter[int] = Counter()
        for ex in examples:
            self.add(ex)

    @property
    def examples(self) -> tuple[LabeledExample, ...]:
        return tuple(self._examples)

    def __len__(self):
        return len(self._examples)

    def __iter__(self):
        return iter(self._examples)

    @property
    def dim(self) -> int | None:
        return self._examples[0].features.dim if self._examples else None

    def add(self, example: LabeledExample) -> None:
        if self._examples:
            validate_feature_vector(example.features, self.dim)
        else:
            validate_feature_vector(example.features, example.features.dim)
        self._examples.append(example)
        self.class_counts[example.label.class_id] += 1

    def replace_examples(self, examples: Iterable[LabeledExample]) -> None:
        self._examples = list(examples)
        self.class_counts = Counter(ex.label.class_id for ex in self._examples)

    def present_classes(self) -> list[int]:
        return sorted(c for c, n in self.class_counts.items() if n > 0)

    def counts_by_name(self) -> dict[str, int]:
        return {self.labels[c].name: n for c, n in sorted(self.class_counts.items()) if n > 0}

    def recount(self) -> Counter[int]:
        return Counter(ex.label.class_id for ex in self._examples)

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, y)`` arrays; X is empty with shape (0, 0) for an empty set."""
        if not self._examples:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.intp)
        X = np.stack([ex.features.values for ex in self._examples])
        y = np.array([ex.label.class_id for ex in self._examples], dtype=np.intp)
        return np.ascontiguousarray(X), y

    def record_ids(self) -> list[int]:
        return [ex.record_id for ex in self._examples]

    def copy(self) -> Dataset:
        clone = Dataset(self.labels, generation=self.generation)
        clone._examples = [
            LabeledExample(ex.features, ex.label, ex.provenance, ex.generation_added)
            for ex in self._examples
        ]
        clone.class_counts = Counter(self.class_counts)
        return clone


@dataclass(frozen=True)
class ModelSnapshot:
    generation: int
    model: Any
    trained_at: float = field(default_factory=time.time)


class ConfusionMatrix:
    """Square count matrix: rows are true labels, columns are predictions."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")
        self.counts = counts

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int) -> ConfusionMatrix:
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])


METRIC_FIELDS = ("mcc", "f1", "accuracy", "precision", "recall")


@dataclass
class MetricsRecord:
    """One evaluation row emitted per loop iteration and strategy.

    Metric fields are ``None`` when no model existed yet or no evaluation
    labels were available for the buffer.
    """

    loop: int
    generation: int
    strategy_name: str
    mcc: float | None
    f1: float | None
    accuracy: float | None
    precision: float | None
    recall: float | None
    query_time_seconds: float
    dataset_size: int
    annotations_spent: int
    annotations_loop: int
    abstains: int
    records_dropped: int
    evaluated: int
    timestamp: float

    def __post_init__(self):
        if self.mcc is not None and not -1.0 - 1e-12 <= self.mcc <= 1.0 + 1e-12:
            raise ValueError(f"mcc out of range: {self.mcc}")
        for name in ("f1", "accuracy", "precision", "recall"):
            v = getattr(self, name)
            if v is not None and not -1e-12 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name} out of range: {v}")
        if self.dataset_size < 0 or self.query_time_seconds < 0:
            raise ValueError("dataset_size and query_time_seconds must be non-negative")
        for name in ("mcc", "f1", "accuracy", "precision", "recall"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
