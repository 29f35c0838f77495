"""Annotators (ground-truth oracle, lookup table, budget wrapper) and the
operator relabel path."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from flowal.core import (
    Dataset,
    FlowRecord,
    Label,
    LabelSet,
    Provenance,
    UnknownLabel,
    UnknownRecordId,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnnotationOutcome:
    record_id: int
    label: Label | None = None
    abstain: bool = False
    error: str | None = None
    latency_seconds: float = 0.0

    def __post_init__(self):
        variants = (self.label is not None) + self.abstain + (self.error is not None)
        if variants != 1:
            raise ValueError("exactly one of label, abstain, error must be set")

    @property
    def kind(self) -> str:
        if self.label is not None:
            return "label"
        return "abstain" if self.abstain else "error"


class Annotator(Protocol):
    spent: int

    def annotate(self, record: FlowRecord) -> AnnotationOutcome: ...


def _timed(record_id, fn):
    start = time.perf_counter()
    try:
        result = fn()
    except Exception as exc:  # annotators report failures as outcomes
        return AnnotationOutcome(record_id, error=str(exc), latency_seconds=time.perf_counter() - start)
    latency = time.perf_counter() - start
    if result is None:
        return AnnotationOutcome(record_id, abstain=True, latency_seconds=latency)
    return AnnotationOutcome(record_id, label=result, latency_seconds=latency)


class OracleAnnotator:
    """Returns the hidden ground truth of offline corpora."""

    def __init__(self, labels: LabelSet):
        self.labels = labels
        self.spent = 0

    def annotate(self, record: FlowRecord) -> AnnotationOutcome:
        self.spent += 1

        def lookup():
            if record.ground_truth is None:
                raise KeyError(f"record {record.record_id} has no ground truth")
            return self.labels.by_name(record.ground_truth)

        return _timed(record.record_id, lookup)


def load_lookup_table(path: str | os.PathLike, labels: LabelSet) -> dict[str, Label]:
    """Read a ``key,label`` CSV. A header row is skipped when its label
    column is not a known label."""
    table: dict[str, Label] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'key,label'")
            key, name = row[0].strip(), row[1].strip()
            try:
                table[key] = labels.by_name(name)
            except UnknownLabel:
                if lineno == 1:
                    continue
                raise
    return table


class LookupAnnotator:
    """Label a record by looking one of its fields up in a key,label file.

    Records whose key is not listed get an abstain; a record without the
    key field is an error outcome. The table is re-read when the file's
    modification time changes.
    """

    def __init__(self, path: str | os.PathLike, key_field: str, labels: LabelSet):
        self.path = Path(path)
        self.key_field = key_field
        self.labels = labels
        self.spent = 0
        self._mtime = None
        self.table: dict[str, Label] = {}
        self._reload()

    def _reload(self):
        mtime = self.path.stat().st_mtime_ns
        if mtime != self._mtime:
            self.table = load_lookup_table(self.path, self.labels)
            self._mtime = mtime
            log.info("loaded %d lookup entries from %s", len(self.table), self.path)

    def annotate(self, record: FlowRecord) -> AnnotationOutcome:
        self.spent += 1
        self._reload()

        def lookup():
            if self.key_field not in record.fields:
                raise KeyError(f"record {record.record_id} lacks field {self.key_field!r}")
            return self.table.get(str(record.fields[self.key_field]).strip())

        return _timed(record.record_id, lookup)


@dataclass
class AnnotatorBudget:
    max_annotations_per_loop: int | None = None
    max_total: int | None = None

    def __post_init__(self):
        for v in (self.max_annotations_per_loop, self.max_total):
            if v is not None and v < 0:
                raise ValueError("annotation budgets must be >= 0")


class BudgetedAnnotator:
    """Delegate to ``inner`` until a per-loop or total budget runs out;
    remaining records get an abstain."""

    def __init__(self, inner: Annotator, budget: AnnotatorBudget):
        self.inner = inner
        self.budget = budget
        self.total = 0

    @property
    def spent(self) -> int:
        return self.total

    def annotate_batch(self, records: Sequence[FlowRecord]) -> list[AnnotationOutcome]:
        out = []
        loop_used = 0
        for record in records:
            per_loop = self.budget.max_annotations_per_loop
            total = self.budget.max_total
            if (per_loop is not None and loop_used >= per_loop) or (total is not None and self.total >= total):
                out.append(AnnotationOutcome(record.record_id, abstain=True))
                continue
            out.append(self.inner.annotate(record))
            loop_used += 1
            self.total += 1
        return out

    def annotate(self, record: FlowRecord) -> AnnotationOutcome:
        return self.annotate_batch([record])[0]


def annotate_with_budget(inner: Annotator, budget: AnnotatorBudget,
                         records: Sequence[FlowRecord]) -> list[AnnotationOutcome]:
    return BudgetedAnnotator(inner, budget).annotate_batch(records)


def relabel(dataset: Dataset, record_ids: Iterable[int], new_label: Label) -> tuple[Dataset, bool]:
    """Assign ``new_label`` to every example whose record id is listed.

    All-or-nothing: an unknown id raises UnknownRecordId and leaves the
    dataset untouched. Returns the dataset and the retrain flag, which is
    raised whenever at least one id was given.
    """
    ids = list(record_ids)
    if not ids:
        return dataset, False
    known = set(dataset.record_ids())
    unknown = sorted(set(ids) - known)
    if unknown:
        raise UnknownRecordId(f"record ids not in dataset: {unknown}")
    if new_label not in list(dataset.labels):
        raise UnknownLabel(f"{new_label} is not a label of this dataset")
    wanted = set(ids)
    updated = []
    for ex in dataset:
        if ex.record_id in wanted:
            ex = type(ex)(ex.features, new_label, Provenance.RELABELED, ex.generation_added)
        updated.append(ex)
    dataset.replace_examples(updated)
    return dataset, True
