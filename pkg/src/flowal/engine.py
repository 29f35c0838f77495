"""The active-learning loop.

Each iteration fills a buffer of ``buffer_size`` records, then:

1. classifies the buffer with the current model (committee and mean),
2. evaluates that model on the buffer before learning from it,
3. lets the strategy pick up to ``select_k`` records,
4. annotates them (abstentions are dropped, budget is not refunded),
5. balances / caps the dataset and runs the quality hook,
6. retrains when scheduled and the dataset changed,
7. writes one metrics row and, after a retraining, a checkpoint.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from flowal.annotate import AnnotatorBudget, BudgetedAnnotator
from flowal.core import (
    ConnectionLost,
    Dataset,
    FeatureVector,
    FlowalError,
    FlowRecord,
    InsufficientClasses,
    LabeledExample,
    LabelSet,
    MetricsRecord,
    ModelSnapshot,
    Provenance,
    UnknownLabel,
)
from flowal.evaluation import NoEvaluationLabels, compute_metrics, evaluate_prequential
from flowal.ingest import ClassSampler
from flowal.model import EnsembleConfig, train
from flowal.postprocess import BALANCE_MODES, CAP_POLICIES, QualityHook, balance_dataset, cap_dataset
from flowal.store import Checkpoint, CheckpointStore, MetricsWriter
from flowal.strategy import Candidates, Strategy

log = logging.getLogger(__name__)

EVAL_SOURCES = ("ground_truth", "annotator")
CLOCKS = ("wall", "logical")

# sub-stream tags for per-loop random generators
_RNG_STRATEGY, _RNG_BALANCE, _RNG_CAP, _RNG_EVAL, _RNG_MODEL = range(1, 6)


@dataclass(frozen=True)
class LoopConfig:
    buffer_size: int = 10_000
    select_k: int = 10
    balance: str = "none"
    balance_ratio: float = 1.0
    dataset_cap: int | None = None
    cap_policy: str = "fifo"
    eval_mode: str = "prequential"
    eval_source: str = "ground_truth"
    eval_fraction: float = 0.01
    retrain_every: int = 1
    checkpoint_every: int = 1
    # "logical" records loop numbers as timestamps and zero query times so
    # repeated runs give byte-identical metrics files.
    clock: str = "wall"

    def __post_init__(self):
        if self.select_k < 1 or self.buffer_size < self.select_k:
            raise ValueError("need buffer_size >= select_k >= 1")
        if self.balance not in BALANCE_MODES:
            raise ValueError(f"unknown balance mode {self.balance!r}")
        if self.balance_ratio < 1:
            raise ValueError("balance_ratio must be >= 1")
        if self.cap_policy not in CAP_POLICIES:
            raise ValueError(f"unknown cap policy {self.cap_policy!r}")
        if self.dataset_cap is not None and self.dataset_cap < 1:
            raise ValueError("dataset_cap must be >= 1")
        if self.eval_mode != "prequential":
            raise ValueError("only prequential evaluation is supported")
        if self.eval_source not in EVAL_SOURCES:
            raise ValueError(f"unknown eval_source {self.eval_source!r}")
        if not 0.0 < self.eval_fraction <= 1.0:
            raise ValueError("eval_fraction must be in (0, 1]")
        if self.retrain_every < 1:
            raise ValueError("retrain_every must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.clock not in CLOCKS:
            raise ValueError(f"unknown clock {self.clock!r}")


def derive_rng(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, index])


def derive_seed(seed: int, tag: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, tag, index]).generate_state(1)[0])


def iter_buffers(records: Iterable[FlowRecord], size: int,
                 sampler: ClassSampler | None = None,
                 should_stop: Callable[[], bool] = lambda: False) -> Iterator[tuple[list[FlowRecord], int, dict | None]]:
    """Group records into buffers of ``size``.

    Yields ``(buffer, last_record_id, sampler_state)`` where the last two
    describe the input position right after the buffer filled. A trailing
    partial buffer is yielded when the input ends, but not when
    ``should_stop`` interrupts the stream.
    """
    buffer: list[FlowRecord] = []
    last_id = -1
    for record in records:
        if should_stop():
            return
        last_id = record.record_id
        if sampler is not None and not sampler.keep(record):
            continue
        buffer.append(record)
        if len(buffer) >= size:
            yield buffer, last_id, sampler.get_state() if sampler else None
            buffer = []
    if buffer and not should_stop():
        yield buffer, last_id, sampler.get_state() if sampler else None


def resilient(factory: Callable[[], Iterable[FlowRecord]], retries: int,
              backoff: float = 1.0) -> Iterator[FlowRecord]:
    """Iterate ``factory()``, reconnecting up to ``retries`` times on ConnectionLost."""
    attempt = 0
    while True:
        try:
            yield from factory()
            return
        except ConnectionLost as exc:
            attempt += 1
            if attempt > retries:
                raise
            log.warning("stream lost (%s); reconnect %d/%d", exc, attempt, retries)
            time.sleep(backoff * attempt)


def _signature(dataset: Dataset) -> list[tuple[int, int]]:
    return [(ex.record_id, ex.label.class_id) for ex in dataset]


class Engine:
    """One classifier instance evolving its dataset and model."""

    def __init__(
        self,
        strategy: Strategy,
        annotator,
        labels: LabelSet,
        preprocess: Callable[[FlowRecord], FeatureVector],
        model_config: EnsembleConfig = EnsembleConfig(),
        loop_config: LoopConfig = LoopConfig(),
        initial_dataset: Dataset | None = None,
        metrics: MetricsWriter | None = None,
        checkpoints: CheckpointStore | None = None,
        seed: int = 0,
        budget: AnnotatorBudget | None = None,
        quality_hook: QualityHook | None = None,
        sampler: ClassSampler | None = None,
    ):
        self.strategy = strategy
        self.labels = labels
        self.preprocess = preprocess
        self.model_config = model_config
        self.config = loop_config
        self.metrics = metrics
        self.checkpoints = checkpoints
        self.seed = seed
        self.quality_hook = quality_hook
        self.sampler = sampler
        self.raw_annotator = annotator.inner if isinstance(annotator, BudgetedAnnotator) else annotator
        self.annotator = annotator if isinstance(annotator, BudgetedAnnotator) else \
            BudgetedAnnotator(annotator, budget or AnnotatorBudget())

        self.dataset = initial_dataset.copy() if initial_dataset is not None else Dataset(labels)
        self.model: ModelSnapshot | None = None
        self.loop = 0
        self.abstains = 0
        self.records_dropped = 0
        self.preprocess_dropped = 0
        self.last_record_id = -1
        self.retrain_pending = False
        self.dataset_dirty = False
        self.history: list[MetricsRecord] = []
        self._stop = False
        self._sampler_state = sampler.get_state() if sampler else None
        self._metrics_lines = metrics.line_count() if metrics else 0
        self._resumed = False
        self._started = False
        self._trained_last = False

    # -- lifecycle -------------------------------------------------------------

    @property
    def annotations_spent(self) -> int:
        return self.annotator.total

    def request_stop(self) -> None:
        self._stop = True

    @property
    def stopped(self) -> bool:
        return self._stop

    def _now(self) -> float:
        return float(self.loop) if self.config.clock == "logical" else time.time()

    def start(self) -> bool:
        """Resume from the newest checkpoint if there is one, otherwise train
        the initial model when D_0 already holds two classes. Returns True
        when a checkpoint was restored."""
        if self._started:
            return self._resumed
        self._started = True
        sc = self.strategy.config
        if sc.kind in ("ranked_batch", "info_density"):
            log.info("strategy %s: base scorer %s, similarity %s, beta %g", self.strategy.name, sc.base,
                     sc.similarity, sc.beta)
        else:
            log.info("strategy %s, k=%d", self.strategy.name, sc.select_k)
        cp = self.checkpoints.load() if self.checkpoints else None
        if cp is not None:
            self.restore(cp)
            self._resumed = True
            return True
        self._train_if_possible(force=True, advance=False)
        return False

    def restore(self, cp: Checkpoint) -> None:
        if cp.dataset.labels != self.labels:
            raise UnknownLabel(f"checkpoint labels {cp.dataset.labels.names} != {self.labels.names}")
        self.dataset = cp.dataset
        self.model = cp.model
        self.loop = cp.loop
        self.annotator.total = cp.annotations_spent
        self.abstains = cp.abstains
        self.records_dropped = cp.records_dropped
        self.preprocess_dropped = cp.extra.get("preprocess_dropped", 0)
        self.last_record_id = cp.last_record_id
        self.retrain_pending = cp.retrain_pending
        self.dataset_dirty = cp.dataset_dirty
        self.strategy.set_state(cp.strategy_state)
        if self.sampler is not None and cp.rng_state.get("sampler"):
            self.sampler.set_state(cp.rng_state["sampler"])
            self._sampler_state = cp.rng_state["sampler"]
        if self.metrics is not None:
            self.metrics.truncate_to(cp.metrics_lines)
        self._metrics_lines = cp.metrics_lines
        log.info("resumed at loop %d, generation %d", self.loop, self.dataset.generation)

    def snapshot(self) -> Checkpoint:
        return Checkpoint(
            generation=self.dataset.generation,
            dataset=self.dataset.copy(),
            model=self.model,
            loop=self.loop,
            annotations_spent=self.annotations_spent,
            strategy_state=self.strategy.get_state(),
            rng_state={"seed": self.seed, "sampler": self._sampler_state},
            abstains=self.abstains,
            records_dropped=self.records_dropped,
            last_record_id=self.last_record_id,
            metrics_lines=self._metrics_lines,
            retrain_pending=self.retrain_pending,
            dataset_dirty=self.dataset_dirty,
            extra={"strategy": self.strategy.name, "preprocess_dropped": self.preprocess_dropped},
        )

    def save_checkpoint(self):
        if self.checkpoints is not None:
            return self.checkpoints.save(self.snapshot())
        return None

    # -- training --------------------------------------------------------------

    def _train_if_possible(self, force: bool = False, advance: bool = True) -> bool:
        if not force and not (self.dataset_dirty or self.retrain_pending):
            return False
        if len(self.dataset.present_classes()) < 2:
            return False
        if advance:
            self.dataset.generation += 1
        gen = self.dataset.generation
        cfg = replace(self.model_config, rng_seed=derive_seed(self.seed, _RNG_MODEL, gen))
        try:
            self.model = train(self.dataset, cfg, trained_at=self._now())
        except InsufficientClasses:
            if advance:
                self.dataset.generation -= 1
            return False
        self.dataset_dirty = False
        self.retrain_pending = False
        return True

    # -- one iteration -----------------------------------------------------------

    def _featurize(self, records: Sequence[FlowRecord]):
        kept, vectors = [], []
        for rec in records:
            try:
                vectors.append(self.preprocess(rec).values)
            except FlowalError as exc:
                self.preprocess_dropped += 1
                log.debug("dropping record %d: %s", rec.record_id, exc)
                continue
            kept.append(rec)
        if vectors:
            X = np.ascontiguousarray(np.stack(vectors), dtype=np.float64)
        else:
            X = np.zeros((0, 0))
        return kept, X

    def _eval_labels(self, records, rng):
        """Evaluation rows and their true classes; second value lists rows
        withheld from the query candidates."""
        if self.config.eval_source == "ground_truth":
            idx, y = [], []
            for i, rec in enumerate(records):
                if rec.ground_truth is not None:
                    idx.append(i)
                    y.append(self.labels.by_name(rec.ground_truth).class_id)
            return np.array(idx, dtype=np.intp), np.array(y, dtype=np.intp), np.zeros(0, dtype=np.intp)
        n = len(records)
        m = min(n, max(1, math.ceil(self.config.eval_fraction * n))) if n else 0
        withheld = np.sort(rng.choice(n, size=m, replace=False)) if m else np.zeros(0, dtype=np.intp)
        idx, y = [], []
        for i in withheld:
            outcome = self.raw_annotator.annotate(records[i])
            if outcome.label is not None:
                idx.append(int(i))
                y.append(outcome.label.class_id)
        return np.array(idx, dtype=np.intp), np.array(y, dtype=np.intp), withheld

    def process_buffer(self, records: Sequence[FlowRecord], records_dropped: int | None = None) -> MetricsRecord:
        if not self._started:
            self.start()
        loop_index = self.loop
        records, X = self._featurize(records)
        model = self.model
        committee = proba = None
        if model is not None and len(records):
            committee = model.model.committee_proba(X)
            proba = committee.mean(axis=0)

        # evaluate before anything from this buffer reaches the dataset
        eval_rng = derive_rng(self.seed, _RNG_EVAL, loop_index)
        eval_idx, y_true, withheld = self._eval_labels(records, eval_rng)
        scores = dict.fromkeys(("mcc", "f1", "accuracy", "precision", "recall"))
        if model is not None:
            try:
                cm = evaluate_prequential(model.model, X[eval_idx], y_true, proba[eval_idx])
                scores = compute_metrics(cm)
            except NoEvaluationLabels:
                pass

        # query
        cand_mask = np.ones(len(records), dtype=bool)
        cand_mask[withheld] = False
        ids = np.array([r.record_id for r in records], dtype=np.int64)
        labeled_X = np.zeros((0, X.shape[1] if X.ndim == 2 else 0))
        if self.strategy.kind == "ranked_batch" and len(self.dataset):
            labeled_X = self.dataset.matrix()[0]
        cand = Candidates(
            record_ids=ids[cand_mask],
            X=X[cand_mask] if len(records) else X,
            proba=proba[cand_mask] if proba is not None else None,
            committee=committee[:, cand_mask] if committee is not None else None,
            labeled_X=labeled_X,
        )
        strategy_rng = derive_rng(self.seed, _RNG_STRATEGY, loop_index)
        t0 = time.perf_counter()
        decisions = self.strategy.select(cand, strategy_rng)
        query_time = time.perf_counter() - t0
        if self.config.clock == "logical":
            query_time = 0.0

        # annotate
        previous = self.dataset.copy() if self.quality_hook is not None else None
        previous_dirty = self.dataset_dirty
        by_id = {r.record_id: (r, i) for i, r in enumerate(records)}
        chosen = [by_id[d.record_id] for d in decisions if d.selected]
        before = self.annotations_spent
        outcomes = self.annotator.annotate_batch([rec for rec, _ in chosen])
        added = 0
        for (rec, row), outcome in zip(chosen, outcomes):
            if outcome.label is None:
                self.abstains += 1
                continue
            self.dataset.add(LabeledExample(FeatureVector(X[row].copy(), rec.record_id), outcome.label,
                                            Provenance.ANNOTATED, self.dataset.generation + 1))
            self.strategy.feedback(rec.record_id, outcome.label.class_id)
            added += 1
        if added:
            self.dataset_dirty = True

        # postprocess
        if self.config.balance != "none" or self.config.dataset_cap is not None:
            candidate = balance_dataset(self.dataset, self.config.balance, self.config.balance_ratio,
                                        derive_rng(self.seed, _RNG_BALANCE, loop_index))
            if self.config.dataset_cap is not None:
                candidate = cap_dataset(candidate, self.config.dataset_cap, self.config.cap_policy,
                                        derive_rng(self.seed, _RNG_CAP, loop_index))
        else:
            candidate = self.dataset
        if candidate is not self.dataset and _signature(candidate) != _signature(self.dataset):
            self.dataset_dirty = True
        self.dataset = candidate
        if previous is not None and not self.quality_hook(previous, candidate):
            # vetoed: D_{i+1} is discarded, annotations stay spent
            log.info("quality hook rejected the dataset update of loop %d", loop_index)
            self.dataset = previous
            self.dataset_dirty = previous_dirty

        # train
        self.loop += 1
        trained = False
        if self.retrain_pending or self.loop % self.config.retrain_every == 0:
            trained = self._train_if_possible()

        if records_dropped is not None:
            self.records_dropped = records_dropped
        record = MetricsRecord(
            loop=loop_index,
            generation=self.dataset.generation,
            strategy_name=self.strategy.name,
            **scores,
            query_time_seconds=query_time,
            dataset_size=len(self.dataset),
            annotations_spent=self.annotations_spent,
            annotations_loop=self.annotations_spent - before,
            abstains=self.abstains,
            records_dropped=self.records_dropped + self.preprocess_dropped,
            evaluated=int(eval_idx.shape[0]) if model is not None else 0,
            timestamp=self._now(),
        )
        if self.metrics is not None:
            self.metrics.append(record)
            self._metrics_lines += 1
        self.history.append(record)
        self._trained_last = trained
        return record

    def _after_buffer(self, last_record_id: int, sampler_state) -> None:
        self.last_record_id = last_record_id
        self._sampler_state = sampler_state
        if self._trained_last and self.dataset.generation % self.config.checkpoint_every == 0:
            self.save_checkpoint()

    def run(self, records: Iterable[FlowRecord], dropped: Callable[[], int] | None = None) -> list[MetricsRecord]:
        """Run the loop until ``records`` ends or ``request_stop`` is called.

        A final checkpoint is written either way.
        """
        self.start()
        base_dropped = self.records_dropped
        emitted = []
        for buffer, last_id, sampler_state in iter_buffers(records, self.config.buffer_size,
                                                            self.sampler, lambda: self._stop):
            drops = base_dropped + dropped() if dropped else None
            emitted.append(self.process_buffer(buffer, drops))
            self._after_buffer(last_id, sampler_state)
            if self._stop:
                break
        self.save_checkpoint()
        return emitted


def run_loop(source: Iterable[FlowRecord], strategy: Strategy, annotator, model_config: EnsembleConfig,
             loop_config: LoopConfig, labels: LabelSet, preprocess, store: MetricsWriter | None = None,
             checkpoints: CheckpointStore | None = None, initial_dataset: Dataset | None = None,
             seed: int = 0) -> Engine:
    engine = Engine(strategy, annotator, labels, preprocess, model_config, loop_config,
                    initial_dataset=initial_dataset, metrics=store, checkpoints=checkpoints, seed=seed)
    engine.run(source)
    return engine


def run_side_by_side(engines: Sequence[Engine], records: Iterable[FlowRecord], buffer_size: int,
                     sampler: ClassSampler | None = None,
                     should_stop: Callable[[], bool] = lambda: False) -> None:
    """Feed the same buffers to several engines, one buffer at a time."""
    for engine in engines:
        engine.start()
    for buffer, last_id, state in iter_buffers(records, buffer_size, sampler, should_stop):
        for engine in engines:
            engine.process_buffer(buffer)
            engine._after_buffer(last_id, state)
