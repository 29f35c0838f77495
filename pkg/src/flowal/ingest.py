"""Flow record loading (CSV files and CSV-over-socket streams), per-class
input sampling and conversion of records to feature vectors."""

from __future__ import annotations

import csv
import io
import logging
import math
import queue
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from flowal.core import (
    ConnectionLost,
    Dataset,
    FeatureVector,
    FlowRecord,
    LabeledExample,
    LabelSet,
    MalformedRow,
    MissingColumn,
    NonFiniteValue,
    Provenance,
)

log = logging.getLogger(__name__)

DROP_POLICIES = ("reject-and-count",)
TRANSFORMS = ("none", "log1p")


@dataclass
class IngestConfig:
    source: str
    feature_columns: Sequence[str]
    label_column: str | None = None
    id_column: str | None = None
    sampling: Mapping[str, float] = field(default_factory=dict)
    drop_policy: str = "reject-and-count"
    queue_capacity: int = 10_000
    transform: str = "none"

    def __post_init__(self):
        self.feature_columns = list(self.feature_columns)
        if not self.feature_columns:
            raise ValueError("feature_columns must not be empty")
        for name, ratio in self.sampling.items():
            if not 0.0 <= float(ratio) <= 1.0:
                raise ValueError(f"sampling ratio for {name!r} must be in [0, 1], got {ratio}")
        if self.drop_policy not in DROP_POLICIES:
            raise ValueError(f"unknown drop_policy {self.drop_policy!r}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")

    @property
    def is_stream(self) -> bool:
        return self.source.startswith(("tcp://", "unix://"))


def _to_float(raw: str) -> float:
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {raw!r}")
    return value


class FlowReader:
    """Iterable over the FlowRecords of one CSV text source.

    Malformed rows are skipped and counted in ``dropped``. Rows whose
    record id is ``<= start_after`` are skipped silently; restarts use this
    to resume behind the last checkpointed record.
    """

    def __init__(self, lines: Iterable[str], config: IngestConfig,
                 labels: LabelSet | None = None, start_after: int = -1):
        self._lines = lines
        self.config = config
        self.labels = labels
        self.start_after = start_after
        self.dropped = 0
        self.rows_seen = 0

    def __iter__(self) -> Iterator[FlowRecord]:
        cfg = self.config
        reader = csv.reader(self._lines)
        try:
            header = next(reader)
        except StopIteration:
            return
        header = [h.strip() for h in header]
        required = list(cfg.feature_columns)
        if cfg.label_column:
            required.append(cfg.label_column)
        if cfg.id_column:
            required.append(cfg.id_column)
        missing = [c for c in required if c not in header]
        if missing:
            raise MissingColumn(f"columns {missing} not in header {header}")
        features = set(cfg.feature_columns)

        for row_index, row in enumerate(reader):
            self.rows_seen += 1
            if not row:
                continue
            try:
                record = self._parse(row_index, header, row, features)
            except MalformedRow as exc:
                self.dropped += 1
                log.debug("dropped row %d: %s", row_index, exc)
                continue
            if record.record_id <= self.start_after:
                continue
            yield record

    def _parse(self, row_index, header, row, features) -> FlowRecord:
        cfg = self.config
        if len(row) != len(header):
            raise MalformedRow(f"expected {len(header)} values, got {len(row)}")
        values = {}
        for name, raw in zip(header, row):
            raw = raw.strip()
            if name in features:
                try:
                    values[name] = _to_float(raw)
                except ValueError:
                    raise MalformedRow(f"column {name!r}: {raw!r} is not numeric") from None
            else:
                values[name] = raw
        if cfg.id_column:
            try:
                record_id = int(values[cfg.id_column])
            except ValueError:
                raise MalformedRow(f"bad record id {values[cfg.id_column]!r}") from None
        else:
            record_id = row_index
        truth = None
        if cfg.label_column:
            truth = values[cfg.label_column] or None
            if truth is not None and self.labels is not None:
                self.labels.by_name(truth)
        return FlowRecord(record_id, values, truth)


def read_offline(config: IngestConfig, labels: LabelSet | None = None,
                 start_after: int = -1) -> FlowReader:
    """Lazily read a CSV file with a header row; rows come back in file order."""
    path = Path(config.source)
    if not path.exists():
        raise FileNotFoundError(path)

    def lines():
        with open(path, newline="", encoding="utf-8") as fh:
            yield from fh

    return FlowReader(lines(), config, labels, start_after)


def read_text(text: str, config: IngestConfig, labels: LabelSet | None = None) -> FlowReader:
    return FlowReader(io.StringIO(text, newline=""), config, labels)


def _connect(endpoint: str, timeout: float | None) -> socket.socket:
    if endpoint.startswith("tcp://"):
        host, _, port = endpoint[len("tcp://"):].rpartition(":")
        return socket.create_connection((host.strip("[]"), int(port)), timeout=timeout)
    if endpoint.startswith("unix://"):
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(timeout)
        sock.connect(endpoint[len("unix://"):])
        return sock
    raise ValueError(f"unsupported stream endpoint {endpoint!r}")


def _socket_lines(endpoint: str, connect_timeout: float | None) -> Iterator[str]:
    try:
        sock = _connect(endpoint, connect_timeout)
    except OSError as exc:
        raise ConnectionLost(f"cannot connect to {endpoint}: {exc}") from exc
    sock.settimeout(None)
    with sock, sock.makefile("r", encoding="utf-8", newline="") as fh:
        while True:
            try:
                line = fh.readline()
            except OSError as exc:
                raise ConnectionLost(f"{endpoint}: {exc}") from exc
            if not line:
                return
            yield line


def read_stream(config: IngestConfig, labels: LabelSet | None = None,
                connect_timeout: float | None = 10.0) -> FlowReader:
    """Read newline-delimited CSV (header first) from a TCP or unix socket.

    Iteration blocks while no data arrives and ends when the peer closes
    the connection.
    """
    return FlowReader(_socket_lines(config.source, connect_timeout), config, labels)


_END = object()


def threaded(iterable: Iterable, capacity: int,
             should_stop: Callable[[], bool] = lambda: False) -> Iterator:
    """Drain ``iterable`` on a background thread through a bounded queue.

    The producer blocks when the queue is full. Exceptions raised by the
    producer are re-raised in the consumer. The consumer polls
    ``should_stop`` while waiting so an idle stream can still be stopped.
    """
    q: queue.Queue = queue.Queue(maxsize=capacity)
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_END)
        except BaseException as exc:  # handed to the consumer
            q.put(exc)

    thread = threading.Thread(target=produce, name="flowal-reader", daemon=True)
    thread.start()
    try:
        while True:
            try:
                item = q.get(timeout=0.2)
            except queue.Empty:
                if should_stop():
                    return
                continue
            if item is _END:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


class ClassSampler:
    """Retain each record of class ``c`` with probability ``ratios[c]``.

    Classes missing from ``ratios`` and records without a class key are
    always kept. One uniform draw is consumed per record of a sampled
    class, so the generator state after ``n`` records is reproducible.
    """

    def __init__(self, ratios: Mapping[str, float], rng_seed: int,
                 key: Callable[[FlowRecord], str | None] | None = None):
        for name, ratio in ratios.items():
            if not 0.0 <= float(ratio) <= 1.0:
                raise ValueError(f"sampling ratio for {name!r} must be in [0, 1]")
        self.ratios = {k: float(v) for k, v in ratios.items()}
        self.rng = np.random.default_rng(rng_seed)
        self.key = key or (lambda r: r.ground_truth)

    def keep(self, record: FlowRecord) -> bool:
        cls = self.key(record)
        if cls is None or cls not in self.ratios:
            return True
        return bool(self.rng.random() < self.ratios[cls])

    def __call__(self, records: Iterable[FlowRecord]) -> Iterator[FlowRecord]:
        for record in records:
            if self.keep(record):
                yield record

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def sample_by_class(records: Iterable[FlowRecord], ratios: Mapping[str, float],
                    rng_seed: int) -> list[FlowRecord]:
    return list(ClassSampler(ratios, rng_seed)(records))


def _signed_log1p(x: float) -> float:
    return math.copysign(math.log1p(abs(x)), x)


def preprocess(record: FlowRecord, config: IngestConfig) -> FeatureVector:
    """Extract ``config.feature_columns`` from ``record`` as a float vector."""
    values = []
    for name in config.feature_columns:
        if name not in record.fields:
            raise MissingColumn(f"record {record.record_id} lacks column {name!r}")
        raw = record.fields[name]
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise MalformedRow(f"record {record.record_id}: {name}={raw!r} is not numeric") from None
        if not math.isfinite(value):
            raise NonFiniteValue(f"record {record.record_id}: {name}={raw!r}")
        if config.transform == "log1p":
            value = _signed_log1p(value)
        values.append(value)
    return FeatureVector(np.array(values, dtype=np.float64), record.record_id)


def load_initial_dataset(path: str, config: IngestConfig, labels: LabelSet) -> Dataset:
    """Read D_0 from a labeled CSV with the same columns as the input.

    Examples get negative record ids (-1, -2, ...) so they never collide
    with ids of streamed records.
    """
    if not config.label_column:
        raise MissingColumn("an initial dataset needs ingest.label_column")
    cfg = IngestConfig(path, list(config.feature_columns), config.label_column, transform=config.transform)
    ds = Dataset(labels)
    for i, record in enumerate(read_offline(cfg, labels)):
        if record.ground_truth is None:
            raise MalformedRow(f"{path}: row {i + 1} has no label")
        fv = preprocess(record, cfg)
        ds.add(LabeledExample(FeatureVector(fv.values, -1 - i), labels.by_name(record.ground_truth),
                              Provenance.INITIAL, 0))
    return ds
