"""Persistence: append-only metrics log, checkpoint archives and the
checkpoint-directory lock.

Metrics file: one JSON object per line, keys in ``MetricsRecord`` field
order. Checkpoint: a zip archive ``ckpt-<loop>.zip`` holding
``manifest.json``, ``dataset.csv`` and (once trained) ``model.json``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import threading
import zipfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, TextIO

import numpy as np

from flowal.core import (
    CorruptCheckpoint,
    Dataset,
    FeatureVector,
    LabeledExample,
    LabelSet,
    MetricsRecord,
    ModelSnapshot,
    Provenance,
)
from flowal.model import TreeEnsemble

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_COLUMNS = [f.name for f in dataclasses.fields(MetricsRecord)]
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


# -- metrics -------------------------------------------------------------------

class MetricsWriter:
    """Append metric rows to a JSON-lines file.

    Each row goes out in a single ``write`` on an ``O_APPEND`` descriptor,
    so concurrent writers never interleave within a line.
    """

    def __init__(self, path: str | os.PathLike, fsync: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._lock = threading.Lock()

    def append(self, record: MetricsRecord) -> None:
        line = (json.dumps(dataclasses.asdict(record), separators=(",", ":")) + "\n").encode("utf-8")
        with self._lock:
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                written = os.write(fd, line)
                if written != len(line):
                    raise OSError(f"short write to {self.path}")
                if self.fsync:
                    os.fsync(fd)
            finally:
                os.close(fd)

    def line_count(self) -> int:
        if not self.path.exists():
            return 0
        with open(self.path, "rb") as fh:
            return sum(1 for _ in fh)

    def truncate_to(self, n_lines: int) -> None:
        """Drop rows past the first ``n_lines`` (rows written after the
        checkpoint a restart resumes from)."""
        if not self.path.exists():
            return
        with open(self.path, "rb") as fh:
            lines = fh.readlines()
        if len(lines) > n_lines:
            log.warning("truncating %s from %d to %d rows", self.path, len(lines), n_lines)
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_bytes(b"".join(lines[:n_lines]))
            os.replace(tmp, self.path)


def append_metrics(path: str | os.PathLike, record: MetricsRecord) -> None:
    MetricsWriter(path).append(record)


def read_metrics(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rows


def write_metrics_csv(rows: Iterable[dict], out: TextIO) -> int:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    n = 0
    for row in rows:
        writer.writerow(["" if row.get(c) is None else row.get(c) for c in METRICS_COLUMNS])
        n += 1
    return n


# -- model and dataset serialization --------------------------------------------

def model_to_bytes(snapshot: ModelSnapshot) -> bytes:
    doc = {"generation": snapshot.generation, "trained_at": snapshot.trained_at,
           "model": snapshot.model.to_state()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def model_from_bytes(blob: bytes) -> ModelSnapshot:
    doc = json.loads(blob)
    state = doc["model"]
    if state.get("kind") != "tree_ensemble":
        raise CorruptCheckpoint(f"unknown model kind {state.get('kind')!r}")
    return ModelSnapshot(doc["generation"], TreeEnsemble.from_state(state), doc["trained_at"])


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    dim = dataset.dim or 0
    writer.writerow(["record_id", "label", "provenance", "generation_added"] + [f"f{i}" for i in range(dim)])
    for ex in dataset:
        writer.writerow([ex.record_id, ex.label.name, ex.provenance.value, ex.generation_added]
                        + [repr(float(v)) for v in ex.features.values])
    return buf.getvalue()


def dataset_from_csv(text: str, labels: LabelSet, generation: int) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:4] != ["record_id", "label", "provenance", "generation_added"]:
        raise CorruptCheckpoint(f"unexpected dataset header {header[:4]}")
    ds = Dataset(labels, generation=generation)
    for row in reader:
        features = FeatureVector(np.array([float(v) for v in row[4:]]), int(row[0]))
        ds.add(LabeledExample(features, labels.by_name(row[1]), Provenance(row[2]), int(row[3])))
    return ds


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    generation: int
    dataset: Dataset
    model: ModelSnapshot | None
    loop: int
    annotations_spent: int
    strategy_state: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    abstains: int = 0
    records_dropped: int = 0
    last_record_id: int = -1
    metrics_lines: int = 0
    retrain_pending: bool = False
    dataset_dirty: bool = False
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict[str, Any]:
        return {
            "version": CHECKPOINT_VERSION,
            "generation": self.generation,
            "labels": self.dataset.labels.names,
            "loop": self.loop,
            "annotations_spent": self.annotations_spent,
            "strategy_state": self.strategy_state,
            "rng_state": self.rng_state,
            "abstains": self.abstains,
            "records_dropped": self.records_dropped,
            "last_record_id": self.last_record_id,
            "metrics_lines": self.metrics_lines,
            "retrain_pending": self.retrain_pending,
            "dataset_dirty": self.dataset_dirty,
            "has_model": self.model is not None,
            "extra": self.extra,
        }


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def checkpoint_to_bytes(cp: Checkpoint) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "manifest.json",
                   json.dumps(cp.manifest(), sort_keys=True, indent=1).encode("utf-8"))
        _zip_write(zf, "dataset.csv", dataset_to_csv(cp.dataset).encode("utf-8"))
        if cp.model is not None:
            _zip_write(zf, "model.json", model_to_bytes(cp.model))
    return buf.getvalue()


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    try:
        with zipfile.ZipFile(io.BytesIO(blob)) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise CorruptCheckpoint(f"unsupported checkpoint version {manifest.get('version')}")
            labels = LabelSet(manifest["labels"])
            dataset = dataset_from_csv(zf.read("dataset.csv").decode("utf-8"), labels, manifest["generation"])
            model = model_from_bytes(zf.read("model.json")) if manifest["has_model"] else None
    except CorruptCheckpoint:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CorruptCheckpoint(str(exc)) from exc
    return Checkpoint(
        generation=manifest["generation"],
        dataset=dataset,
        model=model,
        loop=manifest["loop"],
        annotations_spent=manifest["annotations_spent"],
        strategy_state=manifest["strategy_state"],
        rng_state=manifest["rng_state"],
        abstains=manifest["abstains"],
        records_dropped=manifest["records_dropped"],
        last_record_id=manifest["last_record_id"],
        metrics_lines=manifest["metrics_lines"],
        retrain_pending=manifest["retrain_pending"],
        dataset_dirty=manifest["dataset_dirty"],
        extra=manifest.get("extra", {}),
    )


class CheckpointStore:
    """Directory of checkpoint archives; the newest loadable one wins."""

    def __init__(self, directory: str | os.PathLike, keep: int = 3):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.keep = max(2, keep)
        self.corrupt_skipped = 0

    def _paths(self) -> list[Path]:
        return sorted(self.directory.glob("ckpt-*.zip"))

    def save(self, cp: Checkpoint) -> Path:
        path = self.directory / f"ckpt-{cp.loop:08d}.zip"
        tmp = path.with_suffix(".zip.tmp")
        with open(tmp, "wb") as fh:
            fh.write(checkpoint_to_bytes(cp))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        for old in self._paths()[: -self.keep]:
            old.unlink(missing_ok=True)
        return path

    def load(self) -> Checkpoint | None:
        for path in reversed(self._paths()):
            try:
                return checkpoint_from_bytes(path.read_bytes())
            except CorruptCheckpoint as exc:
                self.corrupt_skipped += 1
                log.warning("skipping corrupt checkpoint %s: %s", path, exc)
        return None

    def latest_path(self) -> Path | None:
        paths = self._paths()
        return paths[-1] if paths else None


def save_checkpoint(directory: str | os.PathLike, cp: Checkpoint) -> Path:
    return CheckpointStore(directory).save(cp)


def load_checkpoint(directory: str | os.PathLike) -> Checkpoint | None:
    return CheckpointStore(directory).load()


class DirectoryLocked(RuntimeError):
    pass


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def directory_lock(directory: str | os.PathLike):
    """Exclusive lock on a checkpoint directory; stale locks of dead
    processes are taken over."""
    path = Path(directory) / "LOCK"
    path.parent.mkdir(parents=True, exist_ok=True)
    for _ in range(2):
        try:
            fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            if pid and pid != os.getpid() and _pid_alive(pid):
                raise DirectoryLocked(f"{directory} is locked by running process {pid}") from None
            path.unlink(missing_ok=True)
            continue
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        break
    else:
        raise DirectoryLocked(f"cannot lock {directory}")
    try:
        yield path
    finally:
        path.unlink(missing_ok=True)
