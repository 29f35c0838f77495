"""Command-line entry point: ``flowal run|compare|relabel|export|synth``.

Exit codes: 0 on success (including a clean interrupt), 1 on runtime
failures, 2 on configuration or usage errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from flowal.annotate import AnnotatorBudget, LookupAnnotator, OracleAnnotator, relabel
from flowal.config import ConfigError, RunConfig, load_config
from flowal.core import FlowalError
from flowal.engine import Engine, derive_seed, resilient, run_side_by_side
from flowal.ingest import (
    ClassSampler,
    load_initial_dataset,
    preprocess,
    read_offline,
    read_stream,
    threaded,
)
from flowal.store import (
    CheckpointStore,
    DirectoryLocked,
    MetricsWriter,
    directory_lock,
    read_metrics,
    write_metrics_csv,
)
from flowal.strategy import Strategy, StrategyConfig

log = logging.getLogger("flowal")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
_SAMPLER_TAG = 7


class _Source:
    """Record source for one run; counts rows dropped across reconnects."""

    def __init__(self, cfg: RunConfig, start_after: int, should_stop):
        self.cfg = cfg
        self.start_after = start_after
        self.should_stop = should_stop
        self._readers = []

    @property
    def dropped(self) -> int:
        return sum(r.dropped for r in self._readers)

    def _open(self):
        if self.cfg.ingest.is_stream:
            reader = read_stream(self.cfg.ingest, self.cfg.labels)
        else:
            reader = read_offline(self.cfg.ingest, self.cfg.labels, self.start_after)
        self._readers.append(reader)
        return reader

    def __iter__(self):
        if not self.cfg.ingest.is_stream:
            return iter(self._open())
        records = resilient(self._open, self.cfg.retries)
        return threaded(records, self.cfg.ingest.queue_capacity, self.should_stop)


def _annotator(cfg: RunConfig):
    a = cfg.annotator
    if a["kind"] == "lookup":
        return LookupAnnotator(a["table"], a["key_field"], cfg.labels)
    return OracleAnnotator(cfg.labels)


def build_engine(cfg: RunConfig, strategy_cfg: StrategyConfig, metrics: MetricsWriter | None,
                 checkpoints: CheckpointStore | None, initial=None) -> Engine:
    if initial is None and cfg.initial_dataset:
        initial = load_initial_dataset(cfg.initial_dataset, cfg.ingest, cfg.labels)
    sampler = None
    if cfg.ingest.sampling:
        sampler = ClassSampler(cfg.ingest.sampling, derive_seed(cfg.seed, _SAMPLER_TAG, 0))
    budget = AnnotatorBudget(cfg.annotator["max_per_loop"], cfg.annotator["max_total"])
    strategy = Strategy(replace(strategy_cfg, rng_seed=cfg.seed), cfg.model.num_members)
    ingest = cfg.ingest
    return Engine(
        strategy,
        _annotator(cfg),
        cfg.labels,
        lambda record: preprocess(record, ingest),
        cfg.model,
        replace(cfg.loop, select_k=strategy_cfg.select_k),
        initial_dataset=initial,
        metrics=metrics,
        checkpoints=checkpoints,
        seed=cfg.seed,
        budget=budget,
        sampler=sampler,
    )


@contextmanager
def _stop_on_signals(engine_stop):
    previous = {}

    def handler(signum, frame):
        log.warning("signal %d received; stopping after the current buffer", signum)
        engine_stop()

    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, handler)
    try:
        yield
    finally:
        for sig, h in previous.items():
            signal.signal(sig, h)


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
        cfg.model = replace(cfg.model, rng_seed=args.seed)
    if getattr(args, "metrics_out", None):
        cfg.metrics_out = args.metrics_out
    if getattr(args, "checkpoint_dir", None):
        cfg.checkpoint_dir = args.checkpoint_dir
    return cfg


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def cmd_run(args) -> int:
    cfg = _load(args)
    metrics = MetricsWriter(cfg.metrics_out) if cfg.metrics_out else None

    def go(checkpoints):
        engine = build_engine(cfg, cfg.strategy, metrics, checkpoints)
        with _stop_on_signals(engine.request_stop):
            resumed = engine.start()
            if resumed:
                print(f"resumed at loop {engine.loop}, generation {engine.dataset.generation}")
            source = _Source(cfg, engine.last_record_id, lambda: engine.stopped)
            rows = engine.run(source, lambda: source.dropped)
        last = rows[-1] if rows else (engine.history[-1] if engine.history else None)
        state = "interrupted" if engine.stopped else "finished"
        print(f"{state}: strategy={engine.strategy.name} loops={engine.loop} "
              f"generation={engine.dataset.generation} dataset={len(engine.dataset)} "
              f"annotations={engine.annotations_spent} abstains={engine.abstains} "
              f"dropped={engine.records_dropped}")
        if last is not None:
            print(f"last loop: f1={_fmt(last.f1)} mcc={_fmt(last.mcc)} accuracy={_fmt(last.accuracy)} "
                  f"precision={_fmt(last.precision)} recall={_fmt(last.recall)}")
        return EXIT_OK

    if cfg.checkpoint_dir:
        with directory_lock(cfg.checkpoint_dir):
            return go(CheckpointStore(cfg.checkpoint_dir))
    return go(None)


def compare(cfg: RunConfig, metrics: MetricsWriter | None = None) -> list[tuple[str, float | None, float]]:
    """Run every configured strategy side by side on the same input,
    ``cfg.repeats`` times with seeds ``seed, seed + 1, ...``.

    Returns ``(strategy, avg final F1, avg query seconds per iteration)``
    rows sorted by strategy name.
    """
    strategies = cfg.compare or [cfg.strategy]
    finals: dict[int, list[float]] = {i: [] for i in range(len(strategies))}
    qtimes: dict[int, list[float]] = {i: [] for i in range(len(strategies))}
    initial = load_initial_dataset(cfg.initial_dataset, cfg.ingest, cfg.labels) if cfg.initial_dataset else None
    for r in range(cfg.repeats):
        run_cfg = cfg.with_seed(cfg.seed + r)
        run_cfg.model = replace(cfg.model, rng_seed=cfg.seed + r)
        engines = [build_engine(run_cfg, s, metrics, None, initial) for s in strategies]
        sampler = engines[0].sampler
        for e in engines:
            e.sampler = None
        stop = {"flag": False}
        source = _Source(run_cfg, -1, lambda: stop["flag"])
        with _stop_on_signals(lambda: stop.__setitem__("flag", True)):
            run_side_by_side(engines, source, cfg.loop.buffer_size, sampler, lambda: stop["flag"])
        for i, e in enumerate(engines):
            f1s = [m.f1 for m in e.history if m.f1 is not None]
            if f1s:
                finals[i].append(f1s[-1])
            qtimes[i].extend(m.query_time_seconds for m in e.history)
        if stop["flag"]:
            break
    rows = []
    for i, s in enumerate(strategies):
        f1 = sum(finals[i]) / len(finals[i]) if finals[i] else None
        qt = sum(qtimes[i]) / len(qtimes[i]) if qtimes[i] else 0.0
        rows.append((s.display_name, f1, qt))
    rows.sort(key=lambda row: row[0])
    return rows


def cmd_compare(args) -> int:
    cfg = _load(args)
    metrics = MetricsWriter(args.metrics_out) if args.metrics_out else None
    rows = compare(cfg, metrics)
    width = max([8] + [len(r[0]) for r in rows])
    print(f"{'strategy':<{width}}  {'avg_final_f1':>12}  {'avg_query_time_s_per_it':>23}")
    for name, f1, qt in rows:
        print(f"{name:<{width}}  {_fmt(f1):>12}  {qt:>23.6f}")
    return EXIT_OK


def _read_ids(args) -> list[int]:
    raw: list[str] = []
    if args.ids:
        raw.extend(args.ids.split(","))
    if args.ids_file:
        with open(args.ids_file, encoding="utf-8") as fh:
            for line in fh:
                raw.extend(line.split("#", 1)[0].replace(",", " ").split())
    try:
        return [int(x) for x in raw if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"record ids must be integers: {exc}") from None


def cmd_relabel(args) -> int:
    ids = _read_ids(args)
    directory = args.checkpoint_dir
    if not directory:
        raise ConfigError("relabel needs --checkpoint-dir")
    with directory_lock(directory):
        store = CheckpointStore(directory)
        cp = store.load()
        if cp is None:
            print(f"no checkpoint in {directory}", file=sys.stderr)
            return EXIT_RUNTIME
        label = cp.dataset.labels.by_name(args.label)
        dataset, retrain = relabel(cp.dataset, ids, label)
        if retrain:
            cp.dataset = dataset
            cp.retrain_pending = True
            store.save(cp)
    print(f"{len(ids)} relabeled" + (f" as {args.label}; retraining on the next loop" if retrain else ""))
    return EXIT_OK


def plot_f1(rows: list[dict], path: str | os.PathLike) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    by_strategy: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        if row.get("f1") is not None:
            by_strategy.setdefault(row["strategy_name"], []).append((row["loop"], row["f1"]))
    for name in sorted(by_strategy):
        pts = sorted(by_strategy[name])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cmd_export(args) -> int:
    rows = read_metrics(args.metrics)
    write_metrics_csv(rows, sys.stdout)
    if args.plot:
        out = plot_f1(rows, args.plot)
        print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    from flowal import synthetic

    if args.kind == "drift":
        records = synthetic.drift_stream(args.rows, seed=args.seed)
    else:
        records = synthetic.separable_stream(args.rows, seed=args.seed)
    synthetic.write_csv(records, args.out)
    print(f"wrote {len(records)} rows to {args.out}")
    if args.initial_out:
        if args.kind == "drift":
            initial = synthetic.drift_initial(args.initial_rows, seed=args.seed)
        else:
            initial = synthetic.separable_stream(args.initial_rows, seed=args.seed + 1)
        synthetic.write_csv(initial, args.initial_out)
        print(f"wrote {len(initial)} initial rows to {args.initial_out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowal", description="Stream-based active learning for flow data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, metrics=True, checkpoint=True):
        p.add_argument("--config", required=True, help="configuration file")
        p.add_argument("--seed", type=int, help="override run.seed")
        if metrics:
            p.add_argument("--metrics-out", help="override run.metrics_out")
        if checkpoint:
            p.add_argument("--checkpoint-dir", help="override run.checkpoint_dir")

    p = sub.add_parser("run", help="run the active-learning loop")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several strategies side by side")
    common(p, checkpoint=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("relabel", help="relabel examples in the newest checkpoint")
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--ids", help="comma-separated record ids")
    p.add_argument("--ids-file", help="file with record ids, whitespace or comma separated")
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("export", help="write a metrics file as CSV to stdout")
    p.add_argument("metrics", help="metrics JSON-lines file")
    p.add_argument("--plot", metavar="PNG", help="also plot F1 per iteration")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="write a synthetic labeled corpus")
    p.add_argument("--kind", choices=("drift", "separable"), default="drift")
    p.add_argument("--rows", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--initial-out", help="also write a labeled initial dataset")
    p.add_argument("--initial-rows", type=int, default=200)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DirectoryLocked as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FlowalError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
