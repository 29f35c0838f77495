"""Flat ``key = value`` configuration files.

Keys are dotted (``strategy.kind``); a ``[section]`` line prefixes the
keys below it, so ``[strategy]`` followed by ``kind = entropy`` is the same
as ``strategy.kind = entropy``. ``#`` starts a comment. Every key is
validated before any work starts; environment variables named
``FLOWAL_<KEY>`` with dots written as ``__`` (``FLOWAL_STRATEGY__KIND``)
override file values.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

from flowal.core import LabelSet
from flowal.engine import LoopConfig
from flowal.ingest import IngestConfig
from flowal.model import EnsembleConfig
from flowal.strategy import STRATEGY_KINDS, StrategyConfig

ENV_PREFIX = "FLOWAL_"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


def _list(v: str) -> list[str]:
    return [p.strip() for p in v.split(",") if p.strip()]


def _opt(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(v: str):
        return None if v.strip().lower() in ("", "none", "off") else conv(v)
    return parse


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ratios(v: str) -> dict[str, float]:
    out = {}
    for item in _list(v):
        name, sep, ratio = item.rpartition(":")
        if not sep:
            raise ValueError(f"expected 'label:ratio', got {item!r}")
        out[name.strip()] = float(ratio)
    return out


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        v = v.strip()
        if v not in options:
            raise ValueError(f"{v!r} is not one of {', '.join(options)}")
        return v
    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "run.mode": (_choice("offline", "online"), "offline"),
    "run.seed": (int, 0),
    "run.labels": (_list, None),
    "run.metrics_out": (_opt(str), "metrics.jsonl"),
    "run.checkpoint_dir": (_opt(str), None),
    "run.initial_dataset": (_opt(str), None),
    "run.clock": (_choice("wall", "logical"), "wall"),
    "ingest.source": (str, None),
    "ingest.feature_columns": (_list, None),
    "ingest.label_column": (_opt(str), None),
    "ingest.id_column": (_opt(str), None),
    "ingest.sampling": (_ratios, {}),
    "ingest.queue_capacity": (int, 10_000),
    "ingest.retries": (int, 3),
    "ingest.transform": (_choice("none", "log1p"), "none"),
    "strategy.kind": (_choice(*STRATEGY_KINDS), "random"),
    "strategy.select_k": (int, 10),
    "strategy.beta": (float, 1.0),
    "strategy.similarity": (_choice("cosine", "euclidean-rbf"), "cosine"),
    "strategy.threshold": (_opt(float), None),
    "strategy.base": (_choice("least_confident", "margin", "entropy"), "least_confident"),
    "strategy.qbc.smoothing": (float, 0.0),
    "strategy.ral.theta": (float, 0.5),
    "strategy.ral.eta": (float, 0.1),
    "strategy.ral.budget": (float, 1.0),
    "strategy.ral.epsilon": (float, 0.01),
    "strategy.ral.theta_min": (float, 0.01),
    "strategy.ral.theta_max": (float, 0.99),
    "model.members": (int, 10),
    "model.max_depth": (int, 12),
    "model.min_samples_split": (int, 2),
    "model.feature_subsample": (float, 0.7),
    "model.leaf_smoothing": (float, 0.0),
    "loop.buffer_size": (int, 10_000),
    "loop.balance": (_choice("none", "undersample", "oversample"), "none"),
    "loop.balance_ratio": (float, 1.0),
    "loop.dataset_cap": (_opt(int), None),
    "loop.cap_policy": (_choice("fifo", "reservoir"), "fifo"),
    "loop.eval_source": (_choice("ground_truth", "annotator"), "ground_truth"),
    "loop.eval_fraction": (float, 0.01),
    "loop.retrain_every": (int, 1),
    "loop.checkpoint_every": (int, 1),
    "annotator.kind": (_choice("oracle", "lookup"), "oracle"),
    "annotator.table": (_opt(str), None),
    "annotator.key_field": (_opt(str), None),
    "annotator.max_per_loop": (_opt(int), None),
    "annotator.max_total": (_opt(int), None),
    "compare.strategies": (_list, []),
    "compare.repeats": (int, 1),
}
REQUIRED = ("run.labels", "ingest.source", "ingest.feature_columns")

_SECTION = re.compile(r"^\[\s*([A-Za-z0-9_.]+)\s*\]$")
_ENTRY = re.compile(r"^([A-Za-z0-9_.]+)\s*=\s*(.*)$")
_COMPARE_ENTRY = re.compile(r"^([a-z_]+)(?:\[(.*)\])?$")


def parse_text(text: str) -> dict[str, tuple[str, int]]:
    """Raw ``key -> (value, line)`` map; no validation beyond syntax."""
    out: dict[str, tuple[str, int]] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1) + "."
            continue
        m = _ENTRY.match(line)
        if not m:
            raise ConfigError(f"cannot parse {raw.strip()!r}", line=lineno)
        key = section + m.group(1)
        if key in out:
            raise ConfigError("duplicate key", key, lineno)
        out[key] = (m.group(2).strip(), lineno)
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, tuple[str, None]]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        if key in SCHEMA:
            out[key] = (value, None)
    return out


@dataclass
class RunConfig:
    labels: LabelSet
    ingest: IngestConfig
    strategy: StrategyConfig
    model: EnsembleConfig
    loop: LoopConfig
    mode: str = "offline"
    seed: int = 0
    metrics_out: str | None = "metrics.jsonl"
    checkpoint_dir: str | None = None
    initial_dataset: str | None = None
    retries: int = 3
    annotator: dict = field(default_factory=dict)
    compare: list[StrategyConfig] = field(default_factory=list)
    repeats: int = 1
    values: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> RunConfig:
        return replace(
            self,
            seed=seed,
            strategy=replace(self.strategy, rng_seed=seed),
            compare=[replace(s, rng_seed=seed) for s in self.compare],
        )


def _strategy_from(values: dict, kind: str, name: str | None, overrides: dict[str, str], line) -> StrategyConfig:
    v = dict(values)
    for key, raw in overrides.items():
        full = f"strategy.{key}"
        if full not in SCHEMA or full == "strategy.kind":
            raise ConfigError(f"unknown strategy parameter {key!r}", "compare.strategies", line)
        try:
            v[full] = SCHEMA[full][0](raw)
        except ValueError as exc:
            raise ConfigError(str(exc), "compare.strategies", line) from None
    return StrategyConfig(
        kind=kind,
        select_k=v["strategy.select_k"],
        beta=v["strategy.beta"],
        similarity=v["strategy.similarity"],
        score_threshold=v["strategy.threshold"],
        base=v["strategy.base"],
        qbc_smoothing=v["strategy.qbc.smoothing"],
        ral_theta=v["strategy.ral.theta"],
        ral_eta=v["strategy.ral.eta"],
        ral_budget=v["strategy.ral.budget"],
        ral_epsilon=v["strategy.ral.epsilon"],
        ral_theta_min=v["strategy.ral.theta_min"],
        ral_theta_max=v["strategy.ral.theta_max"],
        rng_seed=v["run.seed"],
        name=name,
    )


def build(raw: dict[str, tuple[str, int | None]]) -> RunConfig:
    values: dict[str, Any] = {}
    lines: dict[str, int | None] = {}
    for key, (text, line) in raw.items():
        if key not in SCHEMA:
            raise ConfigError("unknown key", key, line)
        try:
            values[key] = SCHEMA[key][0](text)
        except ValueError as exc:
            raise ConfigError(str(exc), key, line) from None
        lines[key] = line
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    for key in REQUIRED:
        if values[key] in (None, []):
            raise ConfigError("required key is missing", key)

    def guard(keys: tuple[str, ...], make):
        try:
            return make()
        except ValueError as exc:
            key = next((k for k in keys if k in raw), keys[0])
            raise ConfigError(str(exc), key, lines.get(key)) from None

    labels = guard(("run.labels",), lambda: LabelSet(values["run.labels"]))
    ingest = guard(
        ("ingest.feature_columns", "ingest.sampling", "ingest.queue_capacity"),
        lambda: IngestConfig(
            source=values["ingest.source"],
            feature_columns=values["ingest.feature_columns"],
            label_column=values["ingest.label_column"],
            id_column=values["ingest.id_column"],
            sampling=values["ingest.sampling"],
            queue_capacity=values["ingest.queue_capacity"],
            transform=values["ingest.transform"],
        ),
    )
    if (values["run.mode"] == "online") != ingest.is_stream:
        want = "a tcp:// or unix:// endpoint" if values["run.mode"] == "online" else "a file"
        raise ConfigError(f"mode {values['run.mode']} needs {want} as ingest.source", "run.mode",
                          lines.get("run.mode"))
    for name in values["ingest.sampling"]:
        if name not in labels.names:
            raise ConfigError(f"sampling names unknown label {name!r}", "ingest.sampling", lines.get("ingest.sampling"))
    strategy = guard(tuple(k for k in SCHEMA if k.startswith("strategy.")),
                     lambda: _strategy_from(values, values["strategy.kind"], None, {}, None))
    model = guard(
        ("model.members", "model.max_depth", "model.min_samples_split", "model.feature_subsample",
         "model.leaf_smoothing"),
        lambda: EnsembleConfig(
            num_members=values["model.members"],
            max_depth=values["model.max_depth"],
            min_samples_split=values["model.min_samples_split"],
            feature_subsample=values["model.feature_subsample"],
            rng_seed=values["run.seed"],
            leaf_smoothing=values["model.leaf_smoothing"],
        ),
    )
    loop = guard(
        tuple(k for k in SCHEMA if k.startswith("loop.")) + ("strategy.select_k",),
        lambda: LoopConfig(
            buffer_size=values["loop.buffer_size"],
            select_k=values["strategy.select_k"],
            balance=values["loop.balance"],
            balance_ratio=values["loop.balance_ratio"],
            dataset_cap=values["loop.dataset_cap"],
            cap_policy=values["loop.cap_policy"],
            eval_source=values["loop.eval_source"],
            eval_fraction=values["loop.eval_fraction"],
            retrain_every=values["loop.retrain_every"],
            checkpoint_every=values["loop.checkpoint_every"],
            clock=values["run.clock"],
        ),
    )
    if values["annotator.kind"] == "lookup":
        for key in ("annotator.table", "annotator.key_field"):
            if not values[key]:
                raise ConfigError("required for the lookup annotator", key)
    if values["ingest.retries"] < 0:
        raise ConfigError("must be >= 0", "ingest.retries", lines.get("ingest.retries"))
    if values["compare.repeats"] < 1:
        raise ConfigError("must be >= 1", "compare.repeats", lines.get("compare.repeats"))

    compare = []
    cline = lines.get("compare.strategies")
    for entry in values["compare.strategies"]:
        m = _COMPARE_ENTRY.match(entry.replace(" ", ""))
        if not m or m.group(1) not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {entry!r}", "compare.strategies", cline)
        overrides = {}
        if m.group(2):
            for item in m.group(2).split(";"):
                k, sep, val = item.partition("=")
                if not sep:
                    raise ConfigError(f"bad strategy parameter {item!r}", "compare.strategies", cline)
                overrides[k.strip()] = val.strip()
        name = entry.replace(" ", "") if overrides else None
        compare.append(guard(("compare.strategies",),
                             lambda: _strategy_from(values, m.group(1), name, overrides, cline)))

    return RunConfig(
        labels=labels,
        ingest=ingest,
        strategy=strategy,
        model=model,
        loop=loop,
        mode=values["run.mode"],
        seed=values["run.seed"],
        metrics_out=values["run.metrics_out"],
        checkpoint_dir=values["run.checkpoint_dir"],
        initial_dataset=values["run.initial_dataset"],
        retries=values["ingest.retries"],
        annotator={
            "kind": values["annotator.kind"],
            "table": values["annotator.table"],
            "key_field": values["annotator.key_field"],
            "max_per_loop": values["annotator.max_per_loop"],
            "max_total": values["annotator.max_total"],
        },
        compare=compare,
        repeats=values["compare.repeats"],
        values=values,
    )


def load_config(path: str | os.PathLike, environ: Mapping[str, str] | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        raw = parse_text(fh.read())
    raw.update(env_overrides(environ))
    cfg = build(raw)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        if p is None or "://" in p or os.path.isabs(p):
            return p
        return os.path.join(base, p)

    cfg.ingest.source = resolve(cfg.ingest.source)
    cfg.initial_dataset = resolve(cfg.initial_dataset)
    cfg.annotator["table"] = resolve(cfg.annotator["table"])
    return cfg
