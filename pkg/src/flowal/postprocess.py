"""Dataset postprocessing: class balancing and size capping."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Callable, Optional

import numpy as np

from flowal.core import Dataset

BALANCE_MODES = ("none", "undersample", "oversample")
CAP_POLICIES = ("fifo", "reservoir")

# Called with (D_i, candidate D_{i+1}) after annotation, balancing and
# capping; returning False vetoes the update and keeps D_i.
QualityHook = Callable[[Dataset, Dataset], bool]


def _by_class(dataset: Dataset) -> dict[int, list[int]]:
    groups = defaultdict(list)
    for pos, ex in enumerate(dataset):
        groups[ex.label.class_id].append(pos)
    return groups


def balance_dataset(dataset: Dataset, mode: str, r: float, rng: np.random.Generator) -> Dataset:
    """Return a copy whose max/min class count ratio is at most ``r``.

    Undersampling drops random examples of large classes, oversampling
    appends random duplicates (drawn with replacement) of small classes.
    The generation is left unchanged.
    """
    if mode not in BALANCE_MODES:
        raise ValueError(f"unknown balance mode {mode!r}")
    if r < 1:
        raise ValueError("imbalance ratio must be >= 1")
    out = dataset.copy()
    groups = _by_class(out)
    if mode == "none" or len(groups) < 2:
        return out
    examples = list(out)
    sizes = {c: len(p) for c, p in groups.items()}
    if mode == "undersample":
        keep_at_most = math.floor(r * min(sizes.values()))
        drop = set()
        for c in sorted(groups):
            pos = groups[c]
            if len(pos) > keep_at_most:
                kept = set(rng.choice(len(pos), size=keep_at_most, replace=False).tolist())
                drop.update(p for i, p in enumerate(pos) if i not in kept)
        out.replace_examples(ex for i, ex in enumerate(examples) if i not in drop)
    else:
        need_at_least = math.ceil(max(sizes.values()) / r)
        extra = []
        for c in sorted(groups):
            pos = groups[c]
            if len(pos) < need_at_least:
                picks = rng.choice(len(pos), size=need_at_least - len(pos), replace=True)
                extra.extend(examples[pos[i]] for i in picks)
        out.replace_examples(examples + extra)
    return out


def cap_dataset(dataset: Dataset, cap: Optional[int], policy: str, rng: np.random.Generator) -> Dataset:
    """Shrink ``dataset`` to at most ``cap`` examples.

    ``fifo`` evicts the oldest examples (by generation added, then by
    insertion order); ``reservoir`` keeps a uniformly random subset. Either
    way one example of every present class survives.
    """
    if policy not in CAP_POLICIES:
        raise ValueError(f"unknown cap policy {policy!r}")
    out = dataset.copy()
    if cap is None or len(out) <= cap:
        return out
    groups = _by_class(out)
    if cap < len(groups):
        raise ValueError(f"cap {cap} is smaller than the number of present classes {len(groups)}")
    examples = list(out)
    if policy == "fifo":
        age = sorted(range(len(examples)), key=lambda i: (examples[i].generation_added, i))
        guard = {max(p, key=lambda i: (examples[i].generation_added, i)) for p in groups.values()}
        rest = [i for i in reversed(age) if i not in guard]
        keep = guard | set(rest[: cap - len(guard)])
    else:
        guard = {p[int(rng.integers(len(p)))] for _, p in sorted(groups.items())}
        rest = np.array([i for i in range(len(examples)) if i not in guard], dtype=np.intp)
        chosen = rng.choice(rest.shape[0], size=cap - len(guard), replace=False) if cap > len(guard) else []
        keep = guard | {int(rest[i]) for i in chosen}
    out.replace_examples(ex for i, ex in enumerate(examples) if i in keep)
    return out
