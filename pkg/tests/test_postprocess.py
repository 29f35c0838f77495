import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowal.core import Dataset, FeatureVector, LabeledExample, LabelSet, Provenance
from flowal.postprocess import balance_dataset, cap_dataset

LABELS = LabelSet(["A", "B", "C"])


def build(counts, gens=None):
    ds = Dataset(LABELS)
    rid = 0
    for c, n in enumerate(counts):
        for _ in range(n):
            g = gens[rid] if gens else 0
            ds.add(LabeledExample(FeatureVector([float(rid)], rid), LABELS[c], Provenance.ANNOTATED, g))
            rid += 1
    return ds


def ratio(ds):
    counts = [v for v in ds.recount().values() if v]
    return max(counts) / min(counts)


def test_undersample_to_minority():
    out = balance_dataset(build([100, 10]), "undersample", 1.0, np.random.default_rng(0))
    assert out.counts_by_name()["A"] == 10 and out.counts_by_name()["B"] == 10


def test_oversample_to_majority():
    src = build([100, 10])
    out = balance_dataset(src, "oversample", 1.0, np.random.default_rng(0))
    assert out.counts_by_name()["A"] == 100 and out.counts_by_name()["B"] == 100
    b_ids = [ex.record_id for ex in out if ex.label.name == "B"]
    assert len(b_ids) - len(set(b_ids)) == 90
    assert len(src) == 110


@pytest.mark.parametrize("mode", ["undersample", "oversample", "none"])
def test_balanced_input_unchanged(mode):
    ds = build([10, 10])
    out = balance_dataset(ds, mode, 1.0, np.random.default_rng(0))
    assert [ex.record_id for ex in out] == [ex.record_id for ex in ds]


def test_balance_keeps_generation():
    ds = build([5, 1])
    ds.generation = 4
    assert balance_dataset(ds, "oversample", 1.0, np.random.default_rng(0)).generation == 4


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=3), st.sampled_from(["undersample", "oversample"]),
       st.floats(1.0, 5.0), st.integers(0, 2**31))
def test_balance_bounds_ratio(counts, mode, r, seed):
    out = balance_dataset(build(counts), mode, r, np.random.default_rng(seed))
    assert ratio(out) <= r + 1e-9
    assert set(out.present_classes()) == set(range(len(counts)))


def test_cap_noop_and_fifo():
    ds = build([60, 40])
    assert len(cap_dataset(ds, 100, "fifo", np.random.default_rng(0))) == 100
    gens = [1] * 101
    gens[17] = 0  # oldest by generation
    ds = build([60, 41], gens)
    out = cap_dataset(ds, 100, "fifo", np.random.default_rng(0))
    assert len(out) == 100 and 17 not in out.record_ids()


def test_cap_keeps_every_class():
    ds = build([50, 1])
    out = cap_dataset(ds, 2, "fifo", np.random.default_rng(0))
    assert out.counts_by_name() == {"A": 1, "B": 1}
    out = cap_dataset(ds, 2, "reservoir", np.random.default_rng(0))
    assert out.counts_by_name()["B"] == 1 and len(out) == 2
    with pytest.raises(ValueError):
        cap_dataset(build([3, 3, 3]), 2, "fifo", np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=3, max_size=3), st.integers(3, 60),
       st.sampled_from(["fifo", "reservoir"]), st.integers(0, 2**31))
def test_cap_never_empties_a_class(counts, cap, policy, seed):
    ds = build(counts, gens=list(np.random.default_rng(seed).integers(0, 5, size=sum(counts))))
    out = cap_dataset(ds, cap, policy, np.random.default_rng(seed))
    assert len(out) == min(len(ds), cap)
    assert set(out.present_classes()) == set(ds.present_classes())
    assert set(out.record_ids()) <= set(ds.record_ids())


def test_unknown_modes_rejected():
    with pytest.raises(ValueError):
        balance_dataset(build([1, 1]), "smote", 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        balance_dataset(build([1, 1]), "undersample", 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        cap_dataset(build([1, 1]), 1, "lru", np.random.default_rng(0))
