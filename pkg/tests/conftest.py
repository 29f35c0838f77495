import math

import numpy as np
import pytest

from flowal.core import Dataset, FeatureVector, LabeledExample, LabelSet, Provenance


@pytest.fixture
def labels():
    return LabelSet(["benign", "miner"])


def make_dataset(labels, rows, generation=0, provenance=Provenance.INITIAL):
    """``rows`` is a list of (features, class_id); record ids count from 0."""
    ds = Dataset(labels, generation=generation)
    for i, (x, c) in enumerate(rows):
        ds.add(LabeledExample(FeatureVector(np.asarray(x, dtype=float), i), labels[c], provenance, 0))
    return ds


def blobs(n_per_class, n_features=4, distance=8.0, seed=0):
    rng = np.random.default_rng(seed)
    X0 = rng.normal(size=(n_per_class, n_features))
    X1 = rng.normal(size=(n_per_class, n_features)) + distance / np.sqrt(n_features)
    X = np.vstack([X0, X1])
    y = np.r_[np.zeros(n_per_class, dtype=np.intp), np.ones(n_per_class, dtype=np.intp)]
    return X, y


def brute_metrics(counts):
    """Reference calculator that rebuilds label pairs from the matrix and
    counts everything one pair at a time."""
    k = len(counts)
    pairs = [(t, p) for t in range(k) for p in range(k) for _ in range(counts[t][p])]
    n = len(pairs)
    acc = sum(t == p for t, p in pairs) / n

    def per_class(c):
        tp = sum(t == c and p == c for t, p in pairs)
        fp = sum(t != c and p == c for t, p in pairs)
        fn = sum(t == c and p != c for t, p in pairs)
        tn = n - tp - fp - fn
        return tp, fp, fn, tn

    if k == 2:
        tp, fp, fn, tn = per_class(1)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        mcc = (tp * tn - fp * fn) / den if den else 0.0
        return dict(mcc=mcc, f1=f1, accuracy=acc, precision=prec, recall=rec)
    precs, recs, f1s = [], [], []
    for c in range(k):
        tp, fp, fn, _ = per_class(c)
        if tp + fp + fn == 0:
            continue
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precs.append(p)
        recs.append(r)
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    # multi-class MCC as a correlation between one-hot truth and prediction
    T = np.zeros((n, k))
    P = np.zeros((n, k))
    for i, (t, p) in enumerate(pairs):
        T[i, t] = 1
        P[i, p] = 1
    Tc, Pc = T - T.mean(0), P - P.mean(0)
    cov_tp = (Tc * Pc).sum()
    cov_tt, cov_pp = (Tc * Tc).sum(), (Pc * Pc).sum()
    mcc = cov_tp / math.sqrt(cov_tt * cov_pp) if cov_tt * cov_pp > 0 else 0.0
    return dict(mcc=mcc, f1=np.mean(f1s), accuracy=acc, precision=np.mean(precs), recall=np.mean(recs))
