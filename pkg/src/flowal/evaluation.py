"""Confusion-matrix metrics and prequential (test-then-train) evaluation."""

from __future__ import annotations

import math

import numpy as np

from flowal.core import ConfusionMatrix, EmptyMatrix, FlowalError


class NoEvaluationLabels(FlowalError):
    pass


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """MCC, F1, accuracy, precision and recall of a confusion matrix.

    Two classes: class 1 is the positive class and the usual TP/FP/FN/TN
    formulas apply. More classes: precision, recall and F1 are
    macro-averaged over the classes that occur as truth or prediction, and
    MCC is the multi-class generalisation over the full matrix.

    Zero denominators give 0 (precision with no positive predictions,
    recall with no positives, F1 when both are 0, MCC when any marginal
    product vanishes).
    """
    counts = [[int(v) for v in row] for row in cm.counts]
    k = len(counts)
    total = sum(map(sum, counts))
    if total == 0:
        raise EmptyMatrix("confusion matrix has no entries")
    trace = sum(counts[i][i] for i in range(k))
    accuracy = trace / total

    if k == 2:
        tn, fp = counts[0]
        fn, tp = counts[1]
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * tp, 2 * tp + fp + fn)
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
    else:
        true_tot = [sum(counts[i]) for i in range(k)]
        pred_tot = [sum(counts[i][j] for i in range(k)) for j in range(k)]
        precs, recs, f1s = [], [], []
        for c in range(k):
            if true_tot[c] == 0 and pred_tot[c] == 0:
                continue
            tp = counts[c][c]
            precs.append(_ratio(tp, pred_tot[c]))
            recs.append(_ratio(tp, true_tot[c]))
            f1s.append(_ratio(2 * tp, true_tot[c] + pred_tot[c]))
        precision = sum(precs) / len(precs)
        recall = sum(recs) / len(recs)
        f1 = sum(f1s) / len(f1s)
        cov_tp = trace * total - sum(p * t for p, t in zip(pred_tot, true_tot))
        cov_pp = total * total - sum(p * p for p in pred_tot)
        cov_tt = total * total - sum(t * t for t in true_tot)
        mcc = cov_tp / math.sqrt(cov_pp * cov_tt) if cov_pp and cov_tt else 0.0

    mcc = min(1.0, max(-1.0, mcc))
    return {"mcc": mcc, "f1": f1, "accuracy": accuracy, "precision": precision, "recall": recall}


def evaluate_prequential(model, X: np.ndarray, y_true: np.ndarray, proba: np.ndarray | None = None) -> ConfusionMatrix:
    """Score a buffer with the current model before it learns from it.

    ``proba`` may carry already-computed class probabilities for ``X``.
    """
    y_true = np.asarray(y_true, dtype=np.intp)
    if y_true.shape[0] == 0:
        raise NoEvaluationLabels("no labeled records to evaluate on")
    if proba is None:
        proba = model.predict_proba(X)
    y_pred = np.argmax(proba, axis=1)
    return ConfusionMatrix.from_labels(y_true, y_pred, model.n_classes)
