"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating point operation order, so both backends produce
identical trees and identical predictions.
"""

import numpy as np

BACKEND = "python"

# rows per block when materialising pairwise similarity blocks
_BLOCK = 512


def best_split(X, y, idx, features, n_classes):
    """Find the Gini-optimal threshold split of the rows ``idx``.

    Returns ``(feature, threshold, score)``; ``feature`` is -1 when no
    candidate feature has two distinct values. ``score`` is the quantity
    ``sum(c_left**2)/n_left + sum(c_right**2)/n_right`` which is maximised
    by the impurity-minimising split.
    """
    n = idx.shape[0]
    best_f = -1
    best_thr = 0.0
    best_score = -1.0
    if n < 2:
        return best_f, best_thr, best_score
    ys = y[idx]
    for f in features:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        onehot = np.zeros((n, n_classes), dtype=np.int64)
        onehot[np.arange(n), ys[order]] = 1
        left = np.cumsum(onehot, axis=0)[:-1]
        total = left[-1] + onehot[-1]
        right = total - left
        n_left = np.arange(1, n, dtype=np.int64)
        n_right = n - n_left
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        sq_left = (left * left).sum(axis=1)
        sq_right = (right * right).sum(axis=1)
        scores = sq_left / n_left + sq_right / n_right
        scores[~valid] = -1.0
        pos = int(np.argmax(scores))
        if scores[pos] > best_score:
            best_score = float(scores[pos])
            best_f = int(f)
            lo = xs[pos]
            hi = xs[pos + 1]
            thr = (lo + hi) / 2.0
            if thr >= hi:
                thr = lo
            best_thr = float(thr)
    return best_f, best_thr, best_score


def apply_tree(X, feature, threshold, left, right):
    """Return the leaf index reached by every row of ``X``."""
    n = X.shape[0]
    node = np.zeros(n, dtype=np.intp)
    active = np.arange(n)
    while active.size:
        cur = node[active]
        f = feature[cur]
        leaf = f < 0
        active = active[~leaf]
        cur = cur[~leaf]
        f = f[~leaf]
        if not active.size:
            break
        go_left = X[active, f] <= threshold[cur]
        node[active] = np.where(go_left, left[cur], right[cur])
    return node


def _sim_block(A, B, metric, sigma):
    if metric == 0:
        na = np.sqrt((A * A).sum(axis=1))
        nb = np.sqrt((B * B).sum(axis=1))
        dots = A @ B.T
        denom = np.outer(na, nb)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(denom > 0.0, dots / np.where(denom > 0.0, denom, 1.0), 0.0)
        return np.clip(s, 0.0, 1.0)
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * sigma * sigma))


def mean_similarity(X, metric, sigma):
    """Mean similarity of every row of ``X`` to all rows of ``X``.

    ``metric`` 0 is cosine clipped to [0, 1], 1 is a Gaussian RBF with
    bandwidth ``sigma``.
    """
    n = X.shape[0]
    out = np.empty(n)
    for start in range(0, n, _BLOCK):
        block = _sim_block(X[start:start + _BLOCK], X, metric, sigma)
        out[start:start + _BLOCK] = block.sum(axis=1) / n
    return out


def max_similarity(X, R, metric, sigma):
    """Maximum similarity of every row of ``X`` to any row of ``R`` (0 if empty)."""
    n = X.shape[0]
    out = np.zeros(n)
    if R.shape[0] == 0:
        return out
    for start in range(0, n, _BLOCK):
        block = _sim_block(X[start:start + _BLOCK], R, metric, sigma)
        out[start:start + _BLOCK] = block.max(axis=1)
    return out
