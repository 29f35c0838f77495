"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best wall time of each backend and the
speedup. Both backends are imported directly, so the result does not
depend on FLOWAL_PURE_PYTHON. Similarity kernels are numpy in both
backends and are not timed here.
"""

import argparse
import timeit

import numpy as np

from flowal import _pykernels, model

try:
    from flowal import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    X = rng.normal(size=(2000, 10))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(np.intp)
    idx = np.arange(X.shape[0], dtype=np.intp)
    feats = np.arange(X.shape[1], dtype=np.intp)

    # a full-depth tree to route rows through
    tree = model.build_tree(X, y, idx, 2, rng, 12, 2, 0.7)
    Xbig = rng.normal(size=(10_000, 10))
    Xfit, yfit = X[:1000], y[:1000]

    def fit(k):
        # route the model's kernel calls through backend k
        saved = model.kernels
        model.kernels = k
        try:
            model.TreeEnsemble.fit(Xfit, yfit, 2, model.EnsembleConfig())
        finally:
            model.kernels = saved

    return {
        "best_split 2000x10": lambda k: k.best_split(X, y, idx, feats, 2),
        "apply_tree 10000 rows": lambda k: k.apply_tree(Xbig, tree.feature, tree.threshold, tree.left, tree.right),
        "ensemble fit 1000x10, 10 trees": fit,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':<30} " + " ".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for name, fn in cases(rng).items():
        times = []
        for _, mod in backends:
            fn(mod)  # warm up
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        speed = f"{times[0] / times[1]:>10.2f}x" if len(times) == 2 else "         -"
        print(f"{name:<30} " + " ".join(f"{t * 1e3:>10.2f}ms" for t in times) + f"  {speed}")
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
