"""Backend selection for the hot kernels.

The compiled tree kernels are used when the extension was built;
otherwise the numpy fallback is imported. Set ``FLOWAL_PURE_PYTHON=1`` to
force the fallback. Similarity kernels always come from numpy, which hands
the pairwise products to BLAS.
"""

import os

from flowal._pykernels import max_similarity, mean_similarity  # noqa: F401

if os.environ.get("FLOWAL_PURE_PYTHON", "") not in ("", "0"):
    from flowal._pykernels import BACKEND, apply_tree, best_split
else:
    try:
        from flowal._ckernels import BACKEND, apply_tree, best_split
    except ImportError:
        from flowal._pykernels import BACKEND, apply_tree, best_split

SIMILARITY_CODES = {"cosine": 0, "euclidean-rbf": 1}

__all__ = [
    "BACKEND",
    "SIMILARITY_CODES",
    "apply_tree",
    "best_split",
    "max_similarity",
    "mean_similarity",
]
