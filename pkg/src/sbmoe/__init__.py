"""Mixture-of-experts retrieval head over frozen text embeddings.

The package trains a single adapter-expert block with noisy top-1 gating on
top of precomputed bi-encoder embeddings, runs exhaustive dense retrieval,
scores runs with NDCG/Recall, and compares systems with paired t-tests.
"""

import os

# SBMOE_THREADS caps BLAS parallelism.  Must be applied before numpy is
# first imported, which is why it lives in the package root.
_threads = os.environ.get("SBMOE_THREADS")
if _threads and _threads.isdigit():
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

__version__ = "0.1.0"
