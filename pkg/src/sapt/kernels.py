"""Hot numeric kernels with numba-compiled and pure-numpy twins.

The only genuinely hot loop in evaluation is the scaled-dot-product
cross-attention between description queries and image patches, executed once
per image per label space. Both backends compute identical math; the numba
twin fuses the per-query softmax/weighted-sum loops.

Backend selection: the ``SAP_NUMBA`` environment variable. Unset or ``"1"``
uses numba when importable; ``"0"`` (or numba missing) falls back to numpy.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_ENV = "SAP_NUMBA"

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def numba_enabled() -> bool:
    return HAS_NUMBA and os.environ.get(NUMBA_ENV, "1") != "0"


def cross_attention_numpy(queries: np.ndarray, keys: np.ndarray, values: np.ndarray):
    """Reference path: row-softmax(Q Kᵀ / √d) · V, one query at a time.

    Each query row is processed independently (vectorized only over the
    patch axis), so a query's output is bit-identical regardless of its
    position — exact permutation invariance the batched BLAS product does
    not guarantee.
    """
    n, d = queries.shape
    m = keys.shape[0]
    out = np.empty((n, d))
    weights = np.empty((n, m))
    scale = 1.0 / np.sqrt(d)
    for i in range(n):
        logits = keys @ queries[i] * scale
        w = np.exp(logits - logits.max())
        w /= w.sum()
        weights[i] = w
        out[i] = w @ values
    return out, weights


if HAS_NUMBA:

    @njit(cache=True)
    def _attention_kernel(queries, keys, values):  # pragma: no cover - compiled
        n, d = queries.shape
        m = keys.shape[0]
        out = np.empty((n, d))
        weights = np.empty((n, m))
        scale = 1.0 / np.sqrt(d)
        for i in range(n):
            top = -np.inf
            for j in range(m):
                logit = 0.0
                for c in range(d):
                    logit += queries[i, c] * keys[j, c]
                logit *= scale
                weights[i, j] = logit
                if logit > top:
                    top = logit
            total = 0.0
            for j in range(m):
                weights[i, j] = np.exp(weights[i, j] - top)
                total += weights[i, j]
            for j in range(m):
                weights[i, j] /= total
            for c in range(d):
                acc = 0.0
                for j in range(m):
                    acc += weights[i, j] * values[j, c]
                out[i, c] = acc
        return out, weights

    def cross_attention_numba(queries: np.ndarray, keys: np.ndarray, values: np.ndarray):
        return _attention_kernel(
            np.ascontiguousarray(queries, dtype=np.float64),
            np.ascontiguousarray(keys, dtype=np.float64),
            np.ascontiguousarray(values, dtype=np.float64),
        )

else:
    cross_attention_numba = None


def cross_attention_backend():
    """The active implementation under the ``SAP_NUMBA`` flag."""
    if numba_enabled():
        return cross_attention_numba
    return cross_attention_numpy
