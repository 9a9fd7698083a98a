"""Hot inner loops, JIT-compiled with numba when available.

Every kernel ships in two flavors: a ``*_numpy`` reference path and a
numba ``@njit`` path.  The active flavor is picked once at import time;
set ``LTQA_NO_NUMBA=1`` to force the numpy path (the benchmark in
``benchmarks/bench_kernels.py`` runs both and compares).
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("LTQA_NO_NUMBA", "").strip() not in ("", "0")

try:
    if _FORCE_NUMPY:
        raise ImportError("numba disabled via LTQA_NO_NUMBA")
    from numba import njit

    USING_NUMBA = True
except ImportError:
    USING_NUMBA = False

    def njit(*args, **kwargs):  # no-op decorator fallback
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


# ---------------------------------------------------------------------------
# BM25 scoring over an inverted index (CSR postings: term -> (doc, tf)).
# Score for one query = sum over query tokens (duplicates kept) of
#   idf[t] * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
# ---------------------------------------------------------------------------


def bm25_scores_numpy_impl(post_ptr, post_docs, post_tf, idf, doc_len, avgdl, q_terms, k1, b):
    scores = np.zeros(doc_len.shape[0], dtype=np.float64)
    norm = k1 * (1.0 - b + b * doc_len / avgdl)
    for t in q_terms:
        lo, hi = post_ptr[t], post_ptr[t + 1]
        docs = post_docs[lo:hi]
        tf = post_tf[lo:hi]
        scores[docs] += idf[t] * tf * (k1 + 1.0) / (tf + norm[docs])
    return scores


@njit(cache=True)
def _bm25_scores_numba(post_ptr, post_docs, post_tf, idf, doc_len, avgdl, q_terms, k1, b):
    n_docs = doc_len.shape[0]
    scores = np.zeros(n_docs, dtype=np.float64)
    for qi in range(q_terms.shape[0]):
        t = q_terms[qi]
        w = idf[t]
        for p in range(post_ptr[t], post_ptr[t + 1]):
            d = post_docs[p]
            tf = post_tf[p]
            denom = tf + k1 * (1.0 - b + b * doc_len[d] / avgdl)
            scores[d] += w * tf * (k1 + 1.0) / denom
    return scores


# ---------------------------------------------------------------------------
# Longest common subsequence length over token-id arrays (rouge-l core).
# ---------------------------------------------------------------------------


def lcs_length_numpy(a, b):
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return 0
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = max(prev[j + 1], cur[j])
        prev, cur = cur, prev
    return int(prev[m])


@njit(cache=True)
def _lcs_length_numba(a, b):
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return 0
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                c = cur[j]
                p = prev[j + 1]
                cur[j + 1] = c if c > p else p
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


# ---------------------------------------------------------------------------
# Row scatter-add: out[idx[i], :] += src[i, :].  Embedding-table backward;
# np.add.at is correct but slow, which is why this is a kernel.
# ---------------------------------------------------------------------------


def scatter_add_rows_numpy(out, idx, src):
    np.add.at(out, idx, src)
    return out


@njit(cache=True)
def _scatter_add_rows_numba(out, idx, src):
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(src.shape[1]):
            out[r, j] += src[i, j]
    return out


if USING_NUMBA:
    bm25_scores = _bm25_scores_numba
    lcs_length = _lcs_length_numba
    scatter_add_rows = _scatter_add_rows_numba
else:
    bm25_scores = bm25_scores_numpy_impl
    lcs_length = lcs_length_numpy
    scatter_add_rows = scatter_add_rows_numpy

# Kept importable regardless of the active path so the benchmark and the
# equivalence tests can compare flavors directly.
bm25_scores_reference = bm25_scores_numpy_impl
lcs_length_reference = lcs_length_numpy
scatter_add_rows_reference = scatter_add_rows_numpy
