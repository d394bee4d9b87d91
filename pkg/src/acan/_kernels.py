"""Inner loops for mining and ranking, compiled with numba when available.

Every kernel exists twice: a ``*_numba`` loop version and a ``*_numpy``
vectorised version. Both accumulate floats in the same order (or, for the
precision sums, round exactly), so the two paths agree bit for bit. Set ``ACAN_DISABLE_NUMBA=1`` to force the numpy
path (useful for debugging and for the benchmark in ``benchmarks/``).
"""
from __future__ import annotations

import math
import os

import numpy as np

NUMBA_DISABLED = os.environ.get("ACAN_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED


# --------------------------------------------------------------------------
# batch-hard mining
# --------------------------------------------------------------------------

def _hardest_pairs_py(dist, identities, cameras):
    n = dist.shape[0]
    pos = np.full(n, -1, dtype=np.int64)
    neg = np.full(n, -1, dtype=np.int64)
    for a in range(n):
        best_p = -1.0
        best_n = np.inf
        for j in range(n):
            if j == a or cameras[j] != cameras[a]:
                continue
            d = dist[a, j]
            if identities[j] == identities[a]:
                # strict comparison keeps the lowest index on ties
                if d > best_p:
                    best_p = d
                    pos[a] = j
            elif d < best_n:
                best_n = d
                neg[a] = j
    return pos, neg


def hardest_pairs_numpy(dist, identities, cameras):
    """Hardest positive / negative index per anchor, restricted to its camera.

    Returns ``(pos, neg)``; an entry is -1 when the anchor has no candidate.
    """
    n = dist.shape[0]
    same_cam = cameras[:, None] == cameras[None, :]
    same_id = identities[:, None] == identities[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = same_cam & same_id & not_self
    neg_mask = same_cam & ~same_id
    pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    neg = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    pos[~pos_mask.any(axis=1)] = -1
    neg[~neg_mask.any(axis=1)] = -1
    return pos.astype(np.int64), neg.astype(np.int64)


# --------------------------------------------------------------------------
# triplet gradient scatter
# --------------------------------------------------------------------------

def _scatter_triplet_py(grad, anchors, positives, negatives, unit_ap, unit_an, scale):
    # d/da (|a-p| - |a-n|) = u_ap - u_an ; d/dp = -u_ap ; d/dn = +u_an
    for t in range(anchors.shape[0]):
        grad[anchors[t]] += scale * (unit_ap[t] - unit_an[t])
    for t in range(anchors.shape[0]):
        grad[positives[t]] -= scale * unit_ap[t]
    for t in range(anchors.shape[0]):
        grad[negatives[t]] += scale * unit_an[t]
    return grad


def scatter_triplet_numpy(grad, anchors, positives, negatives, unit_ap, unit_an, scale):
    """Accumulate the batch-hard gradient into ``grad`` in place.

    ``np.add.at`` is unbuffered and walks indices in order, which matches the
    loop version's summation order exactly.
    """
    np.add.at(grad, anchors, scale * (unit_ap - unit_an))
    np.add.at(grad, positives, -(scale * unit_ap))
    np.add.at(grad, negatives, scale * unit_an)
    return grad


# --------------------------------------------------------------------------
# retrieval: first hit and precision sums over sorted relevance flags
# --------------------------------------------------------------------------

def _exact_sum_py(values, count):
    """Correctly rounded sum of values[:count] (Shewchuk partials, as math.fsum)."""
    partials = np.zeros(80)
    n = 0
    for t in range(count):
        x = values[t]
        i = 0
        for j in range(n):
            y = partials[j]
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo != 0.0:
                partials[i] = lo
                i += 1
            x = hi
        partials[i] = x
        n = i + 1
    if n == 0:
        return 0.0
    n -= 1
    hi = partials[n]
    lo = 0.0
    while n > 0:
        x = hi
        n -= 1
        y = partials[n]
        hi = x + y
        lo = y - (hi - x)
        if lo != 0.0:
            break
    if n > 0 and ((lo < 0.0 and partials[n - 1] < 0.0) or (lo > 0.0 and partials[n - 1] > 0.0)):
        y = lo * 2.0
        x = hi + y
        if y == x - hi:
            hi = x
    return hi


def _hit_statistics_py(relevant_sorted, n_valid):
    nq = relevant_sorted.shape[0]
    first_hit = np.full(nq, -1, dtype=np.int64)
    n_rel = np.zeros(nq, dtype=np.int64)
    precision_sum = np.zeros(nq, dtype=np.float64)
    buf = np.empty(relevant_sorted.shape[1], dtype=np.float64)
    for q in range(nq):
        hits = 0
        for k in range(n_valid[q]):
            if relevant_sorted[q, k]:
                buf[hits] = (hits + 1) / (k + 1.0)
                hits += 1
                if first_hit[q] < 0:
                    first_hit[q] = k
        n_rel[q] = hits
        precision_sum[q] = _exact_sum(buf, hits)
    return first_hit, n_rel, precision_sum


def hit_statistics_numpy(relevant_sorted, n_valid):
    """Per-query first relevant position, relevant count and precision sum.

    ``relevant_sorted[q, k]`` flags whether the k-th ranked gallery entry is a
    true match; only the first ``n_valid[q]`` columns are considered. The
    precision sum is correctly rounded so both paths agree bit for bit.
    """
    nq, ng = relevant_sorted.shape
    cols = np.arange(ng)
    rel = relevant_sorted & (cols[None, :] < n_valid[:, None])
    hits = np.cumsum(rel, axis=1)
    precision = hits / (cols + 1.0)[None, :]
    precision_sum = np.array([math.fsum(precision[q, rel[q]]) for q in range(nq)], dtype=np.float64)
    n_rel = hits[:, -1] if ng else np.zeros(nq, dtype=np.int64)
    first_hit = np.where(rel.any(axis=1), rel.argmax(axis=1), -1)
    return first_hit.astype(np.int64), n_rel.astype(np.int64), precision_sum


if HAVE_NUMBA:
    _exact_sum = njit(cache=False)(_exact_sum_py)
    hardest_pairs_numba = njit(cache=False)(_hardest_pairs_py)
    scatter_triplet_numba = njit(cache=False)(_scatter_triplet_py)
    hit_statistics_numba = njit(cache=False)(_hit_statistics_py)
else:  # pragma: no cover
    _exact_sum = _exact_sum_py
    hardest_pairs_numba = _hardest_pairs_py
    scatter_triplet_numba = _scatter_triplet_py
    hit_statistics_numba = _hit_statistics_py


def hardest_pairs(dist, identities, cameras):
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    identities = np.ascontiguousarray(identities, dtype=np.int64)
    cameras = np.ascontiguousarray(cameras, dtype=np.int64)
    if USE_NUMBA:
        return hardest_pairs_numba(dist, identities, cameras)
    return hardest_pairs_numpy(dist, identities, cameras)


def scatter_triplet(grad, anchors, positives, negatives, unit_ap, unit_an, scale):
    args = (
        grad,
        np.ascontiguousarray(anchors, dtype=np.int64),
        np.ascontiguousarray(positives, dtype=np.int64),
        np.ascontiguousarray(negatives, dtype=np.int64),
        np.ascontiguousarray(unit_ap, dtype=np.float64),
        np.ascontiguousarray(unit_an, dtype=np.float64),
        float(scale),
    )
    if USE_NUMBA:
        return scatter_triplet_numba(*args)
    return scatter_triplet_numpy(*args)


def hit_statistics(relevant_sorted, n_valid):
    relevant_sorted = np.ascontiguousarray(relevant_sorted, dtype=np.bool_)
    n_valid = np.ascontiguousarray(n_valid, dtype=np.int64)
    if USE_NUMBA:
        return hit_statistics_numba(relevant_sorted, n_valid)
    return hit_statistics_numpy(relevant_sorted, n_valid)
