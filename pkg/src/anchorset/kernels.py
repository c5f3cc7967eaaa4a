"""Hot numeric kernels with a numba path and a pure-numpy path.

Each public kernel is bound at import time to the numba-compiled loop when
numba is available (see :mod:`anchorset._backend`) and to the vectorised
numpy version otherwise. Both versions are kept importable under
``<name>_numpy`` / ``<name>_loop`` so tests and the benchmark can compare them.

Index-valued outputs (mining, ranking) break ties by the lowest index in both
paths.
"""
import numpy as np

from ._backend import BACKEND, HAS_NUMBA, njit

__all__ = [
    "BACKEND",
    "pairwise_sqdist",
    "batch_hard_mine",
    "nearest_other_anchor",
    "class_sums",
    "retrieval_scores",
]

_CHUNK = 256


# ---------------------------------------------------------------------------
# pairwise squared distances
# ---------------------------------------------------------------------------

def pairwise_sqdist_numpy(x, y):
    out = np.empty((x.shape[0], y.shape[0]))
    for start in range(0, x.shape[0], _CHUNK):
        diff = x[start:start + _CHUNK, None, :] - y[None, :, :]
        out[start:start + _CHUNK] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def pairwise_sqdist_loop(x, y):
    n, m, d = x.shape[0], y.shape[0], x.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                t = x[i, k] - y[j, k]
                acc += t * t
            out[i, j] = acc
    return out


# ---------------------------------------------------------------------------
# batch-hard mining: farthest positive / closest negative per row
# ---------------------------------------------------------------------------

def batch_hard_mine_numpy(dist, labels):
    n = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    pos_d = np.where(pos_mask, dist, -np.inf)
    neg_d = np.where(neg_mask, dist, np.inf)
    # argmax/argmin return the first occurrence, i.e. the lowest index on ties
    pos = np.argmax(pos_d, axis=1)
    neg = np.argmin(neg_d, axis=1)
    pos = np.where(pos_mask.any(axis=1), pos, -1)
    neg = np.where(neg_mask.any(axis=1), neg, -1)
    return pos.astype(np.int64), neg.astype(np.int64)


def batch_hard_mine_loop(dist, labels):
    n = dist.shape[0]
    pos = np.full(n, -1, dtype=np.int64)
    neg = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        best_p = -1.0
        best_n = np.inf
        for j in range(n):
            if j == i:
                continue
            d = dist[i, j]
            if labels[j] == labels[i]:
                if pos[i] < 0 or d > best_p:
                    best_p = d
                    pos[i] = j
            else:
                if neg[i] < 0 or d < best_n:
                    best_n = d
                    neg[i] = j
    return pos, neg


# ---------------------------------------------------------------------------
# nearest anchor of another class
# ---------------------------------------------------------------------------

def nearest_other_anchor_numpy(dist, labels, present):
    masked = np.where(present[None, :], dist, np.inf)
    masked[np.arange(dist.shape[0]), labels] = np.inf
    k = np.argmin(masked, axis=1)
    ok = np.isfinite(masked[np.arange(dist.shape[0]), k])
    return np.where(ok, k, -1).astype(np.int64)


def nearest_other_anchor_loop(dist, labels, present):
    n, c = dist.shape
    out = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        best = np.inf
        for k in range(c):
            if k == labels[i] or not present[k]:
                continue
            if out[i] < 0 or dist[i, k] < best:
                best = dist[i, k]
                out[i] = k
    return out


# ---------------------------------------------------------------------------
# compensated per-class weighted sums (Neumaier), accumulated in row order
# ---------------------------------------------------------------------------

def class_sums_numpy(features, labels, weights, n_classes):
    d = features.shape[1]
    s = np.zeros((n_classes, d))
    comp = np.zeros((n_classes, d))
    ws = np.zeros(n_classes)
    wcomp = np.zeros(n_classes)
    for i in range(features.shape[0]):
        j = labels[i]
        x = weights[i] * features[i]
        t = s[j] + x
        comp[j] += np.where(np.abs(s[j]) >= np.abs(x), (s[j] - t) + x, (x - t) + s[j])
        s[j] = t
        w = weights[i]
        tw = ws[j] + w
        if abs(ws[j]) >= abs(w):
            wcomp[j] += (ws[j] - tw) + w
        else:
            wcomp[j] += (w - tw) + ws[j]
        ws[j] = tw
    return s + comp, ws + wcomp


def class_sums_loop(features, labels, weights, n_classes):
    n, d = features.shape
    s = np.zeros((n_classes, d))
    comp = np.zeros((n_classes, d))
    ws = np.zeros(n_classes)
    wcomp = np.zeros(n_classes)
    for i in range(n):
        j = labels[i]
        w = weights[i]
        for k in range(d):
            x = w * features[i, k]
            t = s[j, k] + x
            if abs(s[j, k]) >= abs(x):
                comp[j, k] += (s[j, k] - t) + x
            else:
                comp[j, k] += (x - t) + s[j, k]
            s[j, k] = t
        tw = ws[j] + w
        if abs(ws[j]) >= abs(w):
            wcomp[j] += (ws[j] - tw) + w
        else:
            wcomp[j] += (w - tw) + ws[j]
        ws[j] = tw
    return s + comp, ws + wcomp


# ---------------------------------------------------------------------------
# per-query first-hit rank and average precision
# ---------------------------------------------------------------------------

def retrieval_scores_numpy(dist, q_labels, g_labels, q_groups, g_groups, exclude_same_group):
    """Return (first_rank, ap, n_matches) per query; first_rank is 1-based, 0 if no match."""
    order = np.argsort(dist, axis=1, kind="stable")
    glab = g_labels[order]
    match = glab == q_labels[:, None]
    if exclude_same_group:
        junk = match & (g_groups[order] == q_groups[:, None])
        keep = ~junk
    else:
        keep = np.ones_like(match)
    match = match & keep
    rank = np.cumsum(keep, axis=1)
    hits = np.cumsum(match, axis=1)
    n_match = match.sum(axis=1)
    prec = np.where(match, hits / np.maximum(rank, 1), 0.0)
    ap = np.where(n_match > 0, prec.sum(axis=1) / np.maximum(n_match, 1), 0.0)
    first_col = np.argmax(match, axis=1)
    first = np.where(n_match > 0, rank[np.arange(dist.shape[0]), first_col], 0)
    return first.astype(np.int64), ap, n_match.astype(np.int64)


def retrieval_scores_loop(dist, q_labels, g_labels, q_groups, g_groups, exclude_same_group):
    nq, ng = dist.shape
    first = np.zeros(nq, dtype=np.int64)
    ap = np.zeros(nq)
    n_match = np.zeros(nq, dtype=np.int64)
    for q in range(nq):
        order = np.argsort(dist[q], kind="mergesort")
        rank = 0
        hits = 0
        acc = 0.0
        for t in range(ng):
            g = order[t]
            same = g_labels[g] == q_labels[q]
            if exclude_same_group and same and g_groups[g] == q_groups[q]:
                continue
            rank += 1
            if same:
                hits += 1
                if hits == 1:
                    first[q] = rank
                acc += hits / rank
        n_match[q] = hits
        if hits > 0:
            ap[q] = acc / hits
    return first, ap, n_match


_pairwise_sqdist_jit = njit(pairwise_sqdist_loop)
_batch_hard_mine_jit = njit(batch_hard_mine_loop)
_nearest_other_anchor_jit = njit(nearest_other_anchor_loop)
_class_sums_jit = njit(class_sums_loop)
_retrieval_scores_jit = njit(retrieval_scores_loop)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def pairwise_sqdist(x, y):
    """Squared euclidean distance matrix between rows of ``x`` and ``y``."""
    x, y = _f64(x), _f64(y)
    if HAS_NUMBA:
        return _pairwise_sqdist_jit(x, y)
    return pairwise_sqdist_numpy(x, y)


def batch_hard_mine(dist, labels):
    """Index of the hardest positive and hardest negative for each row (-1 if none)."""
    dist, labels = _f64(dist), _i64(labels)
    if HAS_NUMBA:
        return _batch_hard_mine_jit(dist, labels)
    return batch_hard_mine_numpy(dist, labels)


def nearest_other_anchor(dist, labels, present):
    """Closest present anchor whose class differs from the row's label (-1 if none)."""
    dist, labels = _f64(dist), _i64(labels)
    present = np.ascontiguousarray(present, dtype=np.bool_)
    if HAS_NUMBA:
        return _nearest_other_anchor_jit(dist, labels, present)
    return nearest_other_anchor_numpy(dist, labels, present)


def class_sums(features, labels, weights, n_classes):
    """Compensated per-class sums of ``weights[i] * features[i]`` and of the weights."""
    features, labels, weights = _f64(features), _i64(labels), _f64(weights)
    if HAS_NUMBA:
        return _class_sums_jit(features, labels, weights, int(n_classes))
    return class_sums_numpy(features, labels, weights, int(n_classes))


def retrieval_scores(dist, q_labels, g_labels, q_groups, g_groups, exclude_same_group=False):
    """Per-query first correct rank (1-based, 0 if none), AP and match count."""
    args = (_f64(dist), _i64(q_labels), _i64(g_labels), _i64(q_groups), _i64(g_groups),
            bool(exclude_same_group))
    if HAS_NUMBA:
        return _retrieval_scores_jit(*args)
    return retrieval_scores_numpy(*args)
