"""Randomized kd-tree forest with best-bin-first search (numba kernels).

Each tree splits on a dimension drawn at random among the ``TOP_DIMS``
highest-variance dimensions of a point sample, at the sample mean. Queries
descend every tree, then keep popping the closest unexplored branch from a
heap shared by all trees until ``checks`` points have been compared.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TOP_DIMS = 5
SAMPLE_SIZE = 100
LEAF_SIZE = 8
CHUNK = 16


@njit(cache=True)
def _node_stats(data, perm, start, end, n_sample):
    n = end - start
    d = data.shape[1]
    mean = np.zeros(d)
    var = np.zeros(d)
    step = max(1, n // n_sample)
    cnt = 0
    for s in range(start, end, step):
        row = data[perm[s]]
        cnt += 1
        for k in range(d):
            mean[k] += row[k]
    for k in range(d):
        mean[k] /= cnt
    for s in range(start, end, step):
        row = data[perm[s]]
        for k in range(d):
            diff = row[k] - mean[k]
            var[k] += diff * diff
    return mean, var


@njit(cache=True)
def _top_dims(var, k, out):
    """Indices of the k largest variances, largest first, ties to the lower index."""
    n = 0
    for dim in range(var.shape[0]):
        v = var[dim]
        if n < k:
            j = n
            n += 1
        elif v > var[out[n - 1]]:
            j = n - 1
        else:
            continue
        while j > 0 and var[out[j - 1]] < v:
            out[j] = out[j - 1]
            j -= 1
        out[j] = dim
    return n


@njit(cache=True)
def _partition(data, perm, start, end, dim, val):
    lo = start
    hi = end - 1
    while lo <= hi:
        if data[perm[lo], dim] < val:
            lo += 1
        else:
            tmp = perm[lo]
            perm[lo] = perm[hi]
            perm[hi] = tmp
            hi -= 1
    return lo


@njit(cache=True)
def _build_tree(data, seed, leaf_size, top_dims, n_sample):
    np.random.seed(seed)
    n = data.shape[0]
    perm = np.arange(n).astype(np.int64)
    cap = 2 * (n // max(1, leaf_size // 2) + 2)
    split_dim = np.full(cap, -1, np.int64)
    split_val = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    lstart = np.zeros(cap, np.int64)
    lend = np.zeros(cap, np.int64)
    stack_node = np.empty(cap, np.int64)
    stack_s = np.empty(cap, np.int64)
    stack_e = np.empty(cap, np.int64)
    order = np.empty(top_dims, np.int64)
    n_nodes = 1
    sp = 0
    stack_node[0] = 0
    stack_s[0] = 0
    stack_e[0] = n
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        s = stack_s[sp]
        e = stack_e[sp]
        lstart[node] = s
        lend[node] = e
        if e - s <= leaf_size:
            continue
        mean, var = _node_stats(data, perm, s, e, n_sample)
        k = _top_dims(var, top_dims, order)
        # only dims with spread are eligible
        n_ok = 0
        for t in range(k):
            if var[order[t]] > 0.0:
                n_ok += 1
        mid = s
        if n_ok > 0:
            dim = order[np.random.randint(0, n_ok)]
            mid = _partition(data, perm, s, e, dim, mean[dim])
        if mid == s or mid == e:
            # sample missed the spread; fall back to the full node statistics
            mean, var = _node_stats(data, perm, s, e, e - s)
            dim = np.argmax(var)
            if var[dim] <= 0.0:
                continue  # identical points: oversized leaf
            mid = _partition(data, perm, s, e, dim, mean[dim])
            if mid == s or mid == e:
                continue
        split_dim[node] = dim
        split_val[node] = mean[dim]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack_node[sp] = lc
        stack_s[sp] = s
        stack_e[sp] = mid
        sp += 1
        stack_node[sp] = rc
        stack_s[sp] = mid
        stack_e[sp] = e
        sp += 1
    return (perm, split_dim[:n_nodes].copy(), split_val[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            lstart[:n_nodes].copy(), lend[:n_nodes].copy())


@njit(cache=True)
def _heap_push(hd, hn, ht, size, d, node, tree):
    cap = hd.shape[0]
    if size >= cap:
        return size
    i = size
    hd[i] = d
    hn[i] = node
    ht[i] = tree
    while i > 0:
        p = (i - 1) >> 1
        if hd[p] <= hd[i]:
            break
        hd[p], hd[i] = hd[i], hd[p]
        hn[p], hn[i] = hn[i], hn[p]
        ht[p], ht[i] = ht[i], ht[p]
        i = p
    return size + 1


@njit(cache=True)
def _heap_pop(hd, hn, ht, size):
    d = hd[0]
    node = hn[0]
    tree = ht[0]
    size -= 1
    hd[0] = hd[size]
    hn[0] = hn[size]
    ht[0] = ht[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < size and hd[l] < hd[m]:
            m = l
        if r < size and hd[r] < hd[m]:
            m = r
        if m == i:
            break
        hd[m], hd[i] = hd[i], hd[m]
        hn[m], hn[i] = hn[i], hn[m]
        ht[m], ht[i] = ht[i], ht[m]
        i = m
    return d, node, tree, size


@njit(cache=True)
def _insert(best_d, best_i, d, idx):
    k = best_d.shape[0]
    if d >= best_d[k - 1]:
        return
    j = k - 1
    while j > 0 and best_d[j - 1] > d:
        best_d[j] = best_d[j - 1]
        best_i[j] = best_i[j - 1]
        j -= 1
    best_d[j] = d
    best_i[j] = idx


@njit(cache=True, fastmath=True)
def _sqdist(data, a, queries, qi, bound):
    """Squared distance with early abandonment checked every ``CHUNK`` dims.

    Chunks are summed in a fixed (vectorizable) order that does not depend on
    the rows involved, so equal inputs give equal outputs and d(a, b) = d(b, a).
    Returns a value >= bound when abandoned.
    """
    d = data.shape[1]
    acc = 0.0
    c0 = 0
    while c0 < d:
        c1 = min(c0 + CHUNK, d)
        part = 0.0
        for c in range(c0, c1):
            diff = np.float64(data[a, c]) - np.float64(queries[qi, c])
            part += diff * diff
        acc += part
        if acc >= bound:
            return acc
        c0 = c1
    return acc


@njit(cache=True, fastmath=True)
def _sqdist_full(data, a, queries, qi):
    # no abandonment: one vectorized pass is cheaper than the bound checks
    # when every row is scanned
    acc = 0.0
    for c in range(data.shape[1]):
        diff = np.float64(data[a, c]) - np.float64(queries[qi, c])
        acc += diff * diff
    return acc


@njit(cache=True)
def _check_leaf(data, queries, qi, qself, perms, tree, s, e, stamp, tag, best_d, best_i, checks):
    # scalar 2-D indexing throughout: array views in this loop cost more
    # than the distance arithmetic
    k = best_d.shape[0]
    for t in range(s, e):
        idx = perms[tree, t]
        if idx == qself or stamp[idx] == tag:
            continue
        stamp[idx] = tag
        checks += 1
        bound = best_d[k - 1]
        acc = _sqdist(data, idx, queries, qi, bound)
        if acc < bound:
            _insert(best_d, best_i, acc, idx)
    return checks


@njit(cache=True)
def _pack(sdim, sval, left, lstart, lend, width):
    """Node records [split dim or -1, split value, first child or leaf start,
    leaf end]; children of a node are adjacent, so one record per visit."""
    out = np.zeros((width, 4))
    for node in range(sdim.shape[0]):
        if left[node] >= 0:
            out[node, 0] = sdim[node]
            out[node, 1] = sval[node]
            out[node, 2] = left[node]
        else:
            out[node, 0] = -1.0
            out[node, 2] = lstart[node]
            out[node, 3] = lend[node]
    return out


@njit(cache=True)
def _descend(data, queries, qi, qself, tree, node, mind, perms, nodes, hd, hn, ht, hsize, stamp,
             tag, best_d, best_i, checks):
    k = best_d.shape[0]
    while nodes[tree, node, 0] >= 0:
        dim = np.int64(nodes[tree, node, 0])
        diff = np.float64(queries[qi, dim]) - nodes[tree, node, 1]
        lc = np.int64(nodes[tree, node, 2])
        if diff < 0:
            near = lc
            far = lc + 1
        else:
            near = lc + 1
            far = lc
        fd = mind + diff * diff
        if fd < best_d[k - 1]:
            hsize = _heap_push(hd, hn, ht, hsize, fd, far, tree)
        node = near
    checks = _check_leaf(data, queries, qi, qself, perms, tree, np.int64(nodes[tree, node, 2]),
                         np.int64(nodes[tree, node, 3]), stamp, tag, best_d, best_i, checks)
    return hsize, checks


@njit(cache=True)
def _search_all(data, queries, self_ids, k, checks_budget, perms, nodes, visit):
    nq = queries.shape[0]
    n_trees = perms.shape[0]
    out_i = np.full((nq, k), -1, np.int64)
    out_d = np.full((nq, k), np.inf)
    stamp = np.zeros(data.shape[0], np.int64)
    cap = 64 * (checks_budget + 64) * n_trees
    hd = np.empty(cap)
    hn = np.empty(cap, np.int64)
    ht = np.empty(cap, np.int64)
    best_d = np.empty(k)
    best_i = np.empty(k, np.int64)
    for vi in range(nq):
        qi = visit[vi]
        qself = self_ids[qi]
        tag = qi + 1
        best_d[:] = np.inf
        best_i[:] = -1
        hsize = 0
        checks = 0
        for t in range(n_trees):
            hsize, checks = _descend(data, queries, qi, qself, t, 0, 0.0, perms, nodes, hd, hn,
                                     ht, hsize, stamp, tag, best_d, best_i, checks)
        while hsize > 0 and checks < checks_budget:
            mind, node, tree, hsize = _heap_pop(hd, hn, ht, hsize)
            if mind >= best_d[k - 1]:
                break
            hsize, checks = _descend(data, queries, qi, qself, tree, node, mind, perms, nodes, hd,
                                     hn, ht, hsize, stamp, tag, best_d, best_i, checks)
        for j in range(k):
            out_i[qi, j] = best_i[j]
            out_d[qi, j] = np.sqrt(best_d[j])
    return out_i, out_d


@njit(cache=True)
def brute_knn(data, queries, self_ids, k):
    """Exact k-NN by full scan, ties broken by lower index."""
    nq = queries.shape[0]
    n, d = data.shape
    out_i = np.full((nq, k), -1, np.int64)
    out_d = np.full((nq, k), np.inf)
    best_d = np.empty(k)
    best_i = np.empty(k, np.int64)
    for qi in range(nq):
        best_d[:] = np.inf
        best_i[:] = -1
        for idx in range(n):
            if idx == self_ids[qi]:
                continue
            acc = _sqdist_full(data, idx, queries, qi)
            if acc < best_d[k - 1]:
                _insert(best_d, best_i, acc, idx)
        for j in range(k):
            out_i[qi, j] = best_i[j]
            out_d[qi, j] = np.sqrt(best_d[j])
    return out_i, out_d


class KDForest:
    """Immutable forest over ``data`` (n, d); safe to share between readers."""

    def __init__(self, data: np.ndarray, trees: int = 4, seed: int = 0,
                 leaf_size: int = LEAF_SIZE):
        self.data = np.ascontiguousarray(data)
        self.trees = int(trees)
        parts = [_build_tree(self.data, seed * 7919 + t, leaf_size, TOP_DIMS, SAMPLE_SIZE)
                 for t in range(self.trees)]
        width = max(len(p[1]) for p in parts)
        self.perms = np.stack([p[0] for p in parts])
        self.nodes = np.stack([_pack(p[1], p[2], p[3], p[5], p[6], width) for p in parts])

    def query(self, queries: np.ndarray, k: int, checks: int, self_ids=None):
        queries = np.ascontiguousarray(queries, dtype=self.data.dtype)
        if self_ids is None:
            self_ids = np.full(len(queries), -1, np.int64)
        self_ids = np.asarray(self_ids, np.int64)
        visit = np.arange(len(queries), dtype=np.int64)
        if len(queries) == len(self.data) and np.array_equal(self_ids, visit):
            # self-join: visiting queries in leaf order of the first tree keeps
            # consecutive searches in the same region of the data (cache
            # locality); every query is independent, so results are unchanged
            visit = self.perms[0].copy()
        return _search_all(self.data, queries, self_ids, int(k), int(checks), self.perms,
                           self.nodes, visit)
