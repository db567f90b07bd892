"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

Every kernel exists twice: an ``@njit`` version and a numpy/python fallback
with identical semantics. The exported binding is chosen at import time:
setting ``FRESHANN_PURE_NUMPY=1`` (or numba being unavailable) selects the
fallback. ``benchmarks/kernel_bench.py`` times both paths side by side.

Distances are squared L2 throughout, accumulated in float64; callers take
square roots at API boundaries only. Ties break toward the lower row index.
"""

import os

import numpy as np

PURE_NUMPY = os.environ.get("FRESHANN_PURE_NUMPY", "") not in ("", "0")

if not PURE_NUMPY:
    try:
        from numba import njit
    except ImportError:
        PURE_NUMPY = True

NUMBA_ENABLED = not PURE_NUMPY


# ---------------------------------------------------------------------------
# pure-numpy implementations

def _np_l2_sq(a, b):
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.dot(d, d))


def _np_l2_sq_batch(X, q):
    d = X.astype(np.float64) - q.astype(np.float64)
    return np.einsum("ij,ij->i", d, d)


def _np_greedy_search(vecs, adj, deg, q, start, L,
                      cand_rows, cand_d, vis_rows, vis_d,
                      in_stamp, vis_stamp, gen):
    """Best-first traversal keeping the L closest candidates.

    Candidate arrays are caller-allocated (length L); visited arrays must be
    long enough for one entry per expansion (bounded by the row count).
    Stamp arrays + gen implement set membership without per-call clearing.
    Returns (n_candidates, n_visited, comparisons).
    """
    size = 0
    nvis = 0
    comparisons = 0

    d0 = _np_l2_sq(vecs[start], q)
    comparisons += 1
    cand_rows[0] = start
    cand_d[0] = d0
    size = 1
    in_stamp[start] = gen

    while True:
        best = -1
        for i in range(size):
            if vis_stamp[cand_rows[i]] != gen:
                best = i
                break
        if best < 0:
            break
        p = int(cand_rows[best])
        vis_stamp[p] = gen
        vis_rows[nvis] = p
        vis_d[nvis] = cand_d[best]
        nvis += 1

        nbrs = adj[p, : deg[p]]
        for nbr in nbrs:
            nbr = int(nbr)
            if in_stamp[nbr] == gen:
                continue
            d = _np_l2_sq(vecs[nbr], q)
            comparisons += 1
            if size == L:
                worst_d = cand_d[size - 1]
                worst_r = cand_rows[size - 1]
                if d > worst_d or (d == worst_d and nbr > worst_r):
                    continue
            pos = size
            for i in range(size):
                if d < cand_d[i] or (d == cand_d[i] and nbr < cand_rows[i]):
                    pos = i
                    break
            if size == L:
                in_stamp[cand_rows[size - 1]] = 0
            else:
                size += 1
            cand_rows[pos + 1 : size] = cand_rows[pos : size - 1]
            cand_d[pos + 1 : size] = cand_d[pos : size - 1]
            cand_rows[pos] = nbr
            cand_d[pos] = d
            in_stamp[nbr] = gen

    return size, nvis, comparisons


def _np_robust_prune(cand_vecs, dists, alpha_sq, R, sel_out):
    """Relaxed neighbor selection: repeatedly pick the nearest remaining
    candidate, then discard every remaining c dominated by the pick
    (alpha^2 * d_sq(pick, c) <= d_sq(p, c)). Stops at R picks.

    Candidates are expected in ascending-id order so equal distances resolve
    to the lower id. Returns the number selected; sel_out gets candidate
    indices in selection order.
    """
    m = dists.shape[0]
    alive = np.ones(m, dtype=np.bool_)
    nsel = 0
    while True:
        live_idx = np.flatnonzero(alive)
        if live_idx.size == 0:
            break
        best = live_idx[np.argmin(dists[live_idx])]
        sel_out[nsel] = best
        nsel += 1
        alive[best] = False
        if nsel == R:
            break
        rest = np.flatnonzero(alive)
        dd = _np_l2_sq_batch(cand_vecs[rest], cand_vecs[best])
        alive[rest[alpha_sq * dd <= dists[rest]]] = False
    return nsel


def _np_adc_batch(lut, codes, out):
    m = lut.shape[0]
    acc = np.zeros(codes.shape[0], dtype=np.float64)
    for j in range(m):
        acc += lut[j, codes[:, j]]
    out[: codes.shape[0]] = acc
    return codes.shape[0]


def _np_chunk_sq_dists(table, q_chunk, out):
    d = table.astype(np.float64) - q_chunk.astype(np.float64)
    out[:] = np.einsum("ij,ij->i", d, d)


# ---------------------------------------------------------------------------
# numba implementations

if NUMBA_ENABLED:

    @njit(cache=True, nogil=True)
    def _nb_l2_sq(a, b):
        s = 0.0
        for i in range(a.shape[0]):
            d = np.float64(a[i]) - np.float64(b[i])
            s += d * d
        return s

    @njit(cache=True, nogil=True)
    def _nb_l2_sq_batch(X, q):
        n = X.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            s = 0.0
            for j in range(X.shape[1]):
                d = np.float64(X[i, j]) - np.float64(q[j])
                s += d * d
            out[i] = s
        return out

    @njit(cache=True, nogil=True)
    def _nb_greedy_search(vecs, adj, deg, q, start, L,
                          cand_rows, cand_d, vis_rows, vis_d,
                          in_stamp, vis_stamp, gen):
        size = 0
        nvis = 0
        comparisons = 0

        d0 = _nb_l2_sq(vecs[start], q)
        comparisons += 1
        cand_rows[0] = start
        cand_d[0] = d0
        size = 1
        in_stamp[start] = gen

        while True:
            best = -1
            for i in range(size):
                if vis_stamp[cand_rows[i]] != gen:
                    best = i
                    break
            if best < 0:
                break
            p = cand_rows[best]
            vis_stamp[p] = gen
            vis_rows[nvis] = p
            vis_d[nvis] = cand_d[best]
            nvis += 1

            dp = deg[p]
            for t in range(dp):
                nbr = adj[p, t]
                if in_stamp[nbr] == gen:
                    continue
                d = _nb_l2_sq(vecs[nbr], q)
                comparisons += 1
                if size == L:
                    worst_d = cand_d[size - 1]
                    worst_r = cand_rows[size - 1]
                    if d > worst_d or (d == worst_d and nbr > worst_r):
                        continue
                pos = size
                for i in range(size):
                    if d < cand_d[i] or (d == cand_d[i] and nbr < cand_rows[i]):
                        pos = i
                        break
                if size == L:
                    in_stamp[cand_rows[size - 1]] = 0
                else:
                    size += 1
                for i in range(size - 1, pos, -1):
                    cand_rows[i] = cand_rows[i - 1]
                    cand_d[i] = cand_d[i - 1]
                cand_rows[pos] = nbr
                cand_d[pos] = d
                in_stamp[nbr] = gen

        return size, nvis, comparisons

    @njit(cache=True, nogil=True)
    def _nb_robust_prune(cand_vecs, dists, alpha_sq, R, sel_out):
        m = dists.shape[0]
        alive = np.ones(m, dtype=np.bool_)
        nsel = 0
        while True:
            best = -1
            bd = np.inf
            for i in range(m):
                if alive[i] and dists[i] < bd:
                    bd = dists[i]
                    best = i
            if best < 0:
                break
            sel_out[nsel] = best
            nsel += 1
            alive[best] = False
            if nsel == R:
                break
            for i in range(m):
                if alive[i]:
                    s = 0.0
                    for j in range(cand_vecs.shape[1]):
                        d = np.float64(cand_vecs[best, j]) - np.float64(cand_vecs[i, j])
                        s += d * d
                    if alpha_sq * s <= dists[i]:
                        alive[i] = False
        return nsel

    @njit(cache=True, nogil=True)
    def _nb_adc_batch(lut, codes, out):
        n = codes.shape[0]
        m = lut.shape[0]
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += lut[j, codes[i, j]]
            out[i] = s
        return n

    @njit(cache=True, nogil=True)
    def _nb_chunk_sq_dists(table, q_chunk, out):
        for i in range(table.shape[0]):
            s = 0.0
            for j in range(table.shape[1]):
                d = np.float64(table[i, j]) - np.float64(q_chunk[j])
                s += d * d
            out[i] = s

    l2_sq = _nb_l2_sq
    l2_sq_batch = _nb_l2_sq_batch
    greedy_search = _nb_greedy_search
    robust_prune = _nb_robust_prune
    adc_batch = _nb_adc_batch
    chunk_sq_dists = _nb_chunk_sq_dists
else:
    l2_sq = _np_l2_sq
    l2_sq_batch = _np_l2_sq_batch
    greedy_search = _np_greedy_search
    robust_prune = _np_robust_prune
    adc_batch = _np_adc_batch
    chunk_sq_dists = _np_chunk_sq_dists


def warmup():
    """Force JIT compilation of every kernel (no-op on the numpy path)."""
    if not NUMBA_ENABLED:
        return
    vecs = np.zeros((2, 4), dtype=np.float32)
    q = np.zeros(4, dtype=np.float32)
    adj = np.zeros((2, 2), dtype=np.int32)
    deg = np.ones(2, dtype=np.int32)
    l2_sq(vecs[0], q)
    l2_sq_batch(vecs, q)
    greedy_search(vecs, adj, deg, q, 0, 2,
                  np.empty(2, np.int32), np.empty(2, np.float64),
                  np.empty(2, np.int32), np.empty(2, np.float64),
                  np.zeros(2, np.int64), np.zeros(2, np.int64), 1)
    robust_prune(vecs, np.zeros(2, np.float64), 1.0, 1, np.empty(2, np.int64))
    adc_batch(np.zeros((2, 256), np.float64), np.zeros((1, 2), np.uint8),
              np.empty(1, np.float64))
    chunk_sq_dists(np.zeros((256, 2), np.float32), q[:2], np.empty(256, np.float64))
