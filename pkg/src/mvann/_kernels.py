"""Numba kernels for token distances, USim (exact and clustered) and k-means.

A distance is always the float64 sum, in ascending coordinate order, of
float64-promoted float32 terms. ``dis`` and ``dist_block`` evaluate that same
sequence of operations, so they agree bit for bit; the exact and clustered
USim paths therefore agree exactly whenever the filter keeps every token.

Data tokens are read from a blocked store: object rows ``s:e`` of the (T, d)
token matrix live transposed, as a contiguous (d, e - s) block starting at
flat offset ``s * d``.
"""

import math

import numpy as np
from numba import njit

IP = 0
NEG_L2 = 1


@njit(cache=True)
def dis(a, b, metric):
    s = 0.0
    if metric == IP:
        for k in range(a.shape[0]):
            s += np.float64(a[k]) * np.float64(b[k])
        return s
    for k in range(a.shape[0]):
        t = np.float64(a[k]) - np.float64(b[k])
        s += t * t
    return -math.sqrt(s)


@njit(cache=True)
def dist_block(qt, tt, s, e, metric, out):
    """out[i, j] = dis(qt[i], token s + j), reading the object's block of the flat store ``tt``."""
    nq = qt.shape[0]
    d = qt.shape[1]
    c = e - s
    base = s * d
    a0 = np.empty(c)
    a1 = np.empty(c)
    a2 = np.empty(c)
    a3 = np.empty(c)
    i = 0
    while i + 4 <= nq:
        a0[:] = 0.0
        a1[:] = 0.0
        a2[:] = 0.0
        a3[:] = 0.0
        if metric == IP:
            for k in range(d):
                q0 = np.float64(qt[i, k])
                q1 = np.float64(qt[i + 1, k])
                q2 = np.float64(qt[i + 2, k])
                q3 = np.float64(qt[i + 3, k])
                for j in range(c):
                    t = np.float64(tt[base + k * c + j])
                    a0[j] += q0 * t
                    a1[j] += q1 * t
                    a2[j] += q2 * t
                    a3[j] += q3 * t
            for j in range(c):
                out[i, j] = a0[j]
                out[i + 1, j] = a1[j]
                out[i + 2, j] = a2[j]
                out[i + 3, j] = a3[j]
        else:
            for k in range(d):
                q0 = np.float64(qt[i, k])
                q1 = np.float64(qt[i + 1, k])
                q2 = np.float64(qt[i + 2, k])
                q3 = np.float64(qt[i + 3, k])
                for j in range(c):
                    t = np.float64(tt[base + k * c + j])
                    u0 = q0 - t
                    u1 = q1 - t
                    u2 = q2 - t
                    u3 = q3 - t
                    a0[j] += u0 * u0
                    a1[j] += u1 * u1
                    a2[j] += u2 * u2
                    a3[j] += u3 * u3
            for j in range(c):
                out[i, j] = -math.sqrt(a0[j])
                out[i + 1, j] = -math.sqrt(a1[j])
                out[i + 2, j] = -math.sqrt(a2[j])
                out[i + 3, j] = -math.sqrt(a3[j])
        i += 4
    while i < nq:
        a0[:] = 0.0
        if metric == IP:
            for k in range(d):
                q0 = np.float64(qt[i, k])
                for j in range(c):
                    a0[j] += q0 * np.float64(tt[base + k * c + j])
            for j in range(c):
                out[i, j] = a0[j]
        else:
            for k in range(d):
                q0 = np.float64(qt[i, k])
                for j in range(c):
                    u0 = q0 - np.float64(tt[base + k * c + j])
                    a0[j] += u0 * u0
            for j in range(c):
                out[i, j] = -math.sqrt(a0[j])
        i += 1


@njit(cache=True)
def select_top(vals, n, g, top_d, top_p):
    """Keep the ``g`` largest of ``vals[:n]`` sorted descending; ties keep the earlier position."""
    cnt = 0
    for p in range(n):
        v = vals[p]
        if cnt < g:
            pos = cnt
            cnt += 1
        elif v > top_d[g - 1]:
            pos = g - 1
        else:
            continue
        while pos > 0 and top_d[pos - 1] < v:
            top_d[pos] = top_d[pos - 1]
            top_p[pos] = top_p[pos - 1]
            pos -= 1
        top_d[pos] = v
        top_p[pos] = p
    return cnt


@njit(cache=True)
def _gnn_term(vals, cand, n, g, w, qi, top_d, top_p, contrib, m_idx, m_dist):
    select_top(vals, n, g, top_d, top_p)
    tsum = 0.0
    for r in range(g):
        tsum += top_d[r]
    keep = m_idx.shape[0] > 0
    for r in range(g):
        v = cand[top_p[r]]
        contrib[v] += w * top_d[r]
        if keep:
            m_idx[qi, r] = v
            m_dist[qi, r] = top_d[r]
    return w * (tsum / g)


@njit(cache=True)
def usim_exact(qt, qw, tt, s, e, gamma, metric, contrib, m_idx, m_dist):
    """Exact USim of query tokens ``qt`` against tokens ``s:e`` of the transposed store.

    ``contrib`` (length e - s, zeroed by the caller) receives per data-token
    contributions; the match arrays are filled when they have rows.
    """
    nq = qt.shape[0]
    c = e - s
    g = min(gamma, c)
    dm = np.empty((nq, c))
    dist_block(qt, tt, s, e, metric, dm)
    ident = np.arange(c)
    top_d = np.empty(g)
    top_p = np.empty(g, dtype=np.int64)
    total = 0.0
    for qi in range(nq):
        total += _gnn_term(dm[qi], ident, c, g, np.float64(qw[qi]), qi, top_d, top_p, contrib, m_idx, m_dist)
    return total


@njit(cache=True)
def beta_for(c, gamma):
    return max(gamma, int(math.ceil(math.sqrt(c))))


@njit(cache=True)
def usim_approx(qt, qw, cent, assign, toks, tt, s, e, gamma, metric, contrib, m_idx, m_dist, counter):
    """Clustered filter-and-refine USim.

    Each centroid keeps its ``beta`` closest data tokens; each query token then
    searches only its own cluster's candidates. ``counter[0]`` accumulates the
    number of token-distance evaluations.
    """
    nq = qt.shape[0]
    c = e - s
    k = cent.shape[0]
    beta = beta_for(c, gamma)
    if beta >= c:
        counter[0] += nq * c
        return usim_exact(qt, qw, tt, s, e, gamma, metric, contrib, m_idx, m_dist)
    cd = np.empty((k, c))
    dist_block(cent, tt, s, e, metric, cd)
    counter[0] += k * c
    cand = np.empty((k, beta), dtype=np.int64)
    top_d = np.empty(beta)
    top_p = np.empty(beta, dtype=np.int64)
    for i in range(k):
        select_top(cd[i], c, beta, top_d, top_p)
        cand[i, :] = np.sort(top_p)
    g = min(gamma, beta)
    vals = np.empty(beta)
    total = 0.0
    for qi in range(nq):
        a = assign[qi]
        for p in range(beta):
            vals[p] = dis(qt[qi], toks[s + cand[a, p]], metric)
        counter[0] += beta
        total += _gnn_term(vals, cand[a], beta, g, np.float64(qw[qi]), qi, top_d, top_p, contrib, m_idx, m_dist)
    return total


@njit(cache=True)
def _sqdist(a, b):
    s = 0.0
    for k in range(a.shape[0]):
        t = np.float64(a[k]) - np.float64(b[k])
        s += t * t
    return s


@njit(cache=True)
def _assign(x, cent, assign):
    c = x.shape[0]
    k = cent.shape[0]
    for p in range(c):
        best = 0
        bd = _sqdist(x[p], cent[0])
        for i in range(1, k):
            dd = _sqdist(x[p], cent[i])
            if dd < bd:
                bd = dd
                best = i
        assign[p] = best


@njit(cache=True)
def _normalize_row(v):
    nrm = 0.0
    for k in range(v.shape[0]):
        nrm += v[k] * v[k]
    nrm = math.sqrt(nrm)
    if nrm > 0.0:
        for k in range(v.shape[0]):
            v[k] /= nrm


@njit(cache=True)
def kmeans(x, k, u, iters):
    """Lloyd's k-means with k-means++ seeding driven by the uniforms ``u`` (length k).

    Centroids are renormalized to unit length after every update; a cluster
    left empty is re-seeded with the token farthest from its own centroid.
    """
    c, d = x.shape
    cent = np.empty((k, d))
    first = min(int(u[0] * c), c - 1)
    for j in range(d):
        cent[0, j] = x[first, j]
    mind = np.empty(c)
    for p in range(c):
        mind[p] = _sqdist(x[p], cent[0])
    for i in range(1, k):
        tot = 0.0
        for p in range(c):
            tot += mind[p]
        pick = min(int(u[i] * c), c - 1)
        if tot > 0.0:
            target = u[i] * tot
            acc = 0.0
            pick = c - 1
            for p in range(c):
                acc += mind[p]
                if acc > target and mind[p] > 0.0:
                    pick = p
                    break
        for j in range(d):
            cent[i, j] = x[pick, j]
        for p in range(c):
            dd = _sqdist(x[p], cent[i])
            if dd < mind[p]:
                mind[p] = dd
    assign = np.zeros(c, dtype=np.int32)
    sums = np.empty((k, d))
    counts = np.empty(k, dtype=np.int64)
    far = np.empty(c)
    for _ in range(iters):
        _assign(x, cent, assign)
        sums[:, :] = 0.0
        counts[:] = 0
        for p in range(c):
            a = assign[p]
            counts[a] += 1
            for j in range(d):
                sums[a, j] += np.float64(x[p, j])
        for i in range(k):
            if counts[i] > 0:
                for j in range(d):
                    cent[i, j] = sums[i, j] / counts[i]
                _normalize_row(cent[i])
        for p in range(c):
            far[p] = _sqdist(x[p], cent[assign[p]])
        for i in range(k):
            if counts[i] == 0:
                best = 0
                for p in range(1, c):
                    if far[p] > far[best]:
                        best = p
                for j in range(d):
                    cent[i, j] = x[best, j]
                _normalize_row(cent[i])
                far[best] = -1.0
    _assign(x, cent, assign)
    return cent.astype(np.float32), assign


@njit(cache=True)
def softmax(vals, out):
    n = vals.shape[0]
    m = vals[0]
    for i in range(1, n):
        if vals[i] > m:
            m = vals[i]
    tot = 0.0
    for i in range(n):
        out[i] = math.exp(vals[i] - m)
        tot += out[i]
    for i in range(n):
        out[i] = out[i] / tot
