"""Numpy implementations of the kernels in ``_core.pyx``.

Used when the extension is not built, or when ``TYPOREC_PURE=1``.  Results
are identical for integer quantities (FAST responses, Hamming distances);
float distances agree to rounding.
"""

from __future__ import annotations

import numpy as np

HAMMING_MISSING = 1 << 30

CIRCLE_DX = np.array([0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3, -3, -3, -2, -1])
CIRCLE_DY = np.array([-3, -3, -2, -1, 0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3])

_CHUNK = 1 << 22  # elements per broadcast block


def fast_response(img, threshold, border):
    img = np.asarray(img)
    h, w = img.shape
    border = max(int(border), 3)
    out = np.zeros((h, w), dtype=np.float64)
    if h - 2 * border <= 0 or w - 2 * border <= 0:
        return out
    c = img[border:h - border, border:w - border].astype(np.int32)
    ring = np.stack([
        img[border + dy:h - border + dy, border + dx:w - border + dx].astype(np.int32)
        for dx, dy in zip(CIRCLE_DX, CIRCLE_DY)
    ])
    delta = np.abs(ring - c)
    resp = np.full(c.shape, -1.0)
    for state in (ring > c + threshold, ring < c - threshold):
        doubled = np.concatenate([state, state], axis=0)
        covered = np.zeros_like(state)
        hit = np.zeros(c.shape, dtype=bool)
        for s in range(16):
            win = doubled[s:s + 9].all(axis=0)
            if not win.any():
                continue
            hit |= win
            for k in range(9):
                covered[(s + k) % 16] |= win
        r = (delta * covered).sum(axis=0).astype(np.float64)
        resp = np.where(hit & (resp < 0), r, resp)
    out[border:h - border, border:w - border] = np.where(resp >= 0, resp, 0.0)
    return out


def _popcount_dist(Q, T):
    return np.bitwise_count(Q[:, None, :] ^ T[None, :, :]).sum(axis=-1, dtype=np.int64)


def _sq_dist(Q, T):
    diff = Q.astype(np.float64)[:, None, :] - T.astype(np.float64)[None, :, :]
    return (diff * diff).sum(axis=-1)


def _top2_blocks(Q, T, offsets, dist, missing, dtype):
    n = Q.shape[0]
    V = len(offsets) - 1
    d1 = np.full((n, V), missing, dtype=dtype)
    d2 = np.full((n, V), missing, dtype=dtype)
    i1 = np.full((n, V), -1, dtype=np.int32)
    i2 = np.full((n, V), -1, dtype=np.int32)
    if n == 0 or T.shape[0] == 0:
        return d1, d2, i1, i2
    width = max(Q.shape[1], 1)
    for v in range(V):
        a, b = int(offsets[v]), int(offsets[v + 1])
        m = b - a
        if m == 0:
            continue
        step = max(1, _CHUNK // (m * width))
        for q0 in range(0, n, step):
            d = dist(Q[q0:q0 + step], T[a:b])
            # stable argsort keeps the lower row first on ties
            order = np.argsort(d, axis=1, kind="stable")[:, :2]
            rows = np.arange(d.shape[0])
            d1[q0:q0 + step, v] = d[rows, order[:, 0]]
            i1[q0:q0 + step, v] = order[:, 0] + a
            if m > 1:
                d2[q0:q0 + step, v] = d[rows, order[:, 1]]
                i2[q0:q0 + step, v] = order[:, 1] + a
    return d1, d2, i1, i2


def hamming_top2(Q, T, offsets):
    Q = np.ascontiguousarray(Q, dtype=np.uint8)
    T = np.ascontiguousarray(T, dtype=np.uint8)
    if T.shape[0] and T.shape[1] != Q.shape[1]:
        raise ValueError("descriptor width mismatch")
    return _top2_blocks(Q, T, offsets, _popcount_dist, HAMMING_MISSING, np.int32)


def l2_top2(Q, T, offsets):
    Q = np.ascontiguousarray(Q, dtype=np.float32)
    T = np.ascontiguousarray(T, dtype=np.float32)
    if T.shape[0] and T.shape[1] != Q.shape[1]:
        raise ValueError("descriptor width mismatch")
    return _top2_blocks(Q, T, offsets, _sq_dist, np.inf, np.float64)


def kdtree_top2(coords, packed, perm, split_dim, hi_left, lo_right, left, right,
                start, stop, qcoords, qpacked):
    n = qcoords.shape[0]
    hamming = packed is not None
    d1 = np.full(n, np.inf)
    d2 = np.full(n, np.inf)
    i1 = np.full(n, -1, dtype=np.int32)
    i2 = np.full(n, -1, dtype=np.int32)
    dim = coords.shape[1]
    for q in range(n):
        qc = qcoords[q]
        best = [np.inf, 2**31 - 1, np.inf, 2**31 - 1]  # d1, i1, d2, i2
        off = np.zeros(dim)
        # explicit stack of (node, rd, restore-list) emulating the recursive search
        stack = [(0, 0.0, None)]
        while stack:
            node, rd, assign = stack.pop()
            if assign is not None:
                k, val = assign
                off[k] = val
                if node < 0:
                    continue
            if node < 0:
                continue
            if rd > (best[2] if hamming else best[2] * (1 + 1e-9)):
                continue
            if left[node] < 0:
                a, b = start[node], stop[node]
                if hamming:
                    d = np.bitwise_count(packed[a:b] ^ qpacked[q]).sum(axis=-1, dtype=np.int64).astype(np.float64)
                else:
                    d = _sq_dist(qc[None, :], coords[a:b])[0]
                for j in range(b - a):
                    _offer(best, float(d[j]), int(perm[a + j]))
                continue
            k = split_dim[node]
            qv = float(qc[k])
            gl = qv - hi_left[node] if qv > hi_left[node] else 0.0
            gr = lo_right[node] - qv if qv < lo_right[node] else 0.0
            if gl <= gr:
                near, far, g_near, g_far = left[node], right[node], gl, gr
            else:
                near, far, g_near, g_far = right[node], left[node], gr, gl
            old = off[k]
            g_near = max(g_near, old)
            g_far = max(g_far, old)
            f = (lambda g: g) if hamming else (lambda g: g * g)
            # pushed in reverse: near subtree, restore, far subtree, restore
            stack.append((-1, 0.0, (k, old)))
            stack.append((far, rd - f(old) + f(g_far), (k, g_far)))
            stack.append((-1, 0.0, (k, old)))
            stack.append((near, rd - f(old) + f(g_near), (k, g_near)))
        d1[q], i1[q], d2[q], i2[q] = best
        if not np.isfinite(d1[q]):
            i1[q] = -1
        if not np.isfinite(d2[q]):
            i2[q] = -1
    return d1, d2, i1, i2


def _offer(best, d, idx):
    if d < best[0] or (d == best[0] and idx < best[1]):
        best[2], best[3] = best[0], best[1]
        best[0], best[1] = d, idx
    elif d < best[2] or (d == best[2] and idx < best[3]):
        best[2], best[3] = d, idx
