# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: FAST segment test, blocked two-NN search, kd-tree queries.

Every function here has a numpy twin in ``typorec._pure`` with the same
signature; ``typorec.kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint64_t, int32_t, int64_t
from libc.math cimport INFINITY, fabs

cnp.import_array()

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil

DEF _MISSING = 1073741824
HAMMING_MISSING = _MISSING

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
cdef int CIRCLE_DX[16]
cdef int CIRCLE_DY[16]
_dx = (0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3, -3, -3, -2, -1)
_dy = (-3, -3, -2, -1, 0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3)
for _i in range(16):
    CIRCLE_DX[_i] = _dx[_i]
    CIRCLE_DY[_i] = _dy[_i]


cdef inline double _arc_response(int* state, int* delta, int want) noexcept nogil:
    """Sum of |delta| over the unique circular run (>= 9) of ``state == want``; -1 if none."""
    cdef int start, k, run, best_start = -1, best_len = 0
    cdef int all_same = 1
    cdef double s = 0.0
    for k in range(16):
        if state[k] != want:
            all_same = 0
            break
    if all_same:
        for k in range(16):
            s += abs(delta[k])
        return s
    # start right after a non-matching pixel so runs never wrap past the start
    for start in range(16):
        if state[start] != want:
            break
    run = 0
    for k in range(1, 17):
        if state[(start + k) % 16] == want:
            run += 1
            if run >= 9:
                best_len = run
                best_start = (start + k - run + 1) % 16
        else:
            run = 0
    if best_len < 9:
        return -1.0
    # extend to the full maximal run
    run = 0
    k = best_start
    while run < 16 and state[k] == want:
        s += abs(delta[k])
        run += 1
        k = (k + 1) % 16
    return s


def fast_response(const uint8_t[:, ::1] img, int threshold, int border):
    """Segment-test response map; 0 where the pixel is not a FAST-9 corner."""
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t x, y
    cdef int k, c, v
    cdef int state[16]
    cdef int delta[16]
    cdef double r
    out = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] o = out
    if border < 3:
        border = 3
    with nogil:
        for y in range(border, h - border):
            for x in range(border, w - border):
                c = img[y, x]
                for k in range(16):
                    v = img[y + CIRCLE_DY[k], x + CIRCLE_DX[k]]
                    delta[k] = v - c
                    if v > c + threshold:
                        state[k] = 1
                    elif v < c - threshold:
                        state[k] = -1
                    else:
                        state[k] = 0
                r = _arc_response(state, delta, 1)
                if r < 0:
                    r = _arc_response(state, delta, -1)
                if r >= 0:
                    o[y, x] = r
    return out


cdef inline int _hamming(const uint8_t* a, const uint8_t* b, Py_ssize_t nbytes) noexcept nogil:
    cdef Py_ssize_t k, nwords = nbytes // 8
    cdef int d = 0
    cdef const uint64_t* pa = <const uint64_t*> a
    cdef const uint64_t* pb = <const uint64_t*> b
    for k in range(nwords):
        d += __builtin_popcountll(pa[k] ^ pb[k])
    for k in range(nwords * 8, nbytes):
        d += __builtin_popcountll(a[k] ^ b[k])
    return d


cdef inline double _sqdist(const float* a, const float* b, Py_ssize_t dim) noexcept nogil:
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0, t
    cdef Py_ssize_t k = 0
    while k + 4 <= dim:
        t = <double> a[k] - <double> b[k]
        s0 += t * t
        t = <double> a[k + 1] - <double> b[k + 1]
        s1 += t * t
        t = <double> a[k + 2] - <double> b[k + 2]
        s2 += t * t
        t = <double> a[k + 3] - <double> b[k + 3]
        s3 += t * t
        k += 4
    while k < dim:
        t = <double> a[k] - <double> b[k]
        s0 += t * t
        k += 1
    return (s0 + s1) + (s2 + s3)


def hamming_top2(const uint8_t[:, ::1] Q, const uint8_t[:, ::1] T, const int64_t[::1] offsets):
    """Per query row and per train block, the two smallest Hamming distances.

    Block ``v`` spans rows ``offsets[v]:offsets[v+1]`` of ``T``.  Returns
    ``(d1, d2, i1, i2)`` of shape ``(n, V)``; ties keep the lower train row.
    Missing neighbours carry distance ``HAMMING_MISSING`` and index -1.
    """
    cdef Py_ssize_t n = Q.shape[0], nb = Q.shape[1], V = offsets.shape[0] - 1
    if T.shape[1] != nb and T.shape[0] > 0:
        raise ValueError("descriptor width mismatch")
    d1 = np.full((n, V), HAMMING_MISSING, dtype=np.int32)
    d2 = np.full((n, V), HAMMING_MISSING, dtype=np.int32)
    i1 = np.full((n, V), -1, dtype=np.int32)
    i2 = np.full((n, V), -1, dtype=np.int32)
    cdef int32_t[:, ::1] D1 = d1, D2 = d2, I1 = i1, I2 = i2
    cdef Py_ssize_t q, v, j
    cdef int d, b1, b2
    cdef int32_t j1, j2
    if n == 0 or T.shape[0] == 0:
        return d1, d2, i1, i2
    with nogil:
        for q in range(n):
            for v in range(V):
                b1 = _MISSING
                b2 = _MISSING
                j1 = -1
                j2 = -1
                for j in range(offsets[v], offsets[v + 1]):
                    d = _hamming(&Q[q, 0], &T[j, 0], nb)
                    if d < b1:
                        b2 = b1
                        j2 = j1
                        b1 = d
                        j1 = <int32_t> j
                    elif d < b2:
                        b2 = d
                        j2 = <int32_t> j
                D1[q, v] = b1
                D2[q, v] = b2
                I1[q, v] = j1
                I2[q, v] = j2
    return d1, d2, i1, i2


def l2_top2(const float[:, ::1] Q, const float[:, ::1] T, const int64_t[::1] offsets):
    """Float twin of :func:`hamming_top2`; distances are squared, inf when missing."""
    cdef Py_ssize_t n = Q.shape[0], dim = Q.shape[1], V = offsets.shape[0] - 1
    if T.shape[1] != dim and T.shape[0] > 0:
        raise ValueError("descriptor width mismatch")
    d1 = np.full((n, V), np.inf, dtype=np.float64)
    d2 = np.full((n, V), np.inf, dtype=np.float64)
    i1 = np.full((n, V), -1, dtype=np.int32)
    i2 = np.full((n, V), -1, dtype=np.int32)
    cdef double[:, ::1] D1 = d1, D2 = d2
    cdef int32_t[:, ::1] I1 = i1, I2 = i2
    cdef Py_ssize_t q, v, j
    cdef double d, b1, b2
    cdef int32_t j1, j2
    if n == 0 or T.shape[0] == 0:
        return d1, d2, i1, i2
    with nogil:
        for q in range(n):
            for v in range(V):
                b1 = INFINITY
                b2 = INFINITY
                j1 = -1
                j2 = -1
                for j in range(offsets[v], offsets[v + 1]):
                    d = _sqdist(&Q[q, 0], &T[j, 0], dim)
                    if d < b1:
                        b2 = b1
                        j2 = j1
                        b1 = d
                        j1 = <int32_t> j
                    elif d < b2:
                        b2 = d
                        j2 = <int32_t> j
                D1[q, v] = b1
                D2[q, v] = b2
                I1[q, v] = j1
                I2[q, v] = j2
    return d1, d2, i1, i2


# ------------------------------------------------------------------ kd-tree

cdef struct Tree:
    const float* coords      # permuted points, n x dim (tree geometry)
    const uint8_t* packed    # permuted packed bits for hamming, else NULL
    Py_ssize_t dim
    Py_ssize_t nbytes
    const int32_t* perm       # permuted row -> original row
    const int32_t* split_dim
    const double* hi_left
    const double* lo_right
    const int32_t* left
    const int32_t* right
    const int32_t* start
    const int32_t* stop
    int hamming


cdef struct Best:
    double d1
    double d2
    int32_t i1
    int32_t i2


cdef inline void _offer(Best* b, double d, int32_t idx) noexcept nogil:
    if d < b.d1 or (d == b.d1 and idx < b.i1):
        b.d2 = b.d1
        b.i2 = b.i1
        b.d1 = d
        b.i1 = idx
    elif d < b.d2 or (d == b.d2 and idx < b.i2):
        b.d2 = d
        b.i2 = idx


cdef void _search(Tree* t, int32_t node, const float* q, const uint8_t* qp,
                  double* off, double rd, Best* b) noexcept nogil:
    cdef int32_t k, j, near, far
    cdef double d, qv, gl, gr, old, g_near, g_far, rd_far
    if t.left[node] < 0:
        for j in range(t.start[node], t.stop[node]):
            if t.hamming:
                d = _hamming(qp, t.packed + j * t.nbytes, t.nbytes)
            else:
                d = _sqdist(q, t.coords + j * t.dim, t.dim)
            _offer(b, d, t.perm[j])
        return
    k = t.split_dim[node]
    qv = q[k]
    gl = qv - t.hi_left[node] if qv > t.hi_left[node] else 0.0
    gr = t.lo_right[node] - qv if qv < t.lo_right[node] else 0.0
    if gl <= gr:
        near = t.left[node]
        far = t.right[node]
        g_near = gl
        g_far = gr
    else:
        near = t.right[node]
        far = t.left[node]
        g_near = gr
        g_far = gl
    old = off[k]
    if g_near > old:
        off[k] = g_near
        if t.hamming:
            _search(t, near, q, qp, off, rd - old + g_near, b)
        else:
            _search(t, near, q, qp, off, rd - old * old + g_near * g_near, b)
        off[k] = old
    else:
        _search(t, near, q, qp, off, rd, b)
    if g_far < old:
        g_far = old
    if t.hamming:
        rd_far = rd - old + g_far
        if rd_far > b.d2:
            return
    else:
        rd_far = rd - old * old + g_far * g_far
        if rd_far > b.d2 * (1.0 + 1e-9):
            return
    off[k] = g_far
    _search(t, far, q, qp, off, rd_far, b)
    off[k] = old


def kdtree_top2(const float[:, ::1] coords, packed, const int32_t[::1] perm,
                const int32_t[::1] split_dim, const double[::1] hi_left, const double[::1] lo_right,
                const int32_t[::1] left, const int32_t[::1] right,
                const int32_t[::1] start, const int32_t[::1] stop,
                const float[:, ::1] qcoords, qpacked):
    """Exact two-NN for every query row; returns ``(d1, d2, i1, i2)`` 1-D arrays.

    Distances are squared L2 for float trees or Hamming counts when ``packed``
    is given.  Ordering is lexicographic on ``(distance, original row)``.
    """
    cdef Tree t
    cdef Py_ssize_t n = qcoords.shape[0], dim = coords.shape[1], q
    cdef const uint8_t[:, ::1] P
    cdef const uint8_t[:, ::1] QP
    cdef int hamming = packed is not None
    t.coords = &coords[0, 0] if coords.shape[0] > 0 else NULL
    t.dim = dim
    t.perm = &perm[0]
    t.split_dim = &split_dim[0]
    t.hi_left = &hi_left[0]
    t.lo_right = &lo_right[0]
    t.left = &left[0]
    t.right = &right[0]
    t.start = &start[0]
    t.stop = &stop[0]
    t.hamming = hamming
    t.packed = NULL
    t.nbytes = 0
    if hamming:
        P = packed
        QP = qpacked
        t.packed = &P[0, 0]
        t.nbytes = P.shape[1]
    d1 = np.full(n, np.inf, dtype=np.float64)
    d2 = np.full(n, np.inf, dtype=np.float64)
    i1 = np.full(n, -1, dtype=np.int32)
    i2 = np.full(n, -1, dtype=np.int32)
    cdef double[::1] D1 = d1, D2 = d2
    cdef int32_t[::1] I1 = i1, I2 = i2
    offbuf = np.zeros(dim, dtype=np.float64)
    cdef double[::1] off = offbuf
    cdef Best b
    cdef Py_ssize_t k
    with nogil:
        for q in range(n):
            for k in range(dim):
                off[k] = 0.0
            b.d1 = INFINITY
            b.d2 = INFINITY
            b.i1 = 2147483647
            b.i2 = 2147483647
            if hamming:
                _search(&t, 0, &qcoords[q, 0], &QP[q, 0], &off[0], 0.0, &b)
            else:
                _search(&t, 0, &qcoords[q, 0], NULL, &off[0], 0.0, &b)
            D1[q] = b.d1
            D2[q] = b.d2
            I1[q] = b.i1 if b.d1 < INFINITY else -1
            I2[q] = b.i2 if b.d2 < INFINITY else -1
    return d1, d2, i1, i2
