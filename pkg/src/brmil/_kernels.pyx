# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: ESA window scan and per-bin top-m heaps."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double GAP = -2.0


cdef inline double pair_score(unsigned char a, unsigned char b) nogil:
    # codes A=0 C=1 G=2 U=3; a is the miRNA base, b the target base
    if (a == 0 and b == 3) or (a == 3 and b == 0) or (a == 1 and b == 2) or (a == 2 and b == 1):
        return 1.0
    if (a == 2 and b == 3) or (a == 3 and b == 2):
        return 0.5
    return 0.0


def esa_scan(const unsigned char[::1] seed, const unsigned char[::1] utr, int window):
    cdef Py_ssize_t ls = seed.shape[0]
    cdef Py_ssize_t lu = utr.shape[0]
    cdef Py_ssize_t nwin = lu - window + 1
    if nwin < 1:
        return np.zeros(0, dtype=np.float64)
    out = np.zeros(nwin, dtype=np.float64)
    cdef double[::1] res = out
    prev_arr = np.zeros(window + 1, dtype=np.float64)
    cur_arr = np.zeros(window + 1, dtype=np.float64)
    cdef double[::1] prev_mv = prev_arr
    cdef double[::1] cur_mv = cur_arr
    cdef double* prev = &prev_mv[0]
    cdef double* cur = &cur_mv[0]
    cdef double* tmp
    cdef Py_ssize_t s, i, j
    cdef double best, h, v
    cdef unsigned char tb
    with nogil:
        for s in range(nwin):
            for j in range(window + 1):
                prev[j] = 0.0
            best = 0.0
            for i in range(ls):
                cur[0] = 0.0
                for j in range(1, window + 1):
                    # reversed window: r[j-1] = utr[s + window - j]
                    tb = utr[s + window - j]
                    h = prev[j - 1] + pair_score(seed[i], tb)
                    v = prev[j] + GAP
                    if v > h:
                        h = v
                    v = cur[j - 1] + GAP
                    if v > h:
                        h = v
                    if h < 0.0:
                        h = 0.0
                    cur[j] = h
                    if h > best:
                        best = h
                tmp = prev
                prev = cur
                cur = tmp
            res[s] = best
    return out


cdef inline bint better(const double[::1] z, Py_ssize_t a, Py_ssize_t b) nogil:
    return z[a] > z[b] or (z[a] == z[b] and a < b)


def bin_topm(const double[::1] p, const double[::1] z, int nbins, int m):
    """Per-bin size-m min-heaps keyed on (z desc, index asc).

    Every candidate is pushed; a heap that grows past m drops its worst
    element with a bottom-up sift. Returns (heap array [nbins, m] of indices or -1, sizes [nbins],
    comparisons).
    """
    cdef Py_ssize_t n = p.shape[0]
    work = np.full((nbins, m + 1), -1, dtype=np.int64)
    sizes_arr = np.zeros(nbins, dtype=np.int64)
    cdef long long[:, ::1] heaps = work
    cdef long long[::1] sizes = sizes_arr
    cdef long long comps = 0
    cdef Py_ssize_t i, b, pos, parent, child, right, sz
    cdef long long t, x
    with nogil:
        for i in range(n):
            b = <Py_ssize_t>(p[i] * nbins)
            if b >= nbins:
                b = nbins - 1
            if b < 0:
                b = 0
            # push, sift up (min-heap on goodness: worst at root)
            pos = sizes[b]
            heaps[b, pos] = i
            sz = pos + 1
            while pos > 0:
                parent = (pos - 1) // 2
                comps += 1
                if better(z, heaps[b, parent], heaps[b, pos]):
                    t = heaps[b, parent]
                    heaps[b, parent] = heaps[b, pos]
                    heaps[b, pos] = t
                    pos = parent
                else:
                    break
            if sz > m:
                # drop the worst (root): descend along worse children with one
                # comparison per level, then climb to the slot of the last element
                sz -= 1
                x = heaps[b, sz]
                heaps[b, sz] = -1
                pos = 0
                while 2 * pos + 1 < sz:
                    child = 2 * pos + 1
                    if child + 1 < sz:
                        comps += 1
                        if better(z, heaps[b, child], heaps[b, child + 1]):
                            child = child + 1
                    pos = child
                while pos > 0:
                    comps += 1
                    if better(z, heaps[b, pos], x):
                        pos = (pos - 1) // 2
                    else:
                        break
                while True:
                    t = heaps[b, pos]
                    heaps[b, pos] = x
                    x = t
                    if pos == 0:
                        break
                    pos = (pos - 1) // 2
            sizes[b] = sz
    return np.ascontiguousarray(work[:, :m]), sizes_arr, comps
