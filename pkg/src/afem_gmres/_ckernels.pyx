# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
from libc.stdint cimport int64_t, uint8_t

DEF SMALL = 32


def patch_apply(const double[::1] r, const int64_t[:, ::1] idx,
                const double[:, :, ::1] inv, double[::1] out):
    cdef Py_ssize_t m = idx.shape[0], n = idx.shape[1], p, i, j
    cdef double acc
    cdef double[::1] loc = np.empty(max(n, 1))
    with nogil:
        for p in range(m):
            for j in range(n):
                loc[j] = r[idx[p, j]]
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc = acc + inv[p, i, j] * loc[j]
                out[idx[p, i]] += acc
    return np.asarray(out)


def nvb_closure(const int64_t[:, ::1] elem_edges, const int64_t[:, ::1] edge_elements,
                edge_mark_in):
    cdef uint8_t[::1] mark = edge_mark_in.view(np.uint8)
    cdef int64_t[::1] stack = np.flatnonzero(edge_mark_in).astype(np.int64)
    cdef Py_ssize_t top = stack.shape[0]
    cdef int64_t[::1] buf = np.empty(elem_edges.shape[0] + top + 1, dtype=np.int64)
    cdef Py_ssize_t s, k
    cdef int64_t e, t, ref
    for k in range(top):
        buf[k] = stack[k]
    with nogil:
        while top > 0:
            top -= 1
            e = buf[top]
            for s in range(2):
                t = edge_elements[e, s]
                if t < 0:
                    continue
                ref = elem_edges[t, 0]
                if mark[ref] == 0:
                    mark[ref] = 1
                    buf[top] = ref
                    top += 1
    return edge_mark_in


# raw pointers: passing memoryviews to helpers costs a refcount per call
cdef inline bint _before(const double* v, int64_t x, int64_t y) noexcept nogil:
    return v[x] > v[y] or (v[x] == v[y] and x < y)


cdef inline void _swap(int64_t* a, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef int64_t t = a[i]
    a[i] = a[j]
    a[j] = t


def minimal_bulk(const double[::1] values, double target, double slack):
    cand = np.flatnonzero(np.asarray(values) > 0).astype(np.int64)
    cdef int64_t[::1] a_view = cand
    cdef int64_t* a = &a_view[0] if a_view.shape[0] else NULL
    cdef const double* v = &values[0] if values.shape[0] else NULL
    cdef Py_ssize_t lo = 0, hi = a_view.shape[0], mid, i, j, store, take = -1
    cdef double remaining = target, acc
    cdef int64_t piv
    if remaining <= slack:
        return np.empty(0, dtype=np.int64)
    with nogil:
        while hi > lo:
            if hi - lo <= SMALL:
                for i in range(lo + 1, hi):
                    j = i
                    while j > lo and _before(v, a[j], a[j - 1]):
                        _swap(a, j, j - 1)
                        j -= 1
                acc = 0.0
                take = hi
                for i in range(lo, hi):
                    acc = acc + v[a[i]]
                    if acc >= remaining - slack:
                        take = i + 1
                        break
                break
            mid = lo + (hi - lo) // 2
            # median of three moved to hi - 1
            if _before(v, a[mid], a[lo]):
                _swap(a, mid, lo)
            if _before(v, a[hi - 1], a[lo]):
                _swap(a, hi - 1, lo)
            if _before(v, a[mid], a[hi - 1]):
                _swap(a, mid, hi - 1)
            piv = a[hi - 1]
            store = lo
            acc = 0.0
            for i in range(lo, hi - 1):
                if _before(v, a[i], piv):
                    acc = acc + v[a[i]]
                    _swap(a, i, store)
                    store += 1
            _swap(a, store, hi - 1)
            if acc >= remaining - slack:
                hi = store
                continue
            remaining = remaining - acc - v[a[store]]
            if remaining <= slack:
                take = store + 1
                break
            lo = store + 1
        if take < 0:
            take = lo
    return np.sort(cand[:take])
