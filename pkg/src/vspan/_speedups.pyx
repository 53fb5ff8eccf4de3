# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled versions of the kernels in ``vspan._purepy``."""


def stab(const long long[:] starts, const long long[:] ends, long long t):
    cdef Py_ssize_t i, n = starts.shape[0]
    cdef list out = []
    for i in range(n):
        if starts[i] <= t and t <= ends[i]:
            out.append(i)
    return out


def covered_length(const long long[:] starts, const long long[:] ends,
                   long long lo, long long hi):
    cdef Py_ssize_t i, n = starts.shape[0]
    cdef long long s, e, cur_s = lo, cur_e = lo, total = 0
    for i in range(n):
        s = starts[i]
        e = ends[i]
        if s < lo:
            s = lo
        if e > hi:
            e = hi
        if e <= s:
            continue
        if s > cur_e:
            total += cur_e - cur_s
            cur_s = s
            cur_e = e
        elif e > cur_e:
            cur_e = e
    return total + (cur_e - cur_s)
