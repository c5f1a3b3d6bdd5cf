# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: trigram feature hashing and ranked average precision."""
import numpy as np

from libc.stdint cimport uint64_t

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _mix(uint64_t h, Py_UCS4 cp) noexcept nogil:
    cdef unsigned int shift
    for shift in range(0, 32, 8):
        h ^= (<uint64_t>cp >> shift) & 0xFF
        h *= FNV_PRIME
    return h


cdef void _accumulate(str text, double[::1] out) noexcept:
    cdef Py_ssize_t n = len(text)
    cdef Py_ssize_t d = out.shape[0]
    cdef Py_ssize_t i
    cdef Py_UCS4 a, b, c
    cdef uint64_t h
    if n == 0:
        return
    a = 0x02
    b = text[0]
    # padded sequence: BOS, text[0..n-1], EOS
    for i in range(n):
        if i + 1 < n:
            c = text[i + 1]
        else:
            c = 0x03
        h = _mix(_mix(_mix(FNV_OFFSET, a), b), c)
        if h >> 63:
            out[h % d] -= 1.0
        else:
            out[h % d] += 1.0
        a = b
        b = c


def trigram_counts(str text, Py_ssize_t d):
    out = np.zeros(d, dtype=np.float64)
    _accumulate(text, out)
    return out


def trigram_counts_many(list texts, Py_ssize_t d):
    out = np.zeros((len(texts), d), dtype=np.float64)
    cdef double[:, ::1] view = out
    cdef Py_ssize_t row
    for row in range(len(texts)):
        _accumulate(<str>texts[row], view[row])
    return out


def average_precision_ranked(labels):
    cdef long long[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t k
    cdef long long hits = 0
    cdef double total = 0.0
    for k in range(lab.shape[0]):
        if lab[k]:
            hits += 1
            total += <double>hits / <double>(k + 1)
    if hits == 0:
        return float("nan")
    return total / hits
