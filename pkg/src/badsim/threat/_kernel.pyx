# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled partial-sequence kernel; same contract as ``_kernel_py.advance``."""

from libc.stdint cimport uint64_t, int64_t


cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def advance(uint64_t[:] entries, Py_ssize_t row_start, Py_ssize_t row_stop,
            int64_t[:] seq_idx, uint64_t[:] pos_mask,
            int64_t[:] touched, uint64_t[:] formed):
    cdef Py_ssize_t r, n = 0
    cdef int64_t s
    cdef uint64_t pm, e, ext, ins, new_bits
    cdef long long work = 0
    with nogil:
        for r in range(row_start, row_stop):
            s = seq_idx[r]
            pm = pos_mask[r]
            e = entries[s]
            ext = e & (pm >> 1)
            ins = pm & 1
            new_bits = (ext << 1) | ins
            entries[s] = (e & ~ext) | new_bits
            work += __builtin_popcountll(ext) + ins
            if new_bits:
                touched[n] = s
                formed[n] = new_bits
                n += 1
    return work, n
