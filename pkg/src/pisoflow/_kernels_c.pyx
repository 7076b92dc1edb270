# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel lane: CSR matvec and ILU(0) factor/solve.

Same call surface as ``_kernels_py``; plain serial loops, which beat the
vectorized fallback comfortably once rows stop being level-parallel.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double

LANE = "c"


cdef class Pattern:
    cdef public Py_ssize_t n
    cdef public object indptr
    cdef public object indices
    cdef public object diag_pos
    cdef cnp.int64_t[::1] _indptr
    cdef cnp.int64_t[::1] _indices
    cdef cnp.int64_t[::1] _diag

    def __init__(self, indptr, indices, diag_pos):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.diag_pos = np.ascontiguousarray(diag_pos, dtype=np.int64)
        self._indptr = self.indptr
        self._indices = self.indices
        self._diag = self.diag_pos
        self.n = self.indptr.shape[0] - 1


def make_pattern(indptr, indices, diag_pos):
    return Pattern(indptr, indices, diag_pos)


def matvec(Pattern pat, data, x, out=None):
    if out is None:
        out = np.empty_like(x)
    _matvec(pat, data, x, out)
    return out


def _matvec(Pattern pat, floating[::1] data, floating[::1] x,
            floating[::1] out):
    cdef Py_ssize_t i, p
    cdef floating acc
    cdef cnp.int64_t[::1] indptr = pat._indptr
    cdef cnp.int64_t[::1] indices = pat._indices
    with nogil:
        for i in range(pat.n):
            acc = 0
            for p in range(indptr[i], indptr[i + 1]):
                acc += data[p] * x[indices[p]]
            out[i] = acc


def ilu0_factor(Pattern pat, data, double pivot_floor):
    lu = data.copy()
    fixups = _factor(pat, lu, pivot_floor)
    return lu, fixups


def _factor(Pattern pat, floating[::1] lu, double pivot_floor):
    cdef Py_ssize_t i, pik, k, a, b, a_end, b_end
    cdef cnp.int64_t ca, cb
    cdef floating lik, piv
    cdef Py_ssize_t fixups = 0
    cdef cnp.int64_t[::1] indptr = pat._indptr
    cdef cnp.int64_t[::1] indices = pat._indices
    cdef cnp.int64_t[::1] diag = pat._diag
    with nogil:
        for i in range(pat.n):
            for pik in range(indptr[i], diag[i]):
                k = indices[pik]
                piv = lu[diag[k]]
                if piv < 0:
                    if -piv < pivot_floor:
                        piv = -<floating>pivot_floor
                        lu[diag[k]] = piv
                        fixups += 1
                elif piv < pivot_floor:
                    piv = <floating>pivot_floor
                    lu[diag[k]] = piv
                    fixups += 1
                lik = lu[pik] / piv
                lu[pik] = lik
                # update shared columns right of k in row i
                a = pik + 1
                b = diag[k] + 1
                a_end = indptr[i + 1]
                b_end = indptr[k + 1]
                while a < a_end and b < b_end:
                    ca = indices[a]
                    cb = indices[b]
                    if ca == cb:
                        lu[a] -= lik * lu[b]
                        a += 1
                        b += 1
                    elif ca < cb:
                        a += 1
                    else:
                        b += 1
        for i in range(pat.n):
            piv = lu[diag[i]]
            if piv < 0:
                if -piv < pivot_floor:
                    lu[diag[i]] = -<floating>pivot_floor
                    fixups += 1
            elif piv < pivot_floor:
                lu[diag[i]] = <floating>pivot_floor
                fixups += 1
    return fixups


def ilu0_solve(Pattern pat, lu, rhs, out=None):
    if out is None:
        out = rhs.copy()
    elif out is not rhs:
        out[:] = rhs
    _solve(pat, lu, out)
    return out


def _solve(Pattern pat, floating[::1] lu, floating[::1] z):
    cdef Py_ssize_t i, p
    cdef floating acc
    cdef cnp.int64_t[::1] indptr = pat._indptr
    cdef cnp.int64_t[::1] indices = pat._indices
    cdef cnp.int64_t[::1] diag = pat._diag
    with nogil:
        for i in range(pat.n):
            acc = z[i]
            for p in range(indptr[i], diag[i]):
                acc -= lu[p] * z[indices[p]]
            z[i] = acc
        for i in range(pat.n - 1, -1, -1):
            acc = z[i]
            for p in range(diag[i] + 1, indptr[i + 1]):
                acc -= lu[p] * z[indices[p]]
            z[i] = acc / lu[diag[i]]
