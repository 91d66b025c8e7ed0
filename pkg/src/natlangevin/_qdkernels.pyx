# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled quasi-diagonal kernels; one pass per block, no temporaries."""
from libc.math cimport sqrt, isfinite

ctypedef long long i64


def qd_factor(const double[::1] diag, const double[::1] row0, double eps, double floor,
              const i64[::1] offsets, const i64[::1] sizes,
              double[::1] adiag, double[::1] arow):
    cdef Py_ssize_t b, i, off, size
    cdef double rad, a00, a002, aii, cross
    cdef long n_clamped = 0
    cdef Py_ssize_t bad = -1
    with nogil:
        for b in range(offsets.shape[0]):
            off = offsets[b]
            size = sizes[b]
            rad = diag[off] + eps
            if not isfinite(rad):
                bad = b
                break
            if not rad > 0:
                n_clamped += 1
                rad = floor
            a00 = 1.0 / sqrt(rad)
            a002 = a00 * a00
            adiag[off] = a00
            arow[off] = a00
            if not isfinite(a00):
                bad = b
                break
            for i in range(off + 1, off + size):
                cross = a00 * row0[i]
                rad = diag[i] - cross * cross + eps
                if not isfinite(rad):
                    bad = b
                    break
                if not rad > 0:
                    n_clamped += 1
                    rad = floor
                aii = 1.0 / sqrt(rad)
                adiag[i] = aii
                arow[i] = -a002 * aii * row0[i]
                if not (isfinite(aii) and isfinite(arow[i])):
                    bad = b
                    break
            if bad >= 0:
                break
    return n_clamped, bad


def qd_apply(const double[::1] adiag, const double[::1] arow, const double[::1] g,
             const i64[::1] offsets, const i64[::1] sizes, double[::1] out):
    cdef Py_ssize_t b, i, off, size
    cdef double g0, h, acc
    with nogil:
        for b in range(offsets.shape[0]):
            off = offsets[b]
            size = sizes[b]
            g0 = g[off]
            acc = adiag[off] * (adiag[off] * g0)
            for i in range(off + 1, off + size):
                h = arow[i] * g0 + adiag[i] * g[i]
                acc += arow[i] * h
                out[i] = adiag[i] * h
            out[off] = acc


def qd_lower(const double[::1] adiag, const double[::1] arow, const double[::1] z,
             const i64[::1] offsets, const i64[::1] sizes, double[::1] out):
    cdef Py_ssize_t b, i, off, size
    cdef double acc
    with nogil:
        for b in range(offsets.shape[0]):
            off = offsets[b]
            size = sizes[b]
            acc = adiag[off] * z[off]
            for i in range(off + 1, off + size):
                acc += arow[i] * z[i]
                out[i] = adiag[i] * z[i]
            out[off] = acc


def qd_rank_one(double[::1] diag, double[::1] row0, const double[::1] u, double gamma,
                const i64[::1] offsets, const i64[::1] sizes):
    cdef Py_ssize_t b, i, off, size
    cdef double keep = 1.0 - gamma
    cdef double gu0
    with nogil:
        for b in range(offsets.shape[0]):
            off = offsets[b]
            size = sizes[b]
            gu0 = gamma * u[off]
            for i in range(off, off + size):
                diag[i] = keep * diag[i] + gamma * u[i] * u[i]
                row0[i] = keep * row0[i] + gu0 * u[i]
            row0[off] = diag[off]
