# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled strided 1-D convolution kernels.

Summation order matches ``_pykernels`` exactly: each output accumulates the
tap products in ascending tap index, and kernel gradients accumulate in
ascending frame index. Build with ``-ffp-contract=off`` so no FMA sneaks in.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv1d_frames(const double[::1] padded, const double[:, ::1] kernels_t,
                  const double[::1] bias, Py_ssize_t stride, Py_ssize_t n_frames):
    """Return (n_frames, filters) conv output; ``kernels_t`` is (width, filters)."""
    cdef Py_ssize_t width = kernels_t.shape[0]
    cdef Py_ssize_t nf = kernels_t.shape[1]
    cdef Py_ssize_t t, i, k, base
    cdef double x
    out = np.zeros((n_frames, nf), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for t in range(n_frames):
            base = t * stride
            for i in range(width):
                x = padded[base + i]
                for k in range(nf):
                    o[t, k] = o[t, k] + kernels_t[i, k] * x
            for k in range(nf):
                o[t, k] = o[t, k] + bias[k]
    return out


def conv1d_kernel_grad(const double[::1] padded, const double[:, ::1] dy,
                       Py_ssize_t width, Py_ssize_t stride):
    """Return dKernels transposed, shape (width, filters)."""
    cdef Py_ssize_t n_frames = dy.shape[0]
    cdef Py_ssize_t nf = dy.shape[1]
    cdef Py_ssize_t t, i, k, base
    cdef double x
    out = np.zeros((width, nf), dtype=np.float64)
    cdef double[:, ::1] g = out
    with nogil:
        for t in range(n_frames):
            base = t * stride
            for i in range(width):
                x = padded[base + i]
                for k in range(nf):
                    g[i, k] = g[i, k] + dy[t, k] * x
    return out
