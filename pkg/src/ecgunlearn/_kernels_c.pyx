# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv1d kernels. Same signatures and layouts as ``_kernels_py``.

The gather (im2col) and scatter-add (col2im) passes run here with zero
padding resolved in-loop, so no padded copy of the input is made; the
channel contraction is a single BLAS matmul through numpy.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef object _im2col(const double[:, :, ::1] x, Py_ssize_t k, Py_ssize_t stride,
                    Py_ssize_t padding, Py_ssize_t n_out):
    cdef Py_ssize_t nb = x.shape[0], cin = x.shape[1], length = x.shape[2]
    out = np.empty((nb * n_out, cin * k))
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, c, j, l, src, row
    for b in range(nb):
        for l in range(n_out):
            row = b * n_out + l
            for c in range(cin):
                for j in range(k):
                    src = l * stride + j - padding
                    if src < 0 or src >= length:
                        cols[row, c * k + j] = 0.0
                    else:
                        cols[row, c * k + j] = x[b, c, src]
    return out


cdef object _col2im(const double[:, ::1] gcols, Py_ssize_t nb, Py_ssize_t cin,
                    Py_ssize_t length, Py_ssize_t k, Py_ssize_t stride,
                    Py_ssize_t padding, Py_ssize_t n_out):
    out = np.zeros((nb, cin, length))
    cdef double[:, :, ::1] gx = out
    cdef Py_ssize_t b, c, j, l, dst, row
    for b in range(nb):
        for l in range(n_out):
            row = b * n_out + l
            for c in range(cin):
                for j in range(k):
                    dst = l * stride + j - padding
                    if 0 <= dst < length:
                        gx[b, c, dst] += gcols[row, c * k + j]
    return out


def conv1d_forward(x, w, Py_ssize_t stride, Py_ssize_t padding):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t nb = x.shape[0], length = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t n_out = (length + 2 * padding - k) // stride + 1
    cols = _im2col(x, k, stride, padding, n_out)
    y = cols @ np.ascontiguousarray(w, dtype=np.float64).reshape(cout, cin * k).T
    return np.ascontiguousarray(y.reshape(nb, n_out, cout).transpose(0, 2, 1))


def conv1d_backward_weight(gy, x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t padding):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t nb = gy.shape[0], cout = gy.shape[1], n_out = gy.shape[2]
    cdef Py_ssize_t cin = x.shape[1]
    cols = _im2col(x, k, stride, padding, n_out)
    gy2 = np.ascontiguousarray(gy, dtype=np.float64).transpose(1, 0, 2).reshape(cout, nb * n_out)
    return (gy2 @ cols).reshape(cout, cin, k)


def conv1d_backward_input(gy, w, Py_ssize_t length, Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t nb = gy.shape[0], cout = gy.shape[1], n_out = gy.shape[2]
    cdef Py_ssize_t cin = w.shape[1], k = w.shape[2]
    gy2 = np.ascontiguousarray(gy, dtype=np.float64).transpose(0, 2, 1).reshape(nb * n_out, cout)
    gcols = np.ascontiguousarray(gy2 @ np.ascontiguousarray(w, dtype=np.float64).reshape(cout, cin * k))
    return _col2im(gcols, nb, cin, length, k, stride, padding, n_out)
