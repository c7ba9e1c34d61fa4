"""Pure-numpy conv1d kernels (im2col + matmul).

Reference backend, always importable. Layouts: x [batch, in_ch, len],
w [out_ch, in_ch, k], gy [batch, out_ch, out_len]; all float64 C-contiguous.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _cols(x, k, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    # [batch, out_len, in_ch, k] -> [batch*out_len, in_ch*k]
    b, c, n_out, _ = win.shape
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * n_out, c * k), n_out


def conv1d_forward(x, w, stride, padding):
    b = x.shape[0]
    out_ch, in_ch, k = w.shape
    cols, n_out = _cols(x, k, stride, padding)
    y = cols @ w.reshape(out_ch, in_ch * k).T
    return np.ascontiguousarray(y.reshape(b, n_out, out_ch).transpose(0, 2, 1))


def conv1d_backward_weight(gy, x, k, stride, padding):
    b, out_ch, n_out = gy.shape
    in_ch = x.shape[1]
    cols, _ = _cols(x, k, stride, padding)
    gy2 = gy.transpose(1, 0, 2).reshape(out_ch, b * n_out)
    return (gy2 @ cols).reshape(out_ch, in_ch, k)


def conv1d_backward_input(gy, w, length, stride, padding):
    b, out_ch, n_out = gy.shape
    _, in_ch, k = w.shape
    gy2 = gy.transpose(0, 2, 1).reshape(b * n_out, out_ch)
    gcols = (gy2 @ w.reshape(out_ch, in_ch * k)).reshape(b, n_out, in_ch, k)
    gxp = np.zeros((b, in_ch, length + 2 * padding))
    span = stride * (n_out - 1) + 1
    for j in range(k):
        gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
    return np.ascontiguousarray(gxp[:, :, padding:padding + length])
