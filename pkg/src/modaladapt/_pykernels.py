"""Pure-numpy fallback for the compiled convolution kernels.

Bit-identical to ``_kernels``: same operand order, same accumulation order.
"""

import numpy as np


def conv1d_frames(padded, kernels_t, bias, stride, n_frames):
    width, nf = kernels_t.shape
    out = np.zeros((n_frames, nf))
    span = (n_frames - 1) * stride + 1
    for i in range(width):
        taps = padded[i:i + span:stride]
        out += kernels_t[i][None, :] * taps[:, None]
    out += bias[None, :]
    return out


def conv1d_kernel_grad(padded, dy, width, stride):
    n_frames, nf = dy.shape
    out = np.zeros((width, nf))
    for t in range(n_frames):
        seg = padded[t * stride:t * stride + width]
        out += dy[t][None, :] * seg[:, None]
    return out
