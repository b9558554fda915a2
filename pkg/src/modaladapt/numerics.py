"""Dense and strided 1-D convolution layers, MSE, Adam and a gradient checker.

Everything is float64. Matrices are ``(frames, features)`` numpy arrays.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, param_id):
        super().__init__(f"non-finite gradient for parameter {param_id!r}")
        self.param_id = param_id


def sigmoid(z):
    # clipping keeps the output strictly inside (0, 1) in float64
    return 1.0 / (1.0 + np.exp(-np.clip(z, -36.0, 36.0)))


@dataclass
class DenseLayer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ("sigmoid", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


@dataclass
class Conv1DLayer:
    kernels: np.ndarray  # (num_filters, width)
    bias: np.ndarray  # (num_filters,)
    stride: int
    pad_left: int = 0
    pad_right: int = 0

    def __post_init__(self):
        if self.kernels.ndim != 2 or self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(
                f"kernels {self.kernels.shape} and bias {self.bias.shape} disagree"
            )
        if not (self.width >= self.stride >= 1):
            raise ValueError(f"need width >= stride >= 1, got {self.width}, {self.stride}")

    @property
    def width(self):
        return self.kernels.shape[1]

    @property
    def num_filters(self):
        return self.kernels.shape[0]

    def num_frames(self, n_samples):
        padded = n_samples + self.pad_left + self.pad_right
        if padded < self.width:
            raise ShapeError(
                f"waveform of {n_samples} samples is shorter than conv width "
                f"{self.width} after padding"
            )
        return (padded - self.width) // self.stride + 1

    def pad(self, wave):
        return np.concatenate(
            [np.zeros(self.pad_left), np.asarray(wave, dtype=np.float64), np.zeros(self.pad_right)]
        )


def dense_forward(layer, X):
    if X.ndim != 2 or X.shape[1] != layer.in_dim:
        raise ShapeError(f"input has {X.shape[-1]} columns, layer expects {layer.in_dim}")
    Z = X @ layer.weight + layer.bias
    if layer.activation == "sigmoid":
        return sigmoid(Z)
    return Z


def dense_backward(layer, X, dY, Y=None):
    """Gradients ``(dX, dW, db)`` of ``dense_forward``.

    ``Y`` is the cached forward output; it is recomputed when omitted.
    """
    if dY.shape != (X.shape[0], layer.out_dim):
        raise ShapeError(f"upstream gradient {dY.shape} does not match output "
                         f"{(X.shape[0], layer.out_dim)}")
    if layer.activation == "sigmoid":
        if Y is None:
            Y = dense_forward(layer, X)
        dZ = dY * (Y * (1.0 - Y))
    else:
        dZ = dY
    dW = X.T @ dZ
    db = dZ.sum(axis=0)
    dX = dZ @ layer.weight.T
    return dX, dW, db


def conv1d_forward(layer, wave):
    padded = layer.pad(wave)
    n_frames = layer.num_frames(len(wave))
    kt = np.ascontiguousarray(layer.kernels.T)
    return kernels.conv1d_frames(padded, kt, layer.bias, layer.stride, n_frames)


def conv1d_backward(layer, wave, dY):
    """Gradients ``(dKernels, dBias)``; the waveform is data, so no input grad."""
    n_frames = layer.num_frames(len(wave))
    if dY.shape != (n_frames, layer.num_filters):
        raise ShapeError(f"upstream gradient {dY.shape} does not match output "
                         f"{(n_frames, layer.num_filters)}")
    padded = layer.pad(wave)
    dY = np.ascontiguousarray(dY, dtype=np.float64)
    dk = kernels.conv1d_kernel_grad(padded, dY, layer.width, layer.stride)
    return np.ascontiguousarray(dk.T), dY.sum(axis=0)


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Apply one Adam update in place.

    ``params`` maps ids to arrays (views are fine, they are updated in place);
    only ids present in ``grads`` move. The whole step is rejected if any
    gradient is non-finite.
    """
    for pid, g in grads.items():
        if pid not in params:
            raise KeyError(f"gradient for unknown parameter {pid!r}")
        if params[pid].shape != g.shape:
            raise ShapeError(f"{pid}: gradient {g.shape} vs parameter {params[pid].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(pid)
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for pid, g in grads.items():
        m = state.m.get(pid)
        if m is None:
            m = state.m[pid] = np.zeros_like(g)
            state.v[pid] = np.zeros_like(g)
        v = state.v[pid]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p = params[pid]
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_param: dict

    def ok(self, tolerance):
        return self.max_rel_error < tolerance


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(loss_fn, params, grads, step=1e-5, floor=1e-6):
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    ``loss_fn()`` is called with no arguments and must read ``params``, which
    are perturbed in place and restored. The relative error uses
    ``max(|a|, |n|, floor)`` as denominator so vanishing gradients compare
    absolutely.
    """
    worst = (0.0, "", ())
    per_param = {}
    for pid, g in grads.items():
        p = params[pid]
        errs = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_fn()
            p[idx] = orig - step
            down = loss_fn()
            p[idx] = orig
            numeric = (up - down) / (2.0 * step)
            errs[idx] = relative_error(g[idx], numeric, floor)
            if errs[idx] > worst[0]:
                worst = (errs[idx], pid, idx)
        per_param[pid] = float(errs.max()) if errs.size else 0.0
    return GradCheckReport(worst[0], worst[1], worst[2], per_param)
