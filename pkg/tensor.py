"""
Dense float64 tensors and the numeric kernels the network is built from.

A tensor is a plain ``numpy.ndarray`` of dtype float64 in C (row-major)
order.  Spatial tensors are laid out channels-last, ``(..., H, W, C)``,
so any number of leading batch axes pass through every kernel untouched.

Convolutions are stride-1 cross-correlations with zero ("same") padding:
  out[..., h, w, o] = sum_{i,j,c} xpad[..., h+i, w+j, c] * k[i, j, c, o] + b[o]
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Shape mismatch on a named axis."""

    def __init__(self, message, axis=None, expected=None, actual=None):
        super().__init__(message)
        self.axis = axis
        self.expected = expected
        self.actual = actual


class NumericalError(ArithmeticError):
    """A kernel produced NaN or Inf."""


def check_finite(x, what="tensor"):
    """Raise NumericalError if ``x`` holds any NaN/Inf. Returns ``x``."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericalError(f"{what} contains {bad} non-finite value(s)")
    return x


def as_tensor(x, what="tensor"):
    """Copy ``x`` into a read-only, finite float64 array."""
    arr = np.array(x, dtype=np.float64, order="C", copy=True)
    if arr.ndim > 0 and 0 in arr.shape:
        raise ShapeError(f"{what} has an empty extent: {arr.shape}",
                         axis=arr.shape.index(0), expected=">0", actual=0)
    check_finite(arr, what)
    arr.flags.writeable = False
    return arr


def _check_kernels(x, kernels, bias):
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be Kh x Kw x Cin x Cout, got shape {kernels.shape}",
                         axis="kernels", expected=4, actual=kernels.ndim)
    kh, kw, cin, cout = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {kh}x{kw}",
                         axis="kernel_h" if kh % 2 == 0 else "kernel_w",
                         expected="odd", actual=kh if kh % 2 == 0 else kw)
    if x.ndim < 3:
        raise ShapeError(f"input must be (..., H, W, Cin), got shape {x.shape}",
                         axis="input", expected=">=3 dims", actual=x.ndim)
    if x.shape[-1] != cin:
        raise ShapeError(f"input channels {x.shape[-1]} do not match kernel Cin {cin}",
                         axis="channels", expected=cin, actual=x.shape[-1])
    if bias is not None and np.shape(bias) != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {np.shape(bias)}",
                         axis="bias", expected=cout, actual=np.shape(bias))


def _windows(x, kh, kw):
    """Zero-pad H/W and return sliding windows (..., H, W, C, Kh, Kw)."""
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
    padded = np.pad(x, pad)
    return sliding_window_view(padded, (kh, kw), axis=(-3, -2))


def conv2d_same(x, kernels, bias=None):
    """Zero-padded stride-1 2-D convolution preserving the spatial extent.

    x: (..., H, W, Cin); kernels: (Kh, Kw, Cin, Cout); bias: (Cout,) or None.
    Returns (..., H, W, Cout).
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    _check_kernels(x, kernels, bias)
    kh, kw = kernels.shape[:2]
    if kh == 1 and kw == 1:
        out = x @ kernels[0, 0]
    else:
        out = np.einsum("...hwcij,ijco->...hwo", _windows(x, kh, kw), kernels,
                        optimize=True)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return check_finite(out, "conv2d_same output")


def conv2d_same_grads(x, kernels, grad_out):
    """Vector-Jacobian products of ``conv2d_same``.

    Returns (d_input, d_kernels, d_bias) for upstream gradient ``grad_out``.
    The input gradient is the same-padded convolution of ``grad_out`` with
    the spatially flipped kernel, in/out channels swapped.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    kh, kw = kernels.shape[:2]
    flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2)
    d_input = conv2d_same(grad_out, flipped)
    if kh == 1 and kw == 1:
        cin, cout = kernels.shape[2:]
        d_kernels = (x.reshape(-1, cin).T @ np.reshape(grad_out, (-1, cout)))[None, None]
    else:
        d_kernels = np.einsum("...hwcij,...hwo->ijco", _windows(x, kh, kw), grad_out,
                              optimize=True)
    d_bias = grad_out.reshape(-1, grad_out.shape[-1]).sum(axis=0)
    return d_input, d_kernels, d_bias


def hadamard(a, b):
    """Elementwise product of two tensors of identical shape."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        axis = next((i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q),
                    min(a.ndim, b.ndim))
        raise ShapeError(f"hadamard shape mismatch {a.shape} vs {b.shape} (axis {axis})",
                         axis=axis, expected=a.shape, actual=b.shape)
    return check_finite(a * b, "hadamard output")


def _sigmoid(x):
    return expit(x)


def _tanh(x):
    return np.tanh(x)


def _linear(x):
    return np.array(x, dtype=np.float64, copy=True)


# kind -> (forward, derivative expressed through the forward output y)
ACTIVATIONS = {
    "sigmoid": (_sigmoid, lambda y: y * (1.0 - y)),
    "tanh": (_tanh, lambda y: 1.0 - y * y),
    "linear": (_linear, np.ones_like),
}


def activation(x, kind):
    """Apply an elementwise activation: sigmoid, tanh or linear."""
    if kind not in ACTIVATIONS:
        raise ValueError(f"Unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}")
    forward, _ = ACTIVATIONS[kind]
    return check_finite(forward(np.asarray(x, dtype=np.float64)), f"{kind} output")
