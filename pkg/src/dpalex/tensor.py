"""Dense NCHW kernels: convolution, max pooling, dense, ReLU and softmax cross-entropy.

Tensors are plain ``numpy`` arrays. Activations are 4-D ``(n, c, h, w)``
single-precision arrays in C order; dense layers work on ``(n, d)``.
Every function here is pure, so kernels may be called from several
threads at once on distinct data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with a kernel's contract."""


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if self.out_channels < 1 or kh < 1 or kw < 1 or self.stride < 1 or self.pad < 0:
            raise ValueError(f"invalid ConvSpec {self}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return (_extent(h, kh, self.stride, self.pad, "height"),
                _extent(w, kw, self.stride, self.pad, "width"))


@dataclass(frozen=True)
class PoolSpec:
    window: tuple[int, int]
    stride: int

    def __post_init__(self):
        ph, pw = self.window
        if ph < 1 or pw < 1 or self.stride < 1:
            raise ValueError(f"invalid PoolSpec {self}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ph, pw = self.window
        return (_extent(h, ph, self.stride, 0, "height"),
                _extent(w, pw, self.stride, 0, "width"))


def _extent(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"{axis} {size} (pad {pad}) does not tile exactly with window {k}, stride {stride}")
    return span // stride + 1


def _as4d(x: np.ndarray, name: str) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    return x


# -- convolution -------------------------------------------------------------

def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    """Patches laid out as ``(c*kh*kw, n*oh*ow)``."""
    n, c = x.shape[:2]
    xp = _pad(x, pad)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def _check_conv(x, weights, spec: ConvSpec):
    _as4d(x, "input")
    _as4d(weights, "weights")
    o, c, kh, kw = weights.shape
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {c}")
    if o != spec.out_channels or (kh, kw) != tuple(spec.kernel):
        raise ShapeError(f"weights shape {weights.shape} disagrees with {spec}")
    return spec.output_hw(x.shape[2], x.shape[3])


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   spec: ConvSpec) -> np.ndarray:
    """Cross-correlation of ``x`` with ``weights`` plus a per-channel bias."""
    oh, ow = _check_conv(x, weights, spec)
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape}, expected ({spec.out_channels},)")
    n = x.shape[0]
    kh, kw = spec.kernel
    cols = _im2col(x, kh, kw, spec.stride, spec.pad, oh, ow)
    out = weights.reshape(spec.out_channels, -1) @ cols  # (o, n*oh*ow)
    out += bias[:, None]
    return np.ascontiguousarray(out.reshape(-1, n, oh, ow).transpose(1, 0, 2, 3))


def conv2d_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray,
                    spec: ConvSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d_forward(x, weights, b))``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    oh, ow = _check_conv(x, weights, spec)
    n, c, h, w = x.shape
    o = spec.out_channels
    if grad_out.shape != (n, o, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(n, o, oh, ow)}")
    kh, kw = spec.kernel
    s, p = spec.stride, spec.pad

    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(o, -1)
    cols = _im2col(x, kh, kw, s, p, oh, ow)
    grad_w = (g @ cols.T).reshape(weights.shape)
    grad_b = g.sum(axis=1)

    grad_cols = (weights.reshape(o, -1).T @ g).reshape(c, kh, kw, n, oh, ow)
    grad_xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, :, i:i + s * oh:s, j:j + s * ow:s] += grad_cols[:, i, j].transpose(1, 0, 2, 3)
    grad_x = grad_xp[:, :, p:p + h, p:p + w] if p else grad_xp
    return (np.ascontiguousarray(grad_x),
            grad_w.astype(x.dtype, copy=False),
            grad_b.astype(x.dtype, copy=False))


# -- max pooling -------------------------------------------------------------

def maxpool_forward(x: np.ndarray, spec: PoolSpec) -> tuple[np.ndarray, np.ndarray]:
    """Window maxima and, for each output, the flat index into ``x`` of the winner.

    Ties go to the first element of the window in row-major scan order.
    """
    _as4d(x, "input")
    n, c, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    ph, pw = spec.window
    s = spec.stride
    win = sliding_window_view(x, (ph, pw), axis=(2, 3))[:, :, ::s, ::s]
    flat = win.reshape(n, c, oh, ow, ph * pw)
    local = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    rows = np.arange(oh)[:, None] * s + local // pw
    cols = np.arange(ow)[None, :] * s + local % pw
    plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None]
    argmax = (plane * h + rows) * w + cols
    return np.ascontiguousarray(out), argmax


def maxpool_backward(grad_out: np.ndarray, argmax: np.ndarray,
                     input_shape: tuple[int, ...]) -> np.ndarray:
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != argmax shape {argmax.shape}")
    size = int(np.prod(input_shape))
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise ShapeError(f"argmax indices fall outside input shape {tuple(input_shape)}")
    # bincount accumulates overlapping windows
    grad = np.bincount(argmax.ravel(), weights=grad_out.ravel(), minlength=size)
    return grad.astype(grad_out.dtype).reshape(input_shape)


# -- dense -------------------------------------------------------------------

def _check_dense(x, weights):
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} != weights rows {weights.shape[0]}")


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = x.reshape(x.shape[0], -1)
    _check_dense(x, weights)
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape}, expected ({weights.shape[1]},)")
    return x @ weights + bias


def dense_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_weights, grad_bias)``; grad_input has ``x``'s shape."""
    shape = x.shape
    x = x.reshape(shape[0], -1)
    _check_dense(x, weights)
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(x.shape[0], weights.shape[1])}")
    grad_x = (grad_out @ weights.T).reshape(shape)
    return grad_x, x.T @ grad_out, grad_out.sum(axis=0)


# -- activations and loss ----------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu input {x.shape} != grad_out {grad_out.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of ``logits`` (n, k) against integer ``labels``.

    Returns ``(loss, probs, grad_logits)`` where ``grad_logits`` is the
    gradient of the mean loss.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (n, k), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    rows = np.arange(n)
    log_p = shifted[rows, labels] - np.log(total[:, 0])
    loss = float(-log_p.mean(dtype=np.float64))
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n
    return loss, probs, grad


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.array(x, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(flat[i])
        hi = f(x)
        flat[i] = orig - eps
        down = float(flat[i])
        lo = f(x)
        flat[i] = orig
        # divide by the step actually taken after rounding to x's dtype
        g[i] = (hi - lo) / (up - down)
    return grad
