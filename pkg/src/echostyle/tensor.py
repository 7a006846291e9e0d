"""Dense tensor arithmetic for the feature network and losses.

Conventions, used everywhere in this package:

- activations are float64 ndarrays in (channels, height, width) order,
  row-major;
- convolution kernels are (out_channels, in_channels, kh, kw);
- grayscale images are 2-D float64 arrays with intensities in [0, 1].

All functions treat their inputs as immutable values: nothing is modified
in place, so arrays may be shared freely between threads.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "conv2d",
    "conv2d_backward",
    "elementwise",
    "relu",
    "leaky_relu",
    "pool2d",
    "pool2d_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "check_finite",
]


def check_finite(name: str, a: np.ndarray) -> np.ndarray:
    """Raise ValueError if `a` contains NaN or Inf."""
    if not np.all(np.isfinite(a)):
        bad = int(np.count_nonzero(~np.isfinite(a)))
        raise ValueError(f"{name}: {bad} non-finite value(s) out of {a.size}")
    return a


def _as_chw(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"{name}: expected (channels, height, width), got shape {a.shape}")
    return a


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold `x` (C,H,W) into a (C*kh*kw, out_h*out_w) patch matrix."""
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[1], x.shape[2]
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} with stride {stride}, padding {padding} "
            f"does not fit input of shape {(c, h, w)}"
        )
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, kh, kw, out_h, out_w),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, out_h * out_w), out_h, out_w


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Fold a patch-gradient matrix back onto the input grid (adjoint of _im2col)."""
    c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((c, hp, wp))
    cols = cols.reshape(c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + out_h * stride:stride, j:j + out_w * stride:stride] += cols[:, i, j]
    if padding:
        dx = dx[:, padding:hp - padding, padding:wp - padding]
    return dx


def conv2d(x: np.ndarray, kernel: np.ndarray, bias=None, stride: int = 1,
           padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of a (C,H,W) input with a (O,C,kh,kw) kernel.

    Output spatial extents follow (in + 2*padding - k) // stride + 1.
    Padding is zero-padding; out-of-range activations count as 0.
    """
    x = _as_chw(x, "conv2d input")
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-D (out,in,kh,kw), got shape {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    out_c, in_c, kh, kw = kernel.shape
    if in_c != x.shape[0]:
        raise ValueError(
            f"conv2d: kernel expects {in_c} input channels but input has shape {x.shape}"
        )
    cols, out_h, out_w = _im2col(x, kh, kw, stride, padding)
    out = kernel.reshape(out_c, -1) @ cols
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (out_c,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({out_c},)")
        out = out + bias[:, None]
    return out.reshape(out_c, out_h, out_w)


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, padding: int = 0):
    """Gradients of conv2d w.r.t. input, kernel and bias.

    `grad_out` is the loss gradient at the conv output, shape (O, out_h, out_w).
    Returns (grad_x, grad_kernel, grad_bias).
    """
    x = _as_chw(x, "conv2d input")
    kernel = np.asarray(kernel, dtype=np.float64)
    out_c, in_c, kh, kw = kernel.shape
    cols, out_h, out_w = _im2col(x, kh, kw, stride, padding)
    g = np.asarray(grad_out, dtype=np.float64).reshape(out_c, out_h * out_w)
    grad_bias = g.sum(axis=1)
    grad_kernel = (g @ cols.T).reshape(kernel.shape)
    grad_cols = kernel.reshape(out_c, -1).T @ g
    grad_x = _col2im(grad_cols, x.shape, kh, kw, stride, padding, out_h, out_w)
    return grad_x, grad_kernel, grad_bias


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(a, dtype=np.float64), 0.0)


def leaky_relu(a: np.ndarray, slope: float = 0.01) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.where(a > 0.0, a, slope * a)


_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op: str, a: np.ndarray, b=None, slope: float = 0.01) -> np.ndarray:
    """Apply an elementwise operation: add/sub/mul/max (binary, tensor or
    scalar second operand), relu or leaky-relu (unary)."""
    a = np.asarray(a, dtype=np.float64)
    if op == "relu":
        return relu(a)
    if op == "leaky-relu":
        return leaky_relu(a, slope)
    if op not in _BINARY_OPS:
        raise ValueError(f"elementwise: unknown op {op!r}")
    if b is None:
        raise ValueError(f"elementwise: op {op!r} needs a second operand")
    if np.ndim(b) != 0:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != a.shape:
            raise ValueError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    return _BINARY_OPS[op](a, b)


def pool2d(x: np.ndarray, window: int, mode: str = "avg") -> np.ndarray:
    """Non-overlapping window pooling. The window must divide both spatial
    extents exactly; callers pad first."""
    x = _as_chw(x, "pool2d input")
    c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool2d: window {window} larger than input {(h, w)}")
    if h % window or w % window:
        raise ValueError(f"pool2d: window {window} does not divide spatial extents {(h, w)}")
    v = x.reshape(c, h // window, window, w // window, window)
    if mode == "max":
        return v.max(axis=(2, 4))
    if mode == "avg":
        return v.mean(axis=(2, 4))
    raise ValueError(f"pool2d: unknown mode {mode!r}")


def _max_pool_mask(x: np.ndarray, window: int) -> np.ndarray:
    """Per-window indicator of maximal positions, ties sharing the window
    equally (each tied cell gets 1/#ties)."""
    c, h, w = x.shape
    v = x.reshape(c, h // window, window, w // window, window)
    m = v.max(axis=(2, 4), keepdims=True)
    hits = (v == m).astype(np.float64)
    hits /= hits.sum(axis=(2, 4), keepdims=True)
    return hits.reshape(c, h, w)


def pool2d_backward(x: np.ndarray, window: int, mode: str, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of pool2d w.r.t. its input. Max-pool ties split the gradient
    equally over the tied positions."""
    x = _as_chw(x, "pool2d input")
    g = np.repeat(np.repeat(np.asarray(grad_out, dtype=np.float64), window, axis=1),
                  window, axis=2)
    if mode == "avg":
        return g / (window * window)
    if mode == "max":
        return g * _max_pool_mask(x, window)
    raise ValueError(f"pool2d: unknown mode {mode!r}")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over spatial positions; one value per channel."""
    x = _as_chw(x, "global_avg_pool input")
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    c, h, w = x_shape
    g = np.asarray(grad_out, dtype=np.float64).reshape(c, 1, 1)
    return np.broadcast_to(g / (h * w), (c, h, w)).copy()
