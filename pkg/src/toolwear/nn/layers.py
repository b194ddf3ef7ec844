"""Forward/backward pairs for the CNN layers.

Feature maps are channels-last numpy arrays, (batch, height, width,
channels); kernels are (out_channels, in_channels, kh, kw). Every
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward`` takes
the upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


# ----------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _kernel_matrix(w):
    F = w.shape[0]
    return w.transpose(0, 2, 3, 1).reshape(F, -1)


def conv2d_forward(x, w, b, stride: int = 1, pad: int = 0):
    """Cross-correlation of ``x`` (B, H, W, C) with ``w`` (F, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    B, H, W, C = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"input has {C} channels, kernel expects {Cw}")
    if b.shape != (F,):
        raise ShapeError(f"bias shape {b.shape} != ({F},)")
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {H}x{W}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    # im2col with (kh, kw, C) ordering inside each row
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    out = (cols @ _kernel_matrix(w).T).reshape(B, Ho, Wo, F)
    out += b
    return out, (x.shape, cols, w, stride, pad)


def conv2d_backward(dout, cache, need_dx: bool = True):
    """Gradients ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is False."""
    x_shape, cols, w, stride, pad = cache
    B, H, W, C = x_shape
    F, _, kh, kw = w.shape
    _, Ho, Wo, _ = dout.shape
    d2 = dout.reshape(-1, F)
    db = d2.sum(axis=0)
    dw = (d2.T @ cols).reshape(F, kh, kw, C).transpose(0, 3, 1, 2)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ _kernel_matrix(w)).reshape(B, Ho, Wo, kh, kw, C)
    dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, i, j]
    dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
    return dx, dw, db


# ----------------------------------------------------------------------------
# activations


def leaky_relu_forward(x, slope: float = 0.01):
    scale = np.where(x < 0, x.dtype.type(slope), x.dtype.type(1))
    return x * scale, scale


def leaky_relu_backward(dout, scale):
    return dout * scale


def relu_forward(x):
    pos = x > 0
    return x * pos, pos


def relu_backward(dout, pos):
    return dout * pos


# ----------------------------------------------------------------------------
# pooling (non-overlapping, window == stride; ragged edges are dropped)


def _check_pool(x, size):
    B, H, W, C = x.shape
    if H < size or W < size:
        raise ShapeError(f"pool window {size} larger than input {H}x{W}")
    return H // size, W // size


def max_pool2d_forward(x, size: int = 2):
    """Window maximum; ties go to the first element in row-major window order."""
    Ho, Wo = _check_pool(x, size)
    views = [x[:, i:Ho * size:size, j:Wo * size:size] for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    # route each output to the first window position holding the max
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for v in views:
        m = (v == out) & ~taken
        taken |= m
        masks.append(m)
    return out, (x.shape, masks, size, Ho, Wo)


def max_pool2d_backward(dout, cache):
    x_shape, masks, size, Ho, Wo = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    k = 0
    for i in range(size):
        for j in range(size):
            dx[:, i:Ho * size:size, j:Wo * size:size] = dout * masks[k]
            k += 1
    return dx


def avg_pool2d_forward(x, size: int = 2):
    Ho, Wo = _check_pool(x, size)
    out = np.zeros((x.shape[0], Ho, Wo, x.shape[3]), dtype=x.dtype)
    for i in range(size):
        for j in range(size):
            out += x[:, i:Ho * size:size, j:Wo * size:size]
    out /= size * size
    return out, (x.shape, size, Ho, Wo)


def avg_pool2d_backward(dout, cache):
    x_shape, size, Ho, Wo = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    share = dout / (size * size)
    for i in range(size):
        for j in range(size):
            dx[:, i:Ho * size:size, j:Wo * size:size] = share
    return dx


# ----------------------------------------------------------------------------
# normalization (affine parameters are per channel, the last axis)


def layer_norm_forward(x, gain, shift, eps: float = 1e-5):
    """Normalize each sample over all of its feature axes, then scale and shift."""
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + shift, (xhat, inv, gain, axes)


def layer_norm_backward(dout, cache):
    xhat, inv, gain, axes = cache
    sum_axes = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=sum_axes)
    dshift = dout.sum(axis=sum_axes)
    dxhat = dout * gain
    dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx, dgain, dshift


def batch_norm_forward(x, gain, shift, running_mean, running_var, mode: str,
                       momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization over batch and spatial axes.

    In train mode ``running_mean``/``running_var`` are updated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[-1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x - mu.astype(x.dtype, copy=False)) * inv
    return xhat * gain + shift, (xhat, inv, gain, axes, mode)


def batch_norm_backward(dout, cache):
    xhat, inv, gain, axes, mode = cache
    dgain = (dout * xhat).sum(axis=axes)
    dshift = dout.sum(axis=axes)
    dxhat = dout * gain
    if mode != "train":
        return dxhat * inv, dgain, dshift
    dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx, dgain, dshift


# ----------------------------------------------------------------------------
# dropout and dense


def dropout_forward(x, p: float = 0.1, mode: str = "eval", rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode != "train" or p == 0:
        return x, None
    rng = np.random.default_rng(rng)
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def linear_forward(x, w, b):
    """``x`` (B, in) times ``w`` (out, in) plus ``b``."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear layer expects {w.shape[1]} inputs, got {x.shape[1]}")
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)
