"""Dense channels-last video tensor primitives with hand-written backward passes.

A video tensor is a plain ``numpy.ndarray`` of shape ``(n, t, h, w, c)``.
Every forward function returns its output; the matching ``*_backward``
function takes the upstream gradient plus whatever the forward needed.

Convolutions are cross-correlations (no kernel flip). Kernels are stored as
``(c_out, c_in, kt, kh, kw)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised on inconsistent tensor/kernel shapes."""


class UnsupportedConfig(ValueError):
    """Raised for configurations the primitives deliberately do not handle."""


def check_video(x, name="x"):
    """Validate the rank-5 video tensor invariants and return ``x``."""
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeError(f"{name} must be rank 5 (n, t, h, w, c), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return x


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


def _same_pads(ksize, padding):
    if padding == "valid":
        return (0, 0, 0)
    if padding != "same":
        raise UnsupportedConfig(f"padding must be 'same' or 'valid', got {padding!r}")
    if any(k % 2 == 0 for k in ksize):
        raise UnsupportedConfig(f"'same' padding needs odd kernel extents, got {ksize}")
    return tuple(k // 2 for k in ksize)


def _out_len(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _pad_thw(x, pads, value=0.0):
    if not any(pads):
        return x
    width = ((0, 0),) + tuple((p, p) for p in pads) + ((0, 0),)
    return np.pad(x, width, mode="constant", constant_values=value)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def im2col(x, ksize, stride=(1, 1, 1), padding="same"):
    """Unfold ``x`` into a ``(n*to*ho*wo, kt*kh*kw*c)`` patch matrix.

    Columns are tap-major, ``(kt, kh, kw, c)``; :func:`kernel_matrix` produces
    the matching ``(c_out, kt*kh*kw*c)`` weight layout.
    """
    ksize, stride = _triple(ksize), _triple(stride)
    pads = _same_pads(ksize, padding)
    xp = _pad_thw(x, pads)
    n, c = x.shape[0], x.shape[-1]
    out = tuple(_out_len(x.shape[i + 1], ksize[i], stride[i], pads[i]) for i in range(3))
    if min(out) < 1:
        raise ShapeError(f"kernel {ksize} larger than input {x.shape[1:4]}")
    st, sh, sw = stride
    cols = np.empty((n,) + out + ksize + (c,), dtype=x.dtype)
    for a in range(ksize[0]):
        for b in range(ksize[1]):
            for e in range(ksize[2]):
                cols[:, :, :, :, a, b, e, :] = xp[:, a:a + st * out[0]:st, b:b + sh * out[1]:sh,
                                                  e:e + sw * out[2]:sw, :]
    return cols.reshape(n * out[0] * out[1] * out[2], -1), (n,) + out


def col2im(dcols, x_shape, ksize, stride=(1, 1, 1), padding="same"):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to ``x``."""
    ksize, stride = _triple(ksize), _triple(stride)
    pads = _same_pads(ksize, padding)
    n, t, h, w, c = x_shape
    out = tuple(_out_len(x_shape[i + 1], ksize[i], stride[i], pads[i]) for i in range(3))
    d = dcols.reshape((n,) + out + ksize + (c,))
    dxp = np.zeros((n, t + 2 * pads[0], h + 2 * pads[1], w + 2 * pads[2], c), dtype=dcols.dtype)
    st, sh, sw = stride
    for a in range(ksize[0]):
        for b in range(ksize[1]):
            for e in range(ksize[2]):
                dxp[:, a:a + st * out[0]:st, b:b + sh * out[1]:sh, e:e + sw * out[2]:sw, :] += d[:, :, :, :, a, b, e, :]
    return dxp[:, pads[0]:pads[0] + t, pads[1]:pads[1] + h, pads[2]:pads[2] + w, :]


def kernel_matrix(kernel):
    """``(c_out, c_in, kt, kh, kw)`` -> ``(c_out, kt*kh*kw*c_in)`` matching :func:`im2col`."""
    return kernel.transpose(0, 2, 3, 4, 1).reshape(kernel.shape[0], -1)


def _is_pointwise(ksize, stride):
    return ksize == (1, 1, 1)


def conv3d(x, kernel, stride=(1, 1, 1), padding="same", return_cols=False):
    """3D cross-correlation of a channels-last video with ``kernel``.

    ``kernel`` has shape ``(c_out, c_in, kt, kh, kw)``. With ``padding='same'``
    and unit stride the (t, h, w) extent is preserved; strided convolutions pad
    as for 'same' and then subsample.
    """
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects rank-5 input and kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in = kernel.shape[:2]
    if x.shape[-1] != c_in:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {c_in}")
    ksize, stride = tuple(kernel.shape[2:]), _triple(stride)
    if _is_pointwise(ksize, stride):
        xs = x[:, ::stride[0], ::stride[1], ::stride[2], :]
        cols = xs.reshape(-1, c_in)
        out_shape = xs.shape[:4]
    else:
        cols, out_shape = im2col(x, ksize, stride, padding)
    y = (cols @ kernel_matrix(kernel).T).reshape(out_shape + (c_out,))
    if return_cols:
        return y, cols
    return y


def conv3d_backward(dy, x, kernel, stride=(1, 1, 1), padding="same", cols=None, need_dx=True):
    """Gradients ``(dx, dkernel)`` of :func:`conv3d`; ``dx`` is ``None`` unless ``need_dx``."""
    c_out, c_in = kernel.shape[:2]
    ksize, stride = tuple(kernel.shape[2:]), _triple(stride)
    dy2 = dy.reshape(-1, c_out)
    if _is_pointwise(ksize, stride):
        if cols is None:
            cols = x[:, ::stride[0], ::stride[1], ::stride[2], :].reshape(-1, c_in)
        dkernel = (dy2.T @ cols).reshape(kernel.shape)
        if not need_dx:
            return None, dkernel
        dxs = (dy2 @ kernel.reshape(c_out, c_in)).reshape(dy.shape[:4] + (c_in,))
        if stride == (1, 1, 1):
            return dxs, dkernel
        dx = np.zeros_like(x)
        dx[:, ::stride[0], ::stride[1], ::stride[2], :] = dxs
        return dx, dkernel
    if cols is None:
        cols, _ = im2col(x, ksize, stride, padding)
    kt, kh, kw = ksize
    dkernel = (dy2.T @ cols).reshape(c_out, kt, kh, kw, c_in).transpose(0, 4, 1, 2, 3)
    if not need_dx:
        return None, dkernel
    dcols = dy2 @ kernel_matrix(kernel)
    dx = col2im(dcols, x.shape, ksize, stride, padding)
    return dx, dkernel


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def _pool_windows(x, window, stride, padding):
    window, stride = _triple(window), _triple(stride)
    pads = _same_pads(window, padding)
    for i in range(3):
        if x.shape[i + 1] + 2 * pads[i] < window[i]:
            raise ShapeError(f"pool window {window} larger than input {x.shape[1:4]}")
    xp = _pad_thw(x, pads, value=-np.inf)
    out = tuple(_out_len(x.shape[i + 1], window[i], stride[i], pads[i]) for i in range(3))
    win = sliding_window_view(xp, window, axis=(1, 2, 3))
    win = win[:, ::stride[0], ::stride[1], ::stride[2]][:, :out[0], :out[1], :out[2]]
    return win.reshape(win.shape[:5] + (-1,)), window, stride, pads, out


def max_pool(x, window, stride, padding="valid", return_index=False):
    """Max pooling over (t, h, w) windows. 'same' padding pads with -inf."""
    win, *_ = _pool_windows(x, window, stride, padding)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if return_index:
        return y, idx
    return y


def max_pool_backward(dy, x_shape, idx, window, stride, padding="valid"):
    window, stride = _triple(window), _triple(stride)
    pads = _same_pads(window, padding)
    n, t, h, w, c = x_shape
    out = dy.shape[1:4]
    dxp = np.zeros((n, t + 2 * pads[0], h + 2 * pads[1], w + 2 * pads[2], c), dtype=dy.dtype)
    st, sh, sw = stride
    tap = 0
    for a in range(window[0]):
        for b in range(window[1]):
            for e in range(window[2]):
                dxp[:, a:a + st * out[0]:st, b:b + sh * out[1]:sh, e:e + sw * out[2]:sw, :] += np.where(idx == tap, dy, 0.0)
                tap += 1
    return dxp[:, pads[0]:pads[0] + t, pads[1]:pads[1] + h, pads[2]:pads[2] + w, :]


def global_max_pool_thw(x, return_index=False):
    """Per-sample, per-channel maximum over all (t, h, w) positions -> ``(n, c)``."""
    n, c = x.shape[0], x.shape[-1]
    flat = x.reshape(n, -1, c)
    idx = np.argmax(flat, axis=1)
    y = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
    if return_index:
        return y, idx
    return y


def global_max_pool_thw_backward(dy, x_shape, idx):
    n, c = x_shape[0], x_shape[-1]
    dflat = np.zeros((n, int(np.prod(x_shape[1:4])), c), dtype=dy.dtype)
    np.put_along_axis(dflat, idx[:, None, :], dy[:, None, :], axis=1)
    return dflat.reshape(x_shape)


def global_avg_pool_thw(x):
    return x.mean(axis=(1, 2, 3))


def global_avg_pool_thw_backward(dy, x_shape):
    count = x_shape[1] * x_shape[2] * x_shape[3]
    return np.broadcast_to((dy / count)[:, None, None, None, :], x_shape).copy()


# --------------------------------------------------------------------------
# dense layers and activations
# --------------------------------------------------------------------------

def linear(x, weight, bias):
    """``x @ weight + bias`` with ``weight`` shaped ``(d_in, d_out)``."""
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[-1]:
        raise ShapeError(f"linear: {x.shape} @ {weight.shape} + {bias.shape}")
    return x @ weight + bias


def linear_backward(dy, x, weight):
    """Returns ``(dx, dweight, dbias)``."""
    d_in = weight.shape[0]
    x2 = x.reshape(-1, d_in)
    dy2 = dy.reshape(-1, weight.shape[1])
    return dy @ weight.T, x2.T @ dy2, dy2.sum(axis=0)


def softmax_rows(m):
    """Softmax along the last axis, max-subtracted for stability."""
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(dp, p):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, y):
    return np.where(y > 0, dy, 0.0)


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over (n, t, h, w).

    In train mode the running statistics are updated in place
    (``running = momentum * running + (1 - momentum) * batch``) and the
    returned cache feeds :func:`batch_norm_backward`. Eval mode uses the
    running statistics and returns a ``None`` cache.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if not train:
        scale = gamma / np.sqrt(running_var + eps)
        return x * scale + (beta - running_mean * scale), None
    axes = tuple(range(x.ndim - 1))
    count = x.size // c
    mean = x.mean(axis=axes)
    xc = x - mean
    var = (xc * xc).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    unbiased = var * count / max(count - 1, 1)
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mean
    running_var *= momentum
    running_var += (1.0 - momentum) * unbiased
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def batch_norm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)`` for a train-mode forward."""
    xhat, inv_std, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    count = dy.size // dy.shape[-1]
    dx = (gamma * inv_std / count) * (count * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


def batch_norm_eval_backward(dy, gamma, running_var, eps=BN_EPS):
    return dy * (gamma / np.sqrt(running_var + eps))
