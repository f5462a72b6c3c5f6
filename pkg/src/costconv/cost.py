"""Collaborative spatiotemporal (CoST) convolution.

One ``k x k`` kernel bank is applied along the three orthogonal planes of a
``(t, h, w)`` volume: H-W (kernel ``1 x k x k``), T-W (``k x 1 x k``) and T-H
(``k x k x 1``). The three responses are mixed per output channel with
row-stochastic coefficients ``alpha`` whose columns are ordered (hw, tw, th).

Variant ``"a"`` learns ``alpha`` directly as softmaxed logits. Variant ``"b"``
predicts ``alpha`` per sample: global max pool of each view, a channel mixing
map shared by the three views, a 3 -> 3 map applied to every channel row, then
a row softmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Module, Param, kaiming

VIEWS = ("hw", "tw", "th")


def view_kernel(kernel, view):
    """Embed a ``(c_out, c_in, k, k)`` kernel as the 5D kernel of one view."""
    axis = {"hw": 2, "tw": 3, "th": 4}[view]
    return np.expand_dims(kernel, axis)


def _kernels(kernel):
    # a single array is shared; a 3-sequence means unshared per-view kernels
    if isinstance(kernel, np.ndarray):
        return (kernel, kernel, kernel)
    if len(kernel) != 3:
        raise T.ShapeError("expected one shared kernel or three per-view kernels")
    return tuple(kernel)


def _view_stride(stride):
    s = T._triple(stride)
    if s[0] != 1:
        raise T.UnsupportedConfig("CoST units do not stride along time")
    return s


def conv_three_views(x, kernel, stride=(1, 1, 1), return_cache=False):
    """Return ``(x_hw, x_tw, x_th)``: the shared kernel applied along each view."""
    kernels = _kernels(kernel)
    for kern in kernels:
        if kern.ndim != 4 or kern.shape[2] != kern.shape[3] or kern.shape[2] % 2 == 0:
            raise T.UnsupportedConfig(f"view kernels must be (c_out, c_in, k, k) with odd k, got {kern.shape}")
        if x.shape[-1] != kern.shape[1]:
            raise T.ShapeError(f"input has {x.shape[-1]} channels, kernel expects {kern.shape[1]}")
    stride = _view_stride(stride)
    views, cols = [], []
    for v, kern in zip(VIEWS, kernels):
        y, c = T.conv3d(x, view_kernel(kern, v), stride, "same", return_cols=True)
        views.append(y)
        cols.append(c)
    if return_cache:
        return tuple(views), (x, kernels, stride, cols)
    return tuple(views)


def conv_three_views_backward(dviews, cache):
    """Returns ``(dx, dkernels)`` with one kernel gradient per view.

    For a shared kernel the total gradient is the sum of the three.
    """
    x, kernels, stride, cols = cache
    dx = np.zeros_like(x)
    dks = []
    for v, kern, dv, c in zip(VIEWS, kernels, dviews, cols):
        d_in, dk5 = T.conv3d_backward(dv, x, view_kernel(kern, v), stride, "same", cols=c)
        dx += d_in
        dks.append(np.squeeze(dk5, axis={"hw": 2, "tw": 3, "th": 4}[v]))
    return dx, dks


def _alpha_b(alpha, ndim=5):
    # (c, 3) or (n, c, 3) -> broadcastable against (n, t, h, w, c) per view
    if alpha.ndim == 2:
        return [alpha[:, v] for v in range(3)]
    return [alpha[:, None, None, None, :, v] for v in range(3)]


def fuse_views(x_hw, x_tw, x_th, alpha):
    """Per-channel weighted sum of the three view responses.

    ``alpha`` is ``(c, 3)`` (same for every sample) or ``(n, c, 3)``.
    """
    if not (x_hw.shape == x_tw.shape == x_th.shape):
        raise T.ShapeError("view responses must share a shape")
    c = x_hw.shape[-1]
    if alpha.shape[-2:] != (c, 3) or (alpha.ndim == 3 and alpha.shape[0] != x_hw.shape[0]):
        raise T.ShapeError(f"alpha shape {alpha.shape} does not match {c} channels")
    a = _alpha_b(alpha)
    return a[0] * x_hw + a[1] * x_tw + a[2] * x_th


def fuse_views_backward(dy, views, alpha):
    """Returns ``(dviews, dalpha)`` with ``dalpha`` shaped like ``alpha``."""
    a = _alpha_b(alpha)
    dviews = tuple(dy * av for av in a)
    if alpha.ndim == 2:
        axes = (0, 1, 2, 3)
    else:
        axes = (1, 2, 3)
    dalpha = np.stack([(dy * v).sum(axis=axes) for v in views], axis=-1)
    return dviews, dalpha


@dataclass
class CoeffPredictor:
    """Weights of the per-sample coefficient predictor (variant b).

    ``conv1x1`` is ``(c, c)`` in (out, in) order and is shared by the three
    pooled view vectors; ``fc_w`` is ``(3, 3)`` in (in, out) order and is
    applied to every channel row of the ``(c, 3)`` matrix.
    """
    conv1x1: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray


def predict_alpha(views, pred, return_cache=False):
    """Sample-dependent coefficients ``(n, c, 3)`` from the three view responses."""
    pooled, idx = zip(*(T.global_max_pool_thw(v, return_index=True) for v in views))
    p = np.stack(pooled, axis=-1)                        # (n, c, 3)
    q = np.einsum("od,ndv->nov", pred.conv1x1, p)        # shared channel map per view
    z = q @ pred.fc_w + pred.fc_b                        # fc over each channel row
    alpha = T.softmax_rows(z)
    if return_cache:
        return alpha, (p, q, idx, [v.shape for v in views])
    return alpha


def predict_alpha_backward(dalpha, alpha, pred, cache):
    """Returns ``(dviews, grads)`` where grads has conv1x1/fc_w/fc_b entries."""
    p, q, idx, shapes = cache
    dz = T.softmax_rows_backward(dalpha, alpha)
    grads = {
        "fc_w": np.einsum("ncv,ncu->vu", q, dz),
        "fc_b": dz.sum(axis=(0, 1)),
    }
    dq = dz @ pred.fc_w.T
    grads["conv1x1"] = np.einsum("nov,ndv->od", dq, p)
    dp = np.einsum("od,nov->ndv", pred.conv1x1, dq)
    dviews = tuple(T.global_max_pool_thw_backward(dp[..., v], shapes[v], idx[v]) for v in range(3))
    return dviews, grads


def cost_a_forward(x, kernel, logits, stride=(1, 1, 1), return_cache=False):
    """CoST(a): ``alpha = softmax(logits)`` shared by every sample."""
    views, vcache = conv_three_views(x, kernel, stride, return_cache=True)
    alpha = T.softmax_rows(logits)
    y = fuse_views(*views, alpha)
    if return_cache:
        return y, alpha, {"variant": "a", "views": views, "vcache": vcache, "alpha": alpha}
    return y, alpha


def cost_b_forward(x, kernel, pred, stride=(1, 1, 1), return_cache=False):
    """CoST(b): ``alpha`` predicted per sample from the view responses."""
    views, vcache = conv_three_views(x, kernel, stride, return_cache=True)
    alpha, pcache = predict_alpha(views, pred, return_cache=True)
    y = fuse_views(*views, alpha)
    if return_cache:
        return y, alpha, {"variant": "b", "views": views, "vcache": vcache, "alpha": alpha,
                          "pred": pred, "pcache": pcache}
    return y, alpha


def cost_injected_forward(x, kernel, alpha, stride=(1, 1, 1), return_cache=False):
    """Fuse with externally supplied coefficients (no softmax, no predictor)."""
    views, vcache = conv_three_views(x, kernel, stride, return_cache=True)
    y = fuse_views(*views, alpha)
    if return_cache:
        return y, alpha, {"variant": "injected", "views": views, "vcache": vcache, "alpha": alpha}
    return y, alpha


def cost_backward(cache, dy):
    """Analytic gradients of a CoST forward.

    Returns a dict with ``x``, ``kernel`` (summed over views when shared) or
    ``kernels`` (per view), and ``logits`` (variant a) or
    ``pred_conv1x1``/``pred_fc_w``/``pred_fc_b`` (variant b).
    """
    views, alpha = cache["views"], cache["alpha"]
    dviews, dalpha = fuse_views_backward(dy, views, alpha)
    out = {}
    if cache["variant"] == "a":
        out["logits"] = T.softmax_rows_backward(dalpha, alpha)
    elif cache["variant"] == "b":
        dv_pred, g = predict_alpha_backward(dalpha, alpha, cache["pred"], cache["pcache"])
        dviews = tuple(a + b for a, b in zip(dviews, dv_pred))
        out.update({"pred_conv1x1": g["conv1x1"], "pred_fc_w": g["fc_w"], "pred_fc_b": g["fc_b"]})
    dx, dks = conv_three_views_backward(dviews, cache["vcache"])
    out["x"] = dx
    out["kernels"] = dks
    out["kernel"] = dks[0] + dks[1] + dks[2]
    return out


class CostConv(Module):
    """The CoST operation as a layer.

    ``share=False`` gives each view its own kernel (the weight-sharing
    ablation). Coefficients start uniform: zero logits for variant a, identity
    channel map and zero fc for variant b.
    """

    def __init__(self, c_in, c_out, k=3, variant="b", share=True, stride=(1, 1, 1),
                 rng=None, dtype=np.float64):
        if variant not in ("a", "b"):
            raise ValueError(f"variant must be 'a' or 'b', got {variant!r}")
        if k % 2 == 0:
            raise T.UnsupportedConfig("CoST kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k, self.variant, self.share = k, variant, share
        self.stride = _view_stride(stride)
        shape = (c_out, c_in, k, k)
        fan_in = c_in * k * k
        if share:
            self.shared_kernel = Param(kaiming(rng, shape, fan_in, dtype), "shared_kernel", decay=True)
        else:
            self.kernel_hw = Param(kaiming(rng, shape, fan_in, dtype), "view_kernel", decay=True)
            self.kernel_tw = Param(kaiming(rng, shape, fan_in, dtype), "view_kernel", decay=True)
            self.kernel_th = Param(kaiming(rng, shape, fan_in, dtype), "view_kernel", decay=True)
        if variant == "a":
            self.coeff_logits = Param(np.zeros((c_out, 3), dtype=dtype), "coeff_logits")
        else:
            self.pred_conv1x1 = Param(np.eye(c_out, dtype=dtype), "pred_conv1x1", decay=True)
            self.pred_fc_w = Param(np.zeros((3, 3), dtype=dtype), "pred_fc_w", decay=True)
            self.pred_fc_b = Param(np.zeros(3, dtype=dtype), "pred_fc_b")
        self.injected_alpha = None
        self.last_alpha = None
        self.out_shape = None

    @property
    def kernel(self):
        if self.share:
            return self.shared_kernel.data
        return (self.kernel_hw.data, self.kernel_tw.data, self.kernel_th.data)

    @property
    def predictor(self):
        return CoeffPredictor(self.pred_conv1x1.data, self.pred_fc_w.data, self.pred_fc_b.data)

    def inject_coefficients(self, alpha, raw=False):
        """Force ``alpha`` (``(c_out, 3)``) verbatim; ``None`` restores learning.

        Rows must be row-stochastic unless ``raw=True``.
        """
        if alpha is None:
            self.injected_alpha = None
            return self
        alpha = np.asarray(alpha, dtype=np.float64)
        c_out = self.shared_kernel.data.shape[0] if self.share else self.kernel_hw.data.shape[0]
        if alpha.ndim == 1:
            alpha = np.broadcast_to(alpha, (c_out, alpha.shape[0]))
        if alpha.shape[-1] != 3:
            raise T.ShapeError(f"injected coefficient rows must have length 3, got {alpha.shape}")
        if alpha.shape != (c_out, 3):
            raise T.ShapeError(f"injected coefficients must be ({c_out}, 3), got {alpha.shape}")
        if not raw and (np.any(alpha < 0) or not np.allclose(alpha.sum(axis=1), 1.0, atol=1e-6)):
            raise ValueError("injected coefficients are not row-stochastic; pass raw=True to force")
        self.injected_alpha = np.array(alpha, dtype=self._dtype())
        return self

    def _dtype(self):
        return self.kernel.dtype if self.share else self.kernel[0].dtype

    def forward(self, x, train=False):
        if self.injected_alpha is not None:
            y, alpha, cache = cost_injected_forward(x, self.kernel, self.injected_alpha, self.stride, True)
        elif self.variant == "a":
            y, alpha, cache = cost_a_forward(x, self.kernel, self.coeff_logits.data, self.stride, True)
        else:
            y, alpha, cache = cost_b_forward(x, self.kernel, self.predictor, self.stride, True)
        self._cache = cache
        self.last_alpha = alpha
        self.out_shape = y.shape
        return y

    def backward(self, dy):
        g = cost_backward(self._cache, dy)
        if self.share:
            self.shared_kernel.grad += g["kernel"]
        else:
            self.kernel_hw.grad += g["kernels"][0]
            self.kernel_tw.grad += g["kernels"][1]
            self.kernel_th.grad += g["kernels"][2]
        if "logits" in g:
            self.coeff_logits.grad += g["logits"]
        if "pred_conv1x1" in g:
            self.pred_conv1x1.grad += g["pred_conv1x1"]
            self.pred_fc_w.grad += g["pred_fc_w"]
            self.pred_fc_b.grad += g["pred_fc_b"]
        return g["x"]


def inject_coefficients(target, alpha, raw=False):
    """Inject ``alpha`` into every CoST layer of ``target`` (a layer, unit or network)."""
    found = False
    for m in target.modules():
        if isinstance(m, CostConv):
            m.inject_coefficients(alpha, raw=raw)
            found = True
    if not found:
        raise ValueError("no CoST layer found")
    return target
