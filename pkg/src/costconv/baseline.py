"""Relations between CoST and C2D/C3D: equivalent cubic kernels, receptive
field counting and parameter / multiply-add accounting."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .cost import (CostConv, _kernels, _view_stride, conv_three_views, conv_three_views_backward,
                   fuse_views, fuse_views_backward)
from .layers import BatchNorm, Conv3d, Linear, Module


def cost_to_masked_c3d_kernel(kernel, alpha):
    """Build the ``(c_out, c_in, k, k, k)`` kernel equivalent to a fused CoST op.

    ``kernel`` is the shared ``(c_out, c_in, k, k)`` bank (or three per-view
    banks) and ``alpha`` the ``(c_out, 3)`` coefficients. Each view's kernel is
    written into its central plane; the three planes overlap on the centre
    column where contributions add. Voxels outside all three planes stay zero.
    """
    k_hw, k_tw, k_th = _kernels(kernel)
    k = k_hw.shape[-1]
    if k % 2 == 0:
        raise T.UnsupportedConfig("masked C3D kernel needs odd k")
    alpha = np.asarray(alpha)
    if alpha.ndim != 2:
        raise T.ShapeError("the equivalent kernel needs sample-independent alpha (c_out, 3)")
    m = k // 2
    a = alpha[:, :, None, None, None]
    K = np.zeros(k_hw.shape[:2] + (k, k, k), dtype=np.result_type(k_hw, alpha))
    K[:, :, m, :, :] += a[:, 0] * k_hw
    K[:, :, :, m, :] += a[:, 1] * k_tw
    K[:, :, :, :, m] += a[:, 2] * k_th
    return K


def cost_support_mask(k):
    """Boolean ``(k, k, k)`` mask of voxels lying on at least one central plane."""
    m = k // 2
    idx = np.indices((k, k, k))
    return (idx[0] == m) | (idx[1] == m) | (idx[2] == m)


def cost_fused_optimized(x, kernel, alpha, stride=(1, 1, 1)):
    """Fused CoST output visiting each of the ``3k^2 - 3k + 1`` taps once.

    Equivalent to ``fuse_views(*conv_three_views(x, kernel), alpha)``; the
    centre-column taps shared by several views are computed a single time.
    ``alpha`` may be ``(c_out, 3)`` or per sample ``(n, c_out, 3)``.
    """
    stride = _view_stride(stride)
    k = _kernels(kernel)[0].shape[-1]
    mask = cost_support_mask(k)
    pads = (k // 2,) * 3
    xp = T._pad_thw(x, pads)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    out = tuple((x.shape[i + 1] - 1) // stride[i] + 1 for i in range(3))
    win = win[:, ::stride[0], ::stride[1], ::stride[2]][:, :out[0], :out[1], :out[2]]
    cols = win[..., mask]                                     # (n, to, ho, wo, c_in, taps)
    n = x.shape[0]
    cols = cols.reshape(n, -1, cols.shape[-2] * cols.shape[-1])
    alphas = alpha if np.ndim(alpha) == 3 else [alpha] * n
    ys = []
    for i in range(n):
        K = cost_to_masked_c3d_kernel(kernel, alphas[i])[..., mask]   # (c_out, c_in, taps)
        ys.append(cols[i] @ K.reshape(K.shape[0], -1).T)
    return np.stack(ys).reshape((n,) + out + (ys[0].shape[-1],))


# --------------------------------------------------------------------------
# receptive field
# --------------------------------------------------------------------------

def _influence_count(forward, k):
    size = 2 * k + 1
    x = np.zeros((1, size, size, size, 1))
    _, backward = forward(x)
    dy = np.zeros((1, size, size, size, 1))
    dy[0, k, k, k, 0] = 1.0
    return int(np.count_nonzero(backward(dy)))


def receptive_field_count(kind, k=3, seed=0):
    """Input voxels influencing one centred output voxel (unit stride, same padding).

    ``kind`` is ``"cost"``, ``"c3d333"`` or ``"c2d"``. Influence is measured
    through the input gradient with strictly positive random weights, so a zero
    means structurally disconnected rather than cancelled.
    """
    rng = np.random.default_rng(seed)
    if kind == "cost":
        w = rng.uniform(0.5, 1.5, size=(1, 1, k, k))
        alpha = rng.dirichlet(np.ones(3), size=1)

        def fwd(x):
            views, cache = conv_three_views(x, w, return_cache=True)
            return fuse_views(*views, alpha), lambda dy: conv_three_views_backward(
                fuse_views_backward(dy, views, alpha)[0], cache)[0]
    elif kind in ("c3d333", "c2d"):
        shape = (1, 1, k, k, k) if kind == "c3d333" else (1, 1, 1, k, k)
        w5 = rng.uniform(0.5, 1.5, size=shape)

        def fwd(x):
            return T.conv3d(x, w5), lambda dy: T.conv3d_backward(dy, x, w5)[0]
    else:
        raise ValueError(f"unknown op kind {kind!r}")
    return _influence_count(fwd, k)


# --------------------------------------------------------------------------
# parameter and multiply-add accounting
# --------------------------------------------------------------------------

def per_element_factors(k):
    """Kernel multiply-adds per output element and input channel."""
    return {"c2d": k * k, "cost_naive": 3 * k * k, "cost_opt": 3 * k * k - 3 * k + 1, "c3d": k ** 3}


def k_sweep(ks=(3, 5, 7)):
    rows = []
    for k in ks:
        f = per_element_factors(k)
        saving = (f["cost_naive"] - f["cost_opt"]) / f["cost_naive"]
        rows.append({"k": k, **f, "receptive_cost": f["cost_opt"], "receptive_c3d": k ** 3,
                     "opt_saving": saving})
    return rows


@dataclass
class CostRow:
    layer: str
    kind: str
    params: int
    ma_naive: int
    ma_opt: int
    ma_fusion: int = 0


@dataclass
class OpCostReport:
    rows: list = field(default_factory=list)

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def multiply_adds_naive(self):
        return sum(r.ma_naive for r in self.rows)

    @property
    def multiply_adds_optimized(self):
        return sum(r.ma_opt for r in self.rows)

    @property
    def multiply_adds_fusion(self):
        return sum(r.ma_fusion for r in self.rows)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "params", "ma_naive", "ma_opt", "ma_fusion"])
        for r in self.rows:
            w.writerow([r.layer, r.kind, r.params, r.ma_naive, r.ma_opt, r.ma_fusion])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "params": self.params,
            "multiply_adds_naive": self.multiply_adds_naive,
            "multiply_adds_optimized": self.multiply_adds_optimized,
            "multiply_adds_fusion": self.multiply_adds_fusion,
            "rows": [asdict(r) for r in self.rows],
        }, indent=1)


def _layer_row(name, m):
    params = sum(p.data.size for _, p in m.named_parameters())
    if isinstance(m, CostConv):
        c_out, c_in = (m.shared_kernel if m.share else m.kernel_hw).data.shape[:2]
        k = m.k
        out_elems = int(np.prod(m.out_shape[1:4])) * c_out
        f = per_element_factors(k)
        return CostRow(name, f"cost-{m.variant}" + ("" if m.share else "-noshare"), params,
                       out_elems * f["cost_naive"] * c_in, out_elems * f["cost_opt"] * c_in, out_elems * 3)
    if isinstance(m, Conv3d):
        c_out, c_in = m.weight.data.shape[:2]
        taps = int(np.prod(m.ksize))
        ma = int(np.prod(m.out_shape[1:4])) * c_out * taps * c_in
        return CostRow(name, "conv{}x{}x{}".format(*m.ksize), params, ma, ma)
    if isinstance(m, Linear):
        ma = m.weight.data.size
        return CostRow(name, "linear", params, ma, ma)
    if isinstance(m, BatchNorm):
        return CostRow(name, "bn", params, 0, 0)
    return None


def count_cost(module, input_shape):
    """Exact per-layer parameter and kernel multiply-add counts for one sample.

    ``input_shape`` is ``(t, h, w, c)``. BN, ReLU and pooling contribute no
    multiply-adds; CoST fusion multiply-adds are reported in ``ma_fusion``.
    """
    dtype = next(iter(module.named_tensors()))[1].data.dtype
    module.forward(np.zeros((1,) + tuple(input_shape), dtype=dtype), train=False)
    rows = []
    for name, m in _named_modules(module):
        row = _layer_row(name, m)
        if row is not None:
            rows.append(row)
    return OpCostReport(rows)


def _named_modules(module, prefix=""):
    yield prefix.rstrip(".") or "root", module
    for key, val in vars(module).items():
        if isinstance(val, Module):
            yield from _named_modules(val, f"{prefix}{key}.")
        elif isinstance(val, list) and val and isinstance(val[0], Module):
            for i, m in enumerate(val):
                yield from _named_modules(m, f"{prefix}{key}.{i}.")
