"""Bottleneck residual units: C2D, C3D (3x1x1 and 3x3x3) and CoST."""
from __future__ import annotations

from enum import Enum

import numpy as np

from .cost import CostConv
from .layers import BatchNorm, Conv3d, Module, ReLU


class UnitKind(str, Enum):
    C2D = "c2d"
    C3D_311 = "c3d311"
    C3D_333 = "c3d333"
    COST_A = "cost-a"
    COST_B = "cost-b"

    @property
    def is_cost(self):
        return self in (UnitKind.COST_A, UnitKind.COST_B)


class ResidualUnit(Module):
    """1x1x1 reduce -> middle op -> 1x1x1 expand, plus identity or projection shortcut.

    The middle op is ``1 x k x k`` (C2D, C3D 3x1x1), ``k x k x k`` (C3D 3x3x3) or
    a :class:`CostConv`. For C3D 3x1x1 the first conv is inflated to
    ``3 x 1 x 1``. Spatial striding happens in the middle op and the
    projection shortcut. The last BN starts with ``gamma = 0`` unless
    ``zero_init_residual=False``.
    """

    def __init__(self, kind, c_in, c_mid, c_out, stride=1, k=3, share=True,
                 rng=None, dtype=np.float64, zero_init_residual=True):
        kind = UnitKind(kind)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        self.c_in, self.c_mid, self.c_out, self.k = c_in, c_mid, c_out, k
        s = (1, stride, stride)
        first = (3, 1, 1) if kind is UnitKind.C3D_311 else (1, 1, 1)
        self.conv_a = Conv3d(c_in, c_mid, first, rng=rng, dtype=dtype)
        self.bn_a = BatchNorm(c_mid, dtype=dtype)
        self.relu_a = ReLU()
        if kind.is_cost:
            self.mid = CostConv(c_mid, c_mid, k, variant=kind.value[-1], share=share,
                                stride=s, rng=rng, dtype=dtype)
        elif kind is UnitKind.C3D_333:
            self.mid = Conv3d(c_mid, c_mid, (k, k, k), s, rng=rng, dtype=dtype)
        else:
            self.mid = Conv3d(c_mid, c_mid, (1, k, k), s, rng=rng, dtype=dtype)
        self.bn_b = BatchNorm(c_mid, dtype=dtype)
        self.relu_b = ReLU()
        self.conv_c = Conv3d(c_mid, c_out, (1, 1, 1), rng=rng, dtype=dtype)
        self.bn_c = BatchNorm(c_out, zero_gamma=zero_init_residual, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.proj = Conv3d(c_in, c_out, (1, 1, 1), s, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm(c_out, dtype=dtype)
        else:
            self.proj = None
        self.relu_out = ReLU()

    def _branch(self):
        return [self.conv_a, self.bn_a, self.relu_a, self.mid, self.bn_b, self.relu_b,
                self.conv_c, self.bn_c]

    def forward(self, x, train=False):
        y = x
        for layer in self._branch():
            y = layer.forward(y, train)
        sc = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x, train), train)
        return self.relu_out.forward(y + sc, train)

    def backward(self, dy):
        dy = self.relu_out.backward(dy)
        dx = dy
        for layer in reversed(self._branch()):
            dx = layer.backward(dx)
        if self.proj is None:
            return dx + dy
        return dx + self.proj.backward(self.proj_bn.backward(dy))


def c2d_unit(c_in, c_mid, c_out, stride=1, **kw):
    return ResidualUnit(UnitKind.C2D, c_in, c_mid, c_out, stride, **kw)


def c3d_311_unit(c_in, c_mid, c_out, stride=1, **kw):
    return ResidualUnit(UnitKind.C3D_311, c_in, c_mid, c_out, stride, **kw)


def c3d_333_unit(c_in, c_mid, c_out, stride=1, **kw):
    return ResidualUnit(UnitKind.C3D_333, c_in, c_mid, c_out, stride, **kw)


def cost_residual_unit(c_in, c_mid, c_out, stride=1, variant="b", **kw):
    kind = UnitKind.COST_A if variant == "a" else UnitKind.COST_B
    return ResidualUnit(kind, c_in, c_mid, c_out, stride, **kw)


def copy_weights_to_c2d(unit):
    """A C2D unit carrying the same weights as a shared-kernel CoST ``unit``.

    The CoST shared kernel becomes the ``1 x k x k`` middle kernel, so the two
    units agree exactly once ``alpha = [1, 0, 0]`` is injected.
    """
    twin = ResidualUnit(UnitKind.C2D, unit.c_in, unit.c_mid, unit.c_out,
                        stride=unit.mid.stride[1], k=unit.k, dtype=unit.conv_a.weight.data.dtype)
    src = dict(unit.named_tensors())
    for name, p in twin.named_tensors():
        if name == "mid.weight":
            p.data[...] = src["mid.shared_kernel"].data[:, :, None]
        else:
            p.data[...] = src[name].data
    return twin
