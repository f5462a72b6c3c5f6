"""Micro ResNet video classifiers assembled from a declarative config."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialization
from .layers import BatchNorm, Conv3d, GlobalAvgPool, Linear, MaxPool3d, Module, ReLU
from .units import ResidualUnit, UnitKind


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    """Layout of a micro video ResNet.

    ``blocks`` lists ``(unit_count, c_mid, c_out, spatial_stride)``. Within each
    block, unit ``i`` uses ``unit_kind`` when ``i % cost_every_n == cost_offset``
    and is a C2D unit otherwise.
    """
    input_shape: tuple = (8, 32, 32, 3)
    stem_channels: int = 8
    stem_kernel: tuple = (1, 5, 5)
    stem_stride: tuple = (1, 2, 2)
    stem_pool: bool = True
    blocks: list = field(default_factory=lambda: [(2, 8, 32, 1), (2, 16, 64, 2), (2, 32, 128, 2)])
    temporal_pool_after_block1: bool = True
    temporal_pool_window: int = 1
    unit_kind: str = "cost-b"
    cost_every_n: int = 2
    cost_offset: int = 1
    kernel_size: int = 3
    share_weights: bool = True
    num_classes: int = 8
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.stem_kernel = tuple(self.stem_kernel)
        self.stem_stride = tuple(self.stem_stride)
        self.blocks = [tuple(b) for b in self.blocks]

    def validate(self):
        try:
            UnitKind(self.unit_kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.cost_every_n < 1:
            raise ConfigError("cost_every_n must be >= 1")
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (t, h, w, c), got {self.input_shape}")
        if not self.blocks:
            raise ConfigError("at least one block is required")
        for b in self.blocks:
            if len(b) != 4 or min(b) < 1:
                raise ConfigError(f"bad block spec {b}; expected (unit_count, c_mid, c_out, stride)")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stem_kernel"] = list(self.stem_kernel)
        d["stem_stride"] = list(self.stem_stride)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def placement(self):
        """Per block, the unit kind of every unit."""
        special = UnitKind(self.unit_kind)
        out = []
        for count, *_ in self.blocks:
            out.append([special if i % self.cost_every_n == self.cost_offset % self.cost_every_n
                        else UnitKind.C2D for i in range(count)])
        return out


class Network(Module):
    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        c_in = cfg.input_shape[-1]
        self.stem = Conv3d(c_in, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, rng=rng, dtype=dtype)
        # input gradients are never needed for training
        self.stem.need_input_grad = False
        self.stem_bn = BatchNorm(cfg.stem_channels, dtype=dtype)
        self.stem_relu = ReLU()
        self.stem_pool = MaxPool3d((1, 3, 3), (1, 2, 2), "same") if cfg.stem_pool else None
        self.units = []
        self.block_of_unit = []
        c = cfg.stem_channels
        for b, ((count, c_mid, c_out, stride), kinds) in enumerate(zip(cfg.blocks, cfg.placement())):
            for i, kind in enumerate(kinds):
                self.units.append(ResidualUnit(kind, c, c_mid, c_out, stride if i == 0 else 1,
                                               k=cfg.kernel_size, share=cfg.share_weights,
                                               rng=rng, dtype=dtype))
                self.block_of_unit.append(b)
                c = c_out
        if cfg.temporal_pool_after_block1:
            w = cfg.temporal_pool_window
            self.temporal_pool = MaxPool3d((w, 1, 1), (2, 1, 1), "same")
        else:
            self.temporal_pool = None
        self.gap = GlobalAvgPool()
        self.fc = Linear(c, cfg.num_classes, rng=rng, dtype=dtype)

    def _sequence(self):
        seq = [self.stem, self.stem_bn, self.stem_relu]
        if self.stem_pool is not None:
            seq.append(self.stem_pool)
        for i, unit in enumerate(self.units):
            seq.append(unit)
            last_of_block1 = self.block_of_unit[i] == 0 and (
                i + 1 == len(self.units) or self.block_of_unit[i + 1] != 0)
            if last_of_block1 and self.temporal_pool is not None:
                seq.append(self.temporal_pool)
        return seq + [self.gap, self.fc]

    def forward(self, x, train=False):
        if x.ndim != 5 or tuple(x.shape[1:]) != tuple(self.cfg.input_shape):
            raise ValueError(f"expected input (n, {self.cfg.input_shape}), got {x.shape}")
        x = x.astype(self.cfg.dtype, copy=False)
        for layer in self._sequence():
            x = layer.forward(x, train)
        return x

    def backward(self, dlogits):
        d = dlogits
        for layer in reversed(self._sequence()):
            d = layer.backward(d)
        return d

    def cost_layers(self):
        """``(name, depth_index, CostConv)`` for every CoST layer, shallow to deep."""
        from .cost import CostConv
        out = []
        for i, unit in enumerate(self.units):
            if isinstance(unit.mid, CostConv):
                out.append((f"units.{i}.mid", i, unit.mid))
        return out

    def state(self):
        return {name: p.data for name, p in self.named_tensors()}

    def roles(self):
        return {name: p.role for name, p in self.named_tensors()}

    def load_state(self, tensors):
        own = dict(self.named_tensors())
        missing = set(own) - set(tensors)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = tensors[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr


def build_network(cfg):
    if isinstance(cfg, dict):
        cfg = NetworkConfig.from_dict(cfg)
    return Network(cfg)


def save_network(net, directory, extra_tensors=None, meta=None):
    tensors = dict(net.state())
    roles = net.roles()
    for name, arr in (extra_tensors or {}).items():
        tensors[name] = arr
        roles[name] = "optimizer_state"
    payload = {"network_config": net.cfg.to_dict()}
    payload.update(meta or {})
    return serialization.save_bundle(directory, tensors, roles, payload)


def load_network(directory):
    """Returns ``(net, extra_tensors, meta)``."""
    tensors, roles, meta = serialization.load_bundle(directory)
    net = build_network(NetworkConfig.from_dict(meta["network_config"]))
    own = {name for name, _ in net.named_tensors()}
    net.load_state({k: v for k, v in tensors.items() if k in own})
    extra = {k: v for k, v in tensors.items() if k not in own}
    return net, extra, meta


def c2d_twin(net):
    """A C2D network holding the same weights as a shared-kernel CoST ``net``."""
    cfg = NetworkConfig.from_dict({**net.cfg.to_dict(), "unit_kind": "c2d"})
    twin = build_network(cfg)
    src = dict(net.named_tensors())
    for name, p in twin.named_tensors():
        if name.endswith("mid.weight") and name not in src:
            p.data[...] = src[name[:-len("weight")] + "shared_kernel"].data[:, :, None]
        else:
            p.data[...] = src[name].data
    return twin


def load_config(path):
    with open(path) as fh:
        return NetworkConfig.from_dict(json.load(fh))
