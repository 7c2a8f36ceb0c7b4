"""Inverted-residual feature trunk emitting C3/C4/C5 at strides 8/16/32."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import functional as F
from .config import BackboneConfig, make_divisible
from .errors import ConfigError, ShapeError
from .functional import ConvSpec
from .nn import BatchNorm2d, Conv2d, Dense, Module, count_parameters
from .tensor import Tensor


@dataclass
class PyramidFeatures:
    c3: Optional[Tensor] = None
    c4: Optional[Tensor] = None
    c5: Optional[Tensor] = None
    p3: Optional[Tensor] = None
    p4: Optional[Tensor] = None
    p5: Optional[Tensor] = None

    def c_levels(self) -> List[Tensor]:
        return [self.c3, self.c4, self.c5]

    def p_levels(self) -> List[Tensor]:
        return [self.p3, self.p4, self.p5]


class SqueezeExcite(Module):
    """Channel gate ``sigmoid(W1 relu(W0 GAP(x)))`` applied multiplicatively."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.fc0 = Dense(channels, hidden, rng)
        self.fc1 = Dense(hidden, channels, rng, gain=1.0)
        self.last_gate: Optional[np.ndarray] = None

    def gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        s = F.global_avg_pool(x).reshape(n, c)
        g = F.sigmoid(self.fc1(F.relu(self.fc0(s))))
        self.last_gate = g.data
        return g.reshape(n, c, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return F.elementwise(x, self.gate(x), "mul_broadcast_channel")


class InvertedResidual(Module):
    def __init__(self, cin: int, cout: int, expansion: float, kernel: int, stride: int,
                 se: bool, act: str, rng: np.random.Generator):
        mid = make_divisible(cin * expansion)
        self.act = act
        self.stride = stride
        self.use_residual = stride == 1 and cin == cout
        if mid != cin:
            self.expand = Conv2d(ConvSpec(cin, mid, 1), rng)
            self.expand_bn = BatchNorm2d(mid)
        else:
            self.expand = None
            self.expand_bn = None
        self.dw = Conv2d(ConvSpec.same(mid, mid, kernel, stride=stride, groups=mid), rng)
        self.dw_bn = BatchNorm2d(mid)
        self.se = SqueezeExcite(mid, make_divisible(mid / 4), rng) if se else None
        self.project = Conv2d(ConvSpec(mid, cout, 1), rng, gain=1.0)
        self.project_bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        if self.expand is not None:
            h = F.activation(self.expand_bn(self.expand(h)), self.act)
        h = F.activation(self.dw_bn(self.dw(h)), self.act)
        if self.se is not None:
            h = self.se(h)
        h = self.project_bn(self.project(h))
        if self.use_residual:
            h = F.elementwise(h, x, "add")
        return h


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        stem = make_divisible(cfg.stem_channels * cfg.width_multiplier)
        self.stem = Conv2d(ConvSpec.same(3, stem, 3, stride=2), rng)
        self.stem_bn = BatchNorm2d(stem)
        widths = cfg.stage_widths()
        blocks = []
        cin = stem
        stride = 2
        strides = []
        for (exp, _out, k, s, se, act), cout in zip(cfg.stages, widths):
            blocks.append(InvertedResidual(cin, cout, exp, k, s, se, act, rng))
            cin = cout
            stride *= s
            strides.append(stride)
        self.blocks = blocks
        self.block_strides = strides
        self.taps = []
        for target in cfg.tap_strides:
            idx = [i for i, s in enumerate(strides) if s == target]
            if not idx:
                raise ConfigError(f"backbone has no block at stride {target} (block strides {strides})")
            self.taps.append(idx[-1])
        self.out_channels = [widths[i] for i in self.taps]

    def forward(self, images: Tensor) -> PyramidFeatures:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"backbone expects N x 3 x H x W images, got {images.shape}")
        h, w = images.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"backbone input height and width must be divisible by 32, got {h}x{w}")
        x = F.hard_swish(self.stem_bn(self.stem(images)))
        taps = {}
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in self.taps:
                taps[i] = x
        c3, c4, c5 = (taps[i] for i in self.taps)
        return PyramidFeatures(c3=c3, c4=c4, c5=c5)

    def se_modules(self) -> List[SqueezeExcite]:
        return [b.se for b in self.blocks if b.se is not None]


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    """Deterministically initialised trunk; identical (cfg, seed) give identical weights."""
    model = Backbone(cfg, np.random.default_rng(seed))
    model.parameter_count = count_parameters(model)
    return model
