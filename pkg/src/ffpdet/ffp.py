"""Fault feature pyramid: attention laterals, bottleneck smoothing, dilated top level."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import functional as F
from .backbone import PyramidFeatures
from .config import FfpConfig
from .errors import ConfigError, ShapeError
from .functional import ConvSpec
from .nn import Conv2d, Dense, Module
from .tensor import Tensor


class FEA(Module):
    """1x1 projection to the pyramid width followed by a squeeze-excitation gate.

    ``combine="multiply"`` returns ``g * proj``; ``"add"`` returns ``proj + g * proj``.
    """

    def __init__(self, cin: int, channels: int, reduction: int, rng: np.random.Generator,
                 combine: str = "multiply"):
        self.proj = Conv2d(ConvSpec(cin, channels, 1, has_bias=True), rng, gain=1.0)
        self.fc0 = Dense(channels, max(1, channels // reduction), rng)
        self.fc1 = Dense(max(1, channels // reduction), channels, rng, gain=1.0)
        self.combine = combine
        self.taps = {}

    def gate(self, proj: Tensor) -> Tensor:
        n, c = proj.shape[:2]
        s = F.global_avg_pool(proj).reshape(n, c)
        return F.sigmoid(self.fc1(F.relu(self.fc0(s)))).reshape(n, c, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        proj = self.proj(x)
        gated = F.elementwise(proj, self.gate(proj), "mul_broadcast_channel")
        if self.combine == "add":
            gated = F.elementwise(proj, gated, "add")
        self.taps = {"pre": proj.data, "post": gated.data}
        return gated


class Lateral(Module):
    """Plain 1x1 lateral used when attention is disabled."""

    def __init__(self, cin: int, channels: int, rng: np.random.Generator):
        self.proj = Conv2d(ConvSpec(cin, channels, 1, has_bias=True), rng, gain=1.0)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(x)


class Bottleneck(Module):
    """Bias-free 1x1 (C->b), 3x3 (b->b), 1x1 (b->C) branch with relu between."""

    def __init__(self, channels: int, bottleneck: int, rng: np.random.Generator):
        self.reduce = Conv2d(ConvSpec(channels, bottleneck, 1), rng)
        self.mix = Conv2d(ConvSpec.same(bottleneck, bottleneck, 3), rng)
        self.restore = Conv2d(ConvSpec(bottleneck, channels, 1), rng, gain=0.5)
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"bottleneck expects {self.channels} channels, got {x.shape[1]}")
        return self.restore(F.relu(self.mix(F.relu(self.reduce(x)))))


class FBM(Module):
    """``x + branch(x)``."""

    def __init__(self, channels: int, bottleneck: int, rng: np.random.Generator):
        self.branch = Bottleneck(channels, bottleneck, rng)

    def forward(self, x: Tensor) -> Tensor:
        return F.elementwise(x, self.branch(x), "add")


class DilatedStack(Module):
    """Sequential bias-free 3x3 convs at the given dilation rates, relu between."""

    def __init__(self, channels: int, rates: Sequence[int], rng: np.random.Generator):
        if not rates:
            raise ConfigError("dilated stack needs at least one rate")
        self.convs = [Conv2d(ConvSpec.same(channels, channels, 3, dilation=int(r)), rng,
                             gain=1.0 if i == len(rates) - 1 else np.sqrt(2.0))
                      for i, r in enumerate(rates)]

    def forward(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x


class DFB(Module):
    """``dilated(x) + branch(x)``; the shortcut is convolved, never identity."""

    def __init__(self, channels: int, bottleneck: int, rates: Sequence[int], rng: np.random.Generator):
        self.shortcut = DilatedStack(channels, rates, rng)
        self.branch = Bottleneck(channels, bottleneck, rng)
        self.taps = {}

    def forward(self, x: Tensor) -> Tensor:
        b = self.branch(x)
        out = F.elementwise(self.shortcut(x), b, "add")
        self.taps = {"branch": b.data, "out": out.data}
        return out


# ----------------------------------------------------------------------
# hybrid dilated convolution rule

@dataclass
class HdcReport:
    rates: List[int]
    max_distances: List[int]
    kernel: int
    gridding: bool


def hdc_check(rates: Sequence[int], kernel: int = 3) -> HdcReport:
    """Max-gap recurrence ``L_i = max(L_{i+1} - 2r_i, 2r_i - L_{i+1}, r_i)`` with ``L_n = r_n``.

    ``gridding`` is True ("do not use") when the stacked kernels leave holes,
    i.e. ``L_1 > 1``, or when ``L_2`` exceeds the kernel size.
    """
    rates = [int(r) for r in rates]
    if not rates or any(r < 1 for r in rates):
        raise ConfigError(f"rates must be a nonempty list of positive integers, got {list(rates)}")
    if kernel < 3 or kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd and >= 3, got {kernel}")
    L = [0] * len(rates)
    L[-1] = rates[-1]
    for i in range(len(rates) - 2, -1, -1):
        L[i] = max(L[i + 1] - 2 * rates[i], 2 * rates[i] - L[i + 1], rates[i])
    gridding = L[0] > 1 or (len(L) > 1 and L[1] > kernel)
    return HdcReport(rates, L, kernel, gridding)


def composed_support(rates: Sequence[int], kernel: int = 3) -> np.ndarray:
    """Sorted 1-D tap offsets of the stacked dilated kernels (a square kernel's
    2-D support is the product of this set with itself)."""
    half = kernel // 2
    support = {0}
    for r in rates:
        taps = [r * k for k in range(-half, half + 1)]
        support = {s + t for s in support for t in taps}
    return np.array(sorted(support))


def max_gap(support: np.ndarray) -> int:
    return int(np.diff(support).max()) if len(support) > 1 else 0


def hdc_bruteforce(rates: Sequence[int], kernel: int = 3) -> HdcReport:
    """Oracle: ``L_i`` is the largest gap between consecutive nonzero taps of the
    composed kernel of layers ``i..n``; gridding means the full stack has holes."""
    rates = [int(r) for r in rates]
    L = [max_gap(composed_support(rates[i:], kernel)) for i in range(len(rates))]
    return HdcReport(rates, L, kernel, L[0] > 1)


# ----------------------------------------------------------------------

class FFP(Module):
    """P5 = M5(lat5(C5)); P4 = M4(lat4(C4) + up(P5)); P3 = M3(lat3(C3) + up(P4))."""

    def __init__(self, in_channels: Sequence[int], cfg: FfpConfig, rng: np.random.Generator):
        cfg.validate()
        rep = hdc_check(cfg.dilation_rates)
        if rep.gridding and "dfb" in cfg.placement:
            raise ConfigError(f"dilation rates {rep.rates} cause gridding (L = {rep.max_distances})")
        self.cfg = cfg
        c = cfg.channels
        if cfg.fea:
            self.laterals = [FEA(ci, c, cfg.fea_reduction, rng, cfg.fea_combine) for ci in in_channels]
        else:
            self.laterals = [Lateral(ci, c, rng) for ci in in_channels]
        self.smooth = [DFB(c, cfg.bottleneck, cfg.dilation_rates, rng) if kind == "dfb"
                       else FBM(c, cfg.bottleneck, rng) for kind in cfg.placement]

    def forward(self, feats: PyramidFeatures) -> PyramidFeatures:
        cs = feats.c_levels()
        if any(t is None for t in cs):
            raise ShapeError("ffp needs C3, C4 and C5")
        lat = [m(x) for m, x in zip(self.laterals, cs)]
        p5 = self.smooth[2](lat[2])
        p4 = self.smooth[1](F.elementwise(lat[1], F.upsample_nearest_2x(p5), "add"))
        p3 = self.smooth[0](F.elementwise(lat[0], F.upsample_nearest_2x(p4), "add"))
        return PyramidFeatures(feats.c3, feats.c4, feats.c5, p3, p4, p5)


def fbm_branch_parameters(channels: int = 256, bottleneck: int = 16) -> int:
    """Closed-form parameter count of the bias-free bottleneck branch."""
    return (ConvSpec(channels, bottleneck, 1).parameter_count
            + ConvSpec(bottleneck, bottleneck, 3).parameter_count
            + ConvSpec(bottleneck, channels, 1).parameter_count)


def ffp_closed_form_parameters(in_channels: Sequence[int], cfg: FfpConfig) -> int:
    c = cfg.channels
    total = 0
    for ci in in_channels:
        total += ConvSpec(ci, c, 1, has_bias=True).parameter_count
        if cfg.fea:
            hid = max(1, c // cfg.fea_reduction)
            total += c * hid + hid + hid * c + c
    for kind in cfg.placement:
        total += fbm_branch_parameters(c, cfg.bottleneck)
        if kind == "dfb":
            total += sum(ConvSpec(c, c, 3).parameter_count for _ in cfg.dilation_rates)
    return total

