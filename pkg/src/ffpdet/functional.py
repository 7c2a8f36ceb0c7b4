"""Differentiable layer primitives on NCHW tensors.

Convolutions run on an NHWC working copy so the im2col gather reads
contiguous channel runs; results are returned as NCHW views of that memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, ShapeError
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel", "stride", "dilation", "groups"):
            if getattr(self, field) < 1:
                raise ConfigError(f"ConvSpec.{field} must be >= 1, got {getattr(self, field)}")
        if self.padding < 0:
            raise ConfigError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}")

    @classmethod
    def same(cls, ci: int, co: int, k: int, stride: int = 1, dilation: int = 1,
             groups: int = 1, has_bias: bool = False) -> "ConvSpec":
        """Spec whose padding keeps the spatial size at stride 1."""
        return cls(ci, co, k, stride, dilation * (k - 1) // 2, dilation, groups, has_bias)

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def parameter_count(self) -> int:
        p = (self.in_channels // self.groups) * self.kernel ** 2 * self.out_channels
        return p + (self.out_channels if self.has_bias else 0)

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        span = self.dilation * (self.kernel - 1) + 1
        ho = (h + 2 * self.padding - span) // self.stride + 1
        wo = (w + 2 * self.padding - span) // self.stride + 1
        return ho, wo


# ----------------------------------------------------------------------
# convolution

def _pad_nhwc(x_nchw: np.ndarray, p: int) -> np.ndarray:
    x = x_nchw.transpose(0, 2, 3, 1)
    if p:
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return np.ascontiguousarray(x)


def _tap(i: int, j: int, spec: ConvSpec, ho: int, wo: int):
    d, s = spec.dilation, spec.stride
    return (slice(None), slice(i * d, i * d + s * (ho - 1) + 1, s),
            slice(j * d, j * d + s * (wo - 1) + 1, s))


def _im2col(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    k, d, s = spec.kernel, spec.dilation, spec.stride
    sn, sh, sw, sc = xp.strides
    win = as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * s, sw * s, sh * d, sw * d, sc), writeable=False)
    return win.reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d in_channels: spec expects {spec.in_channels}, input has {c}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape: spec expects {spec.weight_shape}, got {weight.shape}")
    if spec.has_bias != (bias is not None):
        raise ShapeError("conv2d bias presence disagrees with spec.has_bias")
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output size would be {ho}x{wo} for input {h}x{w}")

    p, k, g_ = spec.padding, spec.kernel, spec.groups
    co = spec.out_channels
    wd = weight.data
    xp = _pad_nhwc(x.data, p)
    hp, wp = xp.shape[1], xp.shape[2]
    depthwise = g_ == c and co == c

    if depthwise:
        out = np.zeros((n, ho, wo, c), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                out += xp[_tap(i, j, spec, ho, wo)] * wd[:, 0, i, j]
        cols = None
    else:
        cg, cog = c // g_, co // g_
        cols = []
        outs = []
        for gi in range(g_):
            xg = xp[..., gi * cg:(gi + 1) * cg] if g_ > 1 else xp
            col = _im2col(xg, spec, ho, wo)
            wm = wd[gi * cog:(gi + 1) * cog].transpose(0, 2, 3, 1).reshape(cog, -1)
            outs.append(col @ wm.T)
            cols.append(col)
        out = (outs[0] if g_ == 1 else np.concatenate(outs, axis=1)).reshape(n, ho, wo, co)
    if bias is not None:
        out += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gn = g.transpose(0, 2, 3, 1)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gn.sum(axis=(0, 1, 2))
        if depthwise:
            if weight.requires_grad:
                gw = np.zeros_like(wd)
                for i in range(k):
                    for j in range(k):
                        gw[:, 0, i, j] = np.einsum("nhwc,nhwc->c", gn, xp[_tap(i, j, spec, ho, wo)])
            if x.requires_grad:
                gxp = np.zeros((n, hp, wp, c), dtype=xp.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[_tap(i, j, spec, ho, wo)] += gn * wd[:, 0, i, j]
        else:
            gf = gn.reshape(-1, co)
            if weight.requires_grad:
                parts = []
                for gi in range(g_):
                    gfi = gf[:, gi * cog:(gi + 1) * cog]
                    parts.append((gfi.T @ cols[gi]).reshape(cog, k, k, cg).transpose(0, 3, 1, 2))
                gw = parts[0] if g_ == 1 else np.concatenate(parts, axis=0)
            if x.requires_grad:
                gxp = np.zeros((n, hp, wp, c), dtype=xp.dtype)
                for gi in range(g_):
                    wm = wd[gi * cog:(gi + 1) * cog].transpose(0, 2, 3, 1).reshape(cog, -1)
                    dcol = (gf[:, gi * cog:(gi + 1) * cog] @ wm).reshape(n, ho, wo, k, k, cg)
                    target = gxp[..., gi * cg:(gi + 1) * cg] if g_ > 1 else gxp
                    for i in range(k):
                        for j in range(k):
                            target[_tap(i, j, spec, ho, wo)] += dcol[:, :, :, i, j, :]
        if x.requires_grad:
            gx = gxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._make(out.transpose(0, 3, 1, 2), parents, backward)


# ----------------------------------------------------------------------
# pooling, dense, activations

def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)
    return Tensor._make(out, (x,), lambda g: (np.broadcast_to(g * scale, x.shape),))


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (Cout, Cin)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def hard_swish(x: Tensor) -> Tensor:
    """``t * clip(t + 3, 0, 6) / 6``."""
    t = x.data
    out = t * np.clip(t + 3.0, 0.0, 6.0) / 6.0
    slope = np.where(t < -3.0, 0.0, np.where(t > 3.0, 1.0, (2.0 * t + 3.0) / 6.0)).astype(t.dtype)
    return Tensor._make(out, (x,), lambda g: (g * slope,))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "hard_swish": hard_swish}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        if a.shape != b.shape:
            raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
        return a + b
    if kind == "mul_broadcast_channel":
        if a.ndim != 4 or b.shape != (a.shape[0], a.shape[1], 1, 1):
            raise ShapeError(f"mul_broadcast_channel needs b of shape {(a.shape[0], a.shape[1], 1, 1)}, got {b.shape}")
        return a * b
    raise ConfigError(f"unknown elementwise kind {kind!r}")


def upsample_nearest_2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    return Tensor._make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ----------------------------------------------------------------------
# normalization

class RunningStats:
    """Running mean/variance buffers for :func:`batch_affine`."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.count = 0


def batch_affine(x: Tensor, scale: Tensor, shift: Tensor, stats: RunningStats,
                 mode: str = "train", momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_affine: scale/shift must have length {c}")
    bshape = (1, c, 1, 1)
    if mode == "infer":
        if stats.count == 0:
            raise ConfigError("batch_affine in infer mode before any running statistics were recorded")
        inv = (1.0 / np.sqrt(stats.var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - stats.mean.reshape(bshape)) * inv
        out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

        def backward(g):
            return (g * scale.data.reshape(bshape) * inv,
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return Tensor._make(out, (x, scale, shift), backward)
    if mode != "train":
        raise ConfigError(f"batch_affine mode must be 'train' or 'infer', got {mode!r}")

    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
    stats.mean[:] = (1 - momentum) * stats.mean + momentum * mean.reshape(c)
    stats.var[:] = (1 - momentum) * stats.var + momentum * unbiased
    stats.count += 1

    def backward(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(bshape)
        gx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gscale, gshift

    return Tensor._make(out, (x, scale, shift), backward)

