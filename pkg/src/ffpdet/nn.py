"""Module containers, parameterized layers and parameter accounting."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterable, Iterator, List, Tuple, Union

import numpy as np

from . import functional as F
from .functional import ConvSpec, RunningStats
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(2.0),
                   dtype=np.float32) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class. Parameters, buffers and children are discovered from attributes
    in assignment order, which fixes the checkpoint manifest order."""

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor, RunningStats)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, Tensor) and value.requires_grad:
                yield full, value

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, RunningStats):
                yield full + ".running_mean", value.mean
                yield full + ".running_var", value.var
                yield full + ".count", np.array([value.count], dtype=np.float64)

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every persisted array: parameters then buffers."""
        out = OrderedDict((n, p.data) for n, p in self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = np.array(arrays[name], dtype=p.data.dtype).reshape(p.shape)
        for name, value in self._stats():
            value.mean[:] = arrays[name + ".running_mean"]
            value.var[:] = arrays[name + ".running_var"]
            value.count = int(np.asarray(arrays[name + ".count"]).ravel()[0])

    def _stats(self, prefix: str = "") -> Iterator[Tuple[str, RunningStats]]:
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._stats(f"{prefix}{name}.")
            elif isinstance(value, RunningStats):
                yield f"{prefix}{name}", value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. to float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, s in self._stats():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, gain: float = math.sqrt(2.0)):
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel ** 2
        self.weight = parameter(fan_in_uniform(rng, spec.weight_shape, fan_in, gain))
        self.bias = parameter(np.zeros(spec.out_channels, dtype=np.float32)) if spec.has_bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.spec, self.weight, self.bias)


class Dense(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True,
                 gain: float = math.sqrt(2.0)):
        self.weight = parameter(fan_in_uniform(rng, (cout, cin), cin, gain))
        self.bias = parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.scale = parameter(np.ones(channels, dtype=np.float32))
        self.shift = parameter(np.zeros(channels, dtype=np.float32))
        self.stats = RunningStats(channels)

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "infer"
        return F.batch_affine(x, self.scale, self.shift, self.stats, mode)


# ----------------------------------------------------------------------
# accounting

Countable = Union[Module, ConvSpec, Iterable]


def count_parameters(model: Countable) -> int:
    """Exact number of trainable scalars in a module, a ConvSpec, or an iterable of them."""
    if isinstance(model, ConvSpec):
        return model.parameter_count
    if isinstance(model, Module):
        return int(sum(p.size for p in model.parameters()))
    return int(sum(count_parameters(m) for m in model))


def parameter_breakdown(model: Module, depth: int = 1) -> "OrderedDict[str, int]":
    """Trainable parameter totals grouped by module path truncated to ``depth`` components."""
    out: "OrderedDict[str, int]" = OrderedDict()
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:depth]) if depth > 0 else ""
        if key == name:
            key = ".".join(name.split(".")[:-1]) or name
        out[key] = out.get(key, 0) + p.size
    return out
