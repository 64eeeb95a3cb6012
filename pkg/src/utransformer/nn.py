"""Parameter containers: a small Module base plus conv and batchnorm layers."""

from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor, batchnorm, conv2d, relu


class Module:
    """Tracks parameters, buffers and submodules in assignment order.

    Parameter names are dotted attribute paths (``enc1.conv1.weight``), which
    makes the registry order deterministic and stable across variants that
    share a backbone.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_init", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def param(self, name: str, shape: tuple[int, ...], init: str) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)
        self._init[name] = init
        setattr(self, name, t)
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        object.__setattr__(self, name, value)
        return value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}{name}.")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, mod in self.named_modules():
            for name, p in mod._params.items():
                yield prefix + name, p

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name, b in mod._buffers.items():
                yield prefix + name, b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def init_kinds(self) -> dict[str, str]:
        return {prefix + n: k for prefix, mod in self.named_modules() for n, k in mod._init.items()}

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for name, b in list(mod._buffers.items()):
                mod.buffer(name, b.astype(dtype))
        return self

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for prefix, mod in self.named_modules():
            for name in list(mod._buffers):
                mod._buffers[name][...] = arrays[prefix + name]
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _sub_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def initialize(module: Module, seed: int) -> None:
    """Seeded initialization, one independent stream per parameter name.

    Because each stream depends only on ``(seed, name)``, two models sharing
    parameter names get identical values for them regardless of what else
    they contain.
    """
    kinds = module.init_kinds()
    for name, p in module.named_parameters():
        kind = kinds[name]
        rng = _sub_rng(seed, name)
        if kind == "he":
            fan_in = int(np.prod(p.shape[1:]))
            values = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=p.shape)
        elif kind == "xavier":
            if p.data.ndim == 2:
                fan_in, fan_out = p.shape
            else:
                fan_out, fan_in = p.shape[0], int(np.prod(p.shape[1:]))
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-limit, limit, size=p.shape)
        elif kind == "zeros":
            values = np.zeros(p.shape)
        elif kind == "ones":
            values = np.ones(p.shape)
        else:
            raise ValueError(f"unknown init kind {kind!r} for {name}")
        p.data = values.astype(p.dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, init: str = "he"):
        super().__init__()
        self.weight = self.param("weight", (cout, cin, k, k), init)
        self.bias = self.param("bias", (cout,), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding="same")


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = self.param("gamma", (channels,), "ones")
        self.beta = self.param("beta", (channels,), "zeros")
        self.buffer("running_mean", np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.buffer("running_var", np.ones(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training
        )


class ConvBlock(Module):
    """Two rounds of conv3x3 -> batchnorm -> relu."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = Conv2d(cin, cout)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout)
        self.bn2 = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))
