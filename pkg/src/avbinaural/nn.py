"""Parameter containers on top of :mod:`avbinaural.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in self.__dict__.items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in getattr(m, "_buffer_names", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    """``bias=False`` for convs feeding batch norm, where a bias is cancelled by the mean."""

    def __init__(self, cin, cout, k, stride=1, pad=0, *, rng, bias=True, dtype=np.float32):
        fan_in = cin * k * k
        self.weight = _uniform(rng, (cout, cin, k, k), fan_in, dtype)
        self.bias = _uniform(rng, (cout,), fan_in, dtype) if bias else None
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    """Acts on the last axis: (..., fan_in) -> (..., fan_out)."""

    def __init__(self, fan_in, fan_out, *, rng, zero=False, bias=True, dtype=np.float32):
        if zero:
            self.weight = _zeros((fan_in, fan_out), dtype)
            self.bias = _zeros((fan_out,), dtype) if bias else None
        else:
            self.weight = _uniform(rng, (fan_in, fan_out), fan_in, dtype)
            self.bias = _uniform(rng, (fan_out,), fan_in, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, affine=True, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        if affine:
            self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
            self.bias = _zeros((channels,), dtype)
        else:
            self.weight = self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batchnorm2d(
            x, self.running_mean, self.running_var, self.training,
            self.weight, self.bias, self.momentum, self.eps,
        )
