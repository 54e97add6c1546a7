"""Layers for the dual-head network: conv, linear, batch norm, residual blocks, gradient reversal."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Module:
    """Minimal container: named parameters, named buffers, child modules, train/eval flag."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        head, _, rest = name.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            self._buffers[name][...] = value

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.add_param("weight", _uniform(rng, (d_out, d_in), 1.0 / math.sqrt(max(d_in, 1)), dtype))
        self.bias = self.add_param("bias", np.zeros(d_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = T.matmul(x, _transpose(weight))
    return out + bias if bias is not None else out


def _transpose(w: Tensor) -> Tensor:
    return Tensor._make(w.data.T, (w,), lambda g: (g.T,), "transpose")


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel * kernel
        self.weight = self.add_param(
            "weight", _uniform(rng, (c_out, c_in, kernel, kernel), math.sqrt(6.0 / fan_in), dtype))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalization over N (2-d input) or N,H,W (4-d input).

    Running variance uses the unbiased batch variance; normalization in
    train mode uses the biased one.
    """

    def __init__(self, features: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.eps, self.momentum = eps, momentum
        self.scale = self.add_param("scale", np.ones(features, dtype=dtype))
        self.shift = self.add_param("shift", np.zeros(features, dtype=dtype))
        self._buffers["running_mean"] = np.zeros(features, dtype=dtype)
        self._buffers["running_var"] = np.ones(features, dtype=dtype)

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self, "train" if self.training else "eval")


def batchnorm(x: Tensor, bn: BatchNorm, mode: str = "train") -> Tensor:
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects N×d or N×C×H×W input, got {x.shape}")
    if x.shape[1] != bn.scale.shape[0]:
        raise ShapeError(f"batchnorm: {x.shape[1]} features but parameters for {bn.scale.shape[0]}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs at least 2 samples")
        out, mu, var = T.batch_norm(x, bn.scale, bn.shift, axes, bn.eps)
        count = x.data.size // x.shape[1]
        unbiased = var * (count / max(count - 1, 1))
        m = bn.momentum
        bn.running_mean[...] = (1 - m) * bn.running_mean + m * mu
        bn.running_var[...] = (1 - m) * bn.running_var + m * unbiased
        return out
    if mode != "eval":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = (1.0 / np.sqrt(bn.running_var + bn.eps)).astype(x.dtype)
    xhat = (x - bn.running_mean.reshape(bshape)) * inv.reshape(bshape)
    return xhat * T.reshape(bn.scale, bshape) + T.reshape(bn.shift, bshape)


@dataclass
class GrlConfig:
    """Reversal strength. ``schedule`` is "constant" or "ramp" (linear start→end over ``over_steps``)."""

    lam: float = 1.0
    schedule: str = "constant"
    start: float = 0.0
    end: float = 1.0
    over_steps: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.start < 0 or self.end < 0:
            raise ValueError("reversal strength must be non-negative")
        if self.schedule not in ("constant", "ramp"):
            raise ValueError(f"unknown GRL schedule {self.schedule!r}")

    def at(self, step: int) -> float:
        if self.schedule == "constant" or self.over_steps <= 0:
            return self.lam if self.schedule == "constant" else self.end
        frac = min(max(step, 0) / self.over_steps, 1.0)
        return self.start + (self.end - self.start) * frac


def grl_forward(x: Tensor, cfg: GrlConfig, step: int = 0) -> Tensor:
    return T.reverse_gradient(x, cfg.at(step))


class GradientReversal(Module):
    def __init__(self, cfg: GrlConfig):
        super().__init__()
        self.cfg = cfg
        self.step = 0

    def forward(self, x: Tensor) -> Tensor:
        return grl_forward(x, self.cfg, self.step)


class ResidualBlock(Module):
    """conv3x3-bn-relu-conv3x3-bn plus shortcut, then relu; 1x1 conv + bn projection when shape changes."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator, dtype=None):
        super().__init__()
        self.stride = stride
        self.conv1 = self.add_child("conv1", Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1, dtype=dtype))
        self.bn1 = self.add_child("bn1", BatchNorm(c_out, dtype=dtype))
        self.conv2 = self.add_child("conv2", Conv2d(c_out, c_out, 3, rng, stride=1, padding=1, dtype=dtype))
        self.bn2 = self.add_child("bn2", BatchNorm(c_out, dtype=dtype))
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = self.add_child("proj", Conv2d(c_in, c_out, 1, rng, stride=stride, dtype=dtype))
            self.proj_bn = self.add_child("proj_bn", BatchNorm(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        if h.shape != shortcut.shape:
            raise ShapeError(f"residual branch {h.shape} vs shortcut {shortcut.shape}")
        return T.relu(h + shortcut)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of N×d1 and N×d2."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat needs equal leading extents, got {a.shape} and {b.shape}")
    return T.concat([a, b], axis=1)


def flatten(x: Tensor) -> Tensor:
    return T.flatten(x)
