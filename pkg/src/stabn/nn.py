"""Parameter-holding layers and the 3-d residual block."""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .functional import BatchNormState, ConvSpec
from .tensor import Tensor


class Module:
    """Container that tracks parameters, normalization state, and child modules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_bn", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, BatchNormState):
            self._bn[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_bn_states(self, prefix: str = "") -> Iterator[Tuple[str, BatchNormState]]:
        for name, s in self._bn.items():
            yield prefix + name, s
        for name, child in self._children.items():
            yield from child.named_bn_states(f"{prefix}{name}.")

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, s in self.named_bn_states():
            out[f"{name}.running_mean"] = s.running_mean
            out[f"{name}.running_var"] = s.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        owner, _, field = name.rpartition(".")
        states = dict(self.named_bn_states())
        setattr(states[owner], field, np.array(value, dtype=np.float64))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * math.sqrt(2.0 / fan_in), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Conv(Module):
    """Convolution layer; 3-d or 2-d depending on the spec's kernel length."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        self.weight = he_normal(rng, spec.weight_shape, fan_in)
        if spec.bias:
            self.bias = zeros_param(spec.out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        conv = F.conv3d if self.spec.ndim == 3 else F.conv2d
        return conv(x, self.spec, self.weight, self._params.get("bias"))


Conv3d = Conv2d = Conv


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = he_normal(rng, (d_out, d_in), d_in)
        self.bias = zeros_param(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros_param(channels)
        self.state = BatchNormState.fresh(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.state, training)


def conv3x3x3(c_in: int, c_out: int, stride, bias: bool, rng) -> Conv:
    return Conv3d(ConvSpec(c_out, c_in, (3, 3, 3), stride, (1, 1, 1), bias), rng)


class ResidualBlock(Module):
    """Two 3x3x3 convolutions with an identity or 1x1x1 projection shortcut."""

    def __init__(self, c_in: int, c_out: int, stride, use_bn: bool, rng: np.random.Generator):
        super().__init__()
        stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
        self.use_bn = use_bn
        self.conv1 = conv3x3x3(c_in, c_out, stride, not use_bn, rng)
        self.conv2 = conv3x3x3(c_out, c_out, 1, not use_bn, rng)
        if use_bn:
            self.bn1 = BatchNorm(c_out)
            self.bn2 = BatchNorm(c_out)
        self.has_projection = stride != (1, 1, 1) or c_in != c_out
        if self.has_projection:
            self.proj = Conv3d(ConvSpec(c_out, c_in, (1, 1, 1), stride, 0, not use_bn), rng)
            if use_bn:
                self.proj_bn = BatchNorm(c_out)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = self.conv1(x)
        if self.use_bn:
            out = self.bn1(out, training)
        out = F.relu(out)
        out = self.conv2(out)
        if self.use_bn:
            out = self.bn2(out, training)
        shortcut = x
        if self.has_projection:
            shortcut = self.proj(x)
            if self.use_bn:
                shortcut = self.proj_bn(shortcut, training)
        return F.relu(out + shortcut)


class Stage(Module):
    """A run of residual blocks; only the first one may change stride or width."""

    def __init__(self, c_in: int, c_out: int, blocks: int, stride, use_bn: bool, rng):
        super().__init__()
        self.blocks = []
        for i in range(blocks):
            block = ResidualBlock(c_in if i == 0 else c_out, c_out, stride if i == 0 else (1, 1, 1), use_bn, rng)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for block in self.blocks:
            x = block(x, training)
        return x


class StageStack(Module):
    """Ordered stages applied one after another."""

    def __init__(self, stages: Sequence[Module]):
        super().__init__()
        self.items = list(stages)
        for i, s in enumerate(self.items):
            setattr(self, f"stage{i}", s)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for s in self.items:
            x = s(x, training)
        return x
