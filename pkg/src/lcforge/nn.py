"""Minimal module system: parameter registry, buffers, train/eval mode."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import autodiff as F
from .autodiff import ConvWeights, Parameter, Tensor, get_default_dtype
from .init import InitSpec, init_conv, init_linear


class Module:
    """Base class. Parameters, buffers and submodules register on attribute assignment.

    Registry names are dotted paths in assignment order, so they are stable
    across builds of the same architecture.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple]:
        for prefix, module in self.named_modules():
            for name, p in module._params.items():
                yield (f"{prefix}.{name}" if prefix else name), p

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple]:
        for prefix, module in self.named_modules():
            for name, b in module._buffers.items():
                yield (f"{prefix}.{name}" if prefix else name), b

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        """Copy arrays into existing parameters/buffers; names and shapes must match exactly."""
        own = self.state_dict()
        missing = [n for n in own if n not in state]
        unexpected = [n for n in state if n not in own]
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, target in own.items():
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {target.shape}")
            target[...] = src

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


class Conv2d(Module):
    """Bias-free convolution holding a single filter bank."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, frozen: bool = False):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = init_conv(InitSpec(c_in, k), c_out, rng, frozen=frozen)

    @property
    def kernel_size(self) -> int:
        return self.weight.k

    def forward(self, x):
        if self.weight.k == 1 and self.stride == 1 and self.padding == 0:
            return F.pointwise_conv(x, self.weight)
        return F.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return F.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight, self.bias = init_linear(in_features, out_features, rng)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


def conv_weights(module: Module) -> list:
    """``(name, ConvWeights)`` pairs of a module tree in registry order."""
    return [(n, p) for n, p in module.named_parameters() if isinstance(p, ConvWeights)]
