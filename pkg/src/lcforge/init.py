"""Kaiming-uniform fan-in initialization.

With the framework-default leaky-ReLU gain sqrt(2 / (1 + 5)) = sqrt(1/3), the
uniform bound ``gain * sqrt(3) / sqrt(fan_in)`` reduces to
``1 / sqrt(c_in * k**2)`` and the resulting weight std is ``bound / sqrt(3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ConvWeights, Parameter, get_default_dtype

DEFAULT_GAIN = math.sqrt(1.0 / 3.0)


def kaiming_uniform_bound(c_in: int, k: int) -> float:
    if c_in < 1 or k < 1:
        raise ValueError(f"fan-in needs c_in >= 1 and k >= 1, got c_in={c_in}, k={k}")
    return 1.0 / math.sqrt(c_in * k * k)


@dataclass(frozen=True)
class InitSpec:
    c_in: int
    k: int
    gain: float = DEFAULT_GAIN
    seed: int = 0

    def __post_init__(self):
        if self.c_in < 1 or self.k < 1:
            raise ValueError(f"InitSpec needs c_in >= 1 and k >= 1, got {self}")

    @property
    def fan_in(self) -> int:
        return self.c_in * self.k * self.k

    @property
    def bound(self) -> float:
        if self.gain == DEFAULT_GAIN:
            return kaiming_uniform_bound(self.c_in, self.k)
        return self.gain * math.sqrt(3.0) / math.sqrt(self.fan_in)

    @property
    def std(self) -> float:
        return self.bound / math.sqrt(3.0)


def _uniform(shape: tuple, bound: float, rng: np.random.Generator, dtype) -> np.ndarray:
    w = rng.uniform(-bound, bound, size=shape).astype(dtype)
    # rounding to a narrower dtype may push a draw just past the bound
    limit = np.asarray(bound, dtype=dtype)
    if float(limit) > bound:
        limit = np.nextafter(limit, np.asarray(0, dtype=dtype))
    return np.clip(w, -limit, limit)


def init_conv(spec: InitSpec, c_out: int, rng: np.random.Generator, frozen: bool = False, dtype=None) -> ConvWeights:
    """Draw a ``c_out x c_in x k x k`` filter bank i.i.d. from U[-a, a]."""
    if c_out < 1:
        raise ValueError(f"c_out must be positive, got {c_out}")
    dtype = dtype or get_default_dtype()
    shape = (c_out, spec.c_in, spec.k, spec.k)
    return ConvWeights(_uniform(shape, spec.bound, rng, dtype), frozen=frozen, dtype=dtype)


def init_linear(in_features: int, out_features: int, rng: np.random.Generator, dtype=None) -> tuple:
    """Weight and bias of a linear head, both U[-a, a] with a = 1/sqrt(in_features)."""
    dtype = dtype or get_default_dtype()
    bound = kaiming_uniform_bound(in_features, 1)
    weight = Parameter(_uniform((out_features, in_features), bound, rng, dtype), dtype=dtype)
    bias = Parameter(_uniform((out_features,), bound, rng, dtype), dtype=dtype)
    return weight, bias
