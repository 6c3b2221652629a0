"""LC-Block: a spatial convolution with ``c_out * E`` filters followed by a
pointwise convolution back down to ``c_out`` channels.

Without an intermediate op the block is a reparameterization of one spatial
convolution: a pointwise layer applied to a spatial layer's outputs is the
same as convolving with the pointwise-weighted sums of the spatial filters.
:meth:`LCBlock.fold` computes those combined filters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as F
from .autodiff import ConvWeights, Tensor
from .init import InitSpec, init_conv
from .nn import BatchNorm2d, Module


class Intermediate(str, enum.Enum):
    NONE = "none"
    RELU = "relu"
    BN = "bn"
    BN_RELU = "bnrelu"

    @classmethod
    def parse(cls, value) -> "Intermediate":
        if isinstance(value, cls):
            return value
        if value is None:
            return cls.NONE
        aliases = {"batchnorm": "bn", "batchnormrelu": "bnrelu", "bn+relu": "bnrelu", "bn_relu": "bnrelu"}
        key = str(value).lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown intermediate op {value!r}; choose from none, relu, bn, bnrelu") from None


class FoldError(ValueError):
    """Raised when folding a block whose stages are separated by a non-linear/affine op."""


@dataclass(frozen=True)
class LCBlockConfig:
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    expansion: int = 1
    frozen_spatial: bool = False
    intermediate: Intermediate = Intermediate.NONE
    padding: Optional[int] = None

    def __post_init__(self):
        for field in ("c_in", "c_out", "k", "stride", "expansion"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"LCBlockConfig.{field} must be a positive int, got {value!r}")
        object.__setattr__(self, "intermediate", Intermediate.parse(self.intermediate))

    @property
    def hidden(self) -> int:
        return self.c_out * self.expansion

    @property
    def pad(self) -> int:
        return (self.k - 1) // 2 if self.padding is None else self.padding

    @property
    def spatial_shape(self) -> tuple:
        return (self.hidden, self.c_in, self.k, self.k)

    @property
    def pointwise_shape(self) -> tuple:
        return (self.c_out, self.hidden, 1, 1)


class LCBlock(Module):
    def __init__(self, config: LCBlockConfig, spatial: ConvWeights, pointwise: ConvWeights):
        super().__init__()
        if spatial.shape != config.spatial_shape:
            raise ValueError(f"spatial weights {spatial.shape} do not match config {config.spatial_shape}")
        if pointwise.shape != config.pointwise_shape:
            raise ValueError(f"pointwise weights {pointwise.shape} do not match config {config.pointwise_shape}")
        if config.frozen_spatial:
            spatial.freeze()
        pointwise.unfreeze()
        self.config = config
        self.spatial = spatial
        self.pointwise = pointwise
        if config.intermediate in (Intermediate.BN, Intermediate.BN_RELU):
            self.bn = BatchNorm2d(config.hidden)

    @property
    def stride(self) -> int:
        return self.config.stride

    @property
    def padding(self) -> int:
        return self.config.pad

    @property
    def kernel_size(self) -> int:
        return self.config.k

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.c_in:
            raise ValueError(f"LC-Block expects {self.config.c_in} input channels, got input {x.shape}")
        h = F.conv2d(x, self.spatial, self.config.stride, self.config.pad)
        op = self.config.intermediate
        if op in (Intermediate.BN, Intermediate.BN_RELU):
            h = self.bn(h)
        if op in (Intermediate.RELU, Intermediate.BN_RELU):
            h = F.relu(h)
        return F.pointwise_conv(h, self.pointwise)

    def fold(self) -> ConvWeights:
        """Combined filters ``combined[i] = sum_j pointwise[i, j] * spatial[j]``."""
        if self.config.intermediate is not Intermediate.NONE:
            raise FoldError(
                f"fold undefined under intermediate operation ({self.config.intermediate.value})"
            )
        return ConvWeights(fold_weights(self.pointwise.data, self.spatial.data),
                           frozen=False, dtype=self.spatial.dtype)


def fold_weights(pointwise: np.ndarray, spatial: np.ndarray) -> np.ndarray:
    """Contract a ``(c_out, hidden, 1, 1)`` pointwise bank with a ``(hidden, c_in, k, k)`` spatial bank."""
    p = pointwise.reshape(pointwise.shape[0], pointwise.shape[1])
    if p.shape[1] != spatial.shape[0]:
        raise ValueError(f"cannot fold pointwise {pointwise.shape} with spatial {spatial.shape}")
    return np.tensordot(p, spatial, axes=(1, 0))


def wrap_conv_as_lc(c_in: int, c_out: int, k: int, stride: int = 1, expansion: int = 1, frozen: bool = False,
                    intermediate=Intermediate.NONE, rng: Optional[np.random.Generator] = None,
                    pointwise_rng: Optional[np.random.Generator] = None, padding: Optional[int] = None) -> LCBlock:
    """Build an LC-Block standing in for a ``c_in -> c_out`` k x k convolution.

    Both stages use Kaiming-uniform fan-in init. ``pointwise_rng`` defaults to
    ``rng``; passing separate streams keeps spatial draws independent of E's
    effect on the pointwise draw count.
    """
    config = LCBlockConfig(c_in, c_out, k, stride, expansion, frozen, Intermediate.parse(intermediate), padding)
    if rng is None:
        rng = np.random.default_rng(0)
    spatial = init_conv(InitSpec(c_in, k), config.hidden, rng, frozen=frozen)
    pointwise = init_conv(InitSpec(config.hidden, 1), c_out, pointwise_rng or rng)
    return LCBlock(config, spatial, pointwise)


def lc_param_count(c_in: int, c_out: int, k: int, expansion: int) -> int:
    return c_out * expansion * c_in * k * k + c_out * c_out * expansion


def lc_forward(block: LCBlock, x: Tensor) -> Tensor:
    return block(x)


def fold(block: LCBlock) -> ConvWeights:
    return block.fold()
