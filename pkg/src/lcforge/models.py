"""CIFAR-style basic-block ResNets and their ResNet-LC variants.

Depth ``D = 6n + 2`` counts the spatial convolutions plus the linear head:
a stem conv, three stages of ``n`` basic blocks with two convs each, and the
classifier. With ``use_lc`` every spatial conv (stem included) becomes an
LC-Block; 1x1 shortcut projections stay plain and trainable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as F
from .autodiff import ConvWeights
from .lc_block import FoldError, Intermediate, LCBlock, wrap_conv_as_lc
from .nn import BatchNorm2d, Conv2d, Linear, Module, Sequential
from .rng import LayerStreams

KERNEL_SIZES = (3, 5, 7, 9)


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 20
    width: int = 16
    expansion: int = 1
    kernel_size: int = 3
    frozen_spatial: bool = False
    intermediate: Intermediate = Intermediate.NONE
    use_lc: bool = True
    num_classes: int = 10
    input_channels: int = 3

    def __post_init__(self):
        if self.depth < 8 or (self.depth - 2) % 6:
            raise ValueError(
                f"invalid depth {self.depth}: CIFAR ResNets need D = 6n + 2 with n >= 1, i.e. D ≡ 2 (mod 6)"
            )
        if self.kernel_size not in KERNEL_SIZES:
            raise ValueError(f"kernel_size must be one of {KERNEL_SIZES}, got {self.kernel_size}")
        for name in ("width", "expansion", "num_classes", "input_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        object.__setattr__(self, "intermediate", Intermediate.parse(self.intermediate))
        if not self.use_lc and (self.expansion != 1 or self.intermediate is not Intermediate.NONE):
            raise ValueError("expansion and intermediate ops only apply to LC models (use_lc=True)")

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // 6

    @property
    def name(self) -> str:
        if self.use_lc:
            return f"ResNet-LC-{self.depth}-{self.width}x{self.expansion}"
        return f"ResNet-{self.depth}-{self.width}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intermediate"] = self.intermediate.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d)


class _SpatialFactory:
    def __init__(self, spec: ModelSpec, streams: LayerStreams):
        self.spec = spec
        self.streams = streams

    def __call__(self, c_in: int, c_out: int, stride: int) -> Module:
        s = self.spec
        if s.use_lc:
            return wrap_conv_as_lc(c_in, c_out, s.kernel_size, stride, s.expansion, s.frozen_spatial,
                                   s.intermediate, rng=self.streams.next(), pointwise_rng=self.streams.next())
        return Conv2d(c_in, c_out, s.kernel_size, stride, rng=self.streams.next(), frozen=s.frozen_spatial)


class BasicBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, spatial: _SpatialFactory, streams: LayerStreams):
        super().__init__()
        self.conv1 = spatial(c_in, c_out, stride)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = spatial(c_out, c_out, 1)
        self.bn2 = BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Sequential(Conv2d(c_in, c_out, 1, stride, padding=0, rng=streams.next()),
                                       BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResNet(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "seed", int(seed))
        streams = LayerStreams(seed)
        spatial = _SpatialFactory(spec, streams)
        w = spec.width
        self.stem = spatial(spec.input_channels, w, 1)
        self.bn = BatchNorm2d(w)
        c_in = w
        for stage, (c_out, stride) in enumerate(((w, 1), (2 * w, 2), (4 * w, 2)), start=1):
            blocks = []
            for b in range(spec.blocks_per_stage):
                blocks.append(BasicBlock(c_in, c_out, stride if b == 0 else 1, spatial, streams))
                c_in = c_out
            setattr(self, f"layer{stage}", Sequential(*blocks))
        self.fc = Linear(4 * w, spec.num_classes, rng=streams.next())

    def forward(self, x):
        out = F.relu(self.bn(self.stem(x)))
        out = self.layer3(self.layer2(self.layer1(out)))
        return self.fc(F.global_avg_pool(out))


def build_resnet_lc(spec: ModelSpec, seed: int = 0) -> ResNet:
    return ResNet(spec, seed)


def spatial_layers(model: Module) -> list:
    """``(name, module)`` for every spatial (k > 1) conv or LC-Block, in forward order."""
    out = []
    for name, m in model.named_modules():
        if isinstance(m, LCBlock) or (isinstance(m, Conv2d) and m.kernel_size > 1):
            out.append((name, m))
    return out


def effective_filters(module: Module) -> np.ndarray:
    """The filter bank a spatial layer applies: the fold of an LC-Block, or a conv's own weights."""
    if isinstance(module, LCBlock):
        return module.fold().data
    return module.weight.data


def _param_kind(model: Module, name: str) -> str:
    owner_name, _, leaf = name.rpartition(".")
    owner = dict(model.named_modules())[owner_name]
    if isinstance(owner, LCBlock):
        return "lc_spatial" if leaf == "spatial" else "lc_pointwise"
    if isinstance(owner, Conv2d):
        return "conv" if owner.kernel_size > 1 else "shortcut"
    if isinstance(owner, BatchNorm2d):
        return "bn"
    if isinstance(owner, Linear):
        return "linear"
    return "other"


def param_census(model: Module) -> dict:
    per_tensor = []
    for name, p in model.named_parameters():
        per_tensor.append({"name": name, "shape": list(p.shape), "count": int(p.size),
                           "frozen": bool(getattr(p, "frozen", False)), "kind": _param_kind(model, name)})
    per_layer = []
    for mname, m in model.named_modules():
        if not isinstance(m, (LCBlock, Conv2d, BatchNorm2d, Linear)):
            continue
        entries = [t for t in per_tensor if t["name"].rpartition(".")[0] == mname
                   or (isinstance(m, LCBlock) and t["name"].startswith(mname + "."))]
        per_layer.append({
            "name": mname,
            "type": type(m).__name__,
            "trainable": sum(t["count"] for t in entries if not t["frozen"]),
            "frozen": sum(t["count"] for t in entries if t["frozen"]),
        })
    trainable = sum(t["count"] for t in per_tensor if not t["frozen"])
    frozen = sum(t["count"] for t in per_tensor if t["frozen"])
    return {"trainable_count": trainable, "frozen_count": frozen, "total": trainable + frozen,
            "per_tensor": per_tensor, "per_layer": per_layer}


def fold_model(model: ResNet) -> ResNet:
    """Plain ResNet computing the same function as an LC model without intermediate ops.

    Every LC-Block is replaced by a conv holding its combined filters; all
    other parameters and BN buffers are copied.
    """
    spec = model.spec
    if not spec.use_lc:
        raise FoldError("nothing to fold: model has no LC-Blocks")
    if spec.intermediate is not Intermediate.NONE:
        raise FoldError(f"fold undefined under intermediate operation ({spec.intermediate.value})")
    plain_spec = ModelSpec(spec.depth, spec.width, 1, spec.kernel_size, False, Intermediate.NONE, False,
                           spec.num_classes, spec.input_channels)
    folded = ResNet(plain_spec, seed=model.seed)
    src_modules = dict(model.named_modules())
    for name, m in folded.named_modules():
        src = src_modules[name]
        if isinstance(src, LCBlock):
            m.weight = ConvWeights(src.fold().data.copy(), frozen=False, dtype=src.spatial.dtype)
        elif m._params or m._buffers:
            for pname, p in m._params.items():
                p.data[...] = src._params[pname].data
            for bname, b in m._buffers.items():
                b[...] = src._buffers[bname]
    return folded
