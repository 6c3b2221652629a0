"""Dense tensor with reverse-mode automatic differentiation.

Every differentiable op produces a new :class:`Tensor` holding references to
its parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` orders the recorded graph topologically, sweeps it in
reverse once, accumulates gradients into leaves, and then drops the recorded
graph so it cannot be replayed.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "debug": os.environ.get("LCFORGE_DEBUG", "") not in ("", "0"),
}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors and parameters are created with."""
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


def set_debug(enabled: bool) -> None:
    """Enable the non-finite check run after every op."""
    _state["debug"] = bool(enabled)


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else _state["dtype"]
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.add(self, F.mul(other, -1.0))

    def __rsub__(self, other):
        from . import functional as F

        return F.add(F.mul(self, -1.0), other)

    def __neg__(self):
        from . import functional as F

        return F.mul(self, -1.0)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import functional as F

        return F.sum(self)

    def mean(self) -> "Tensor":
        from . import functional as F

        return F.mean(self)

    def reshape(self, *shape) -> "Tensor":
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor to every reachable ``requires_grad`` leaf.

        Leaf gradients are accumulated into ``.grad``. Intermediate gradients
        are not retained. The recorded graph is released afterwards.
        """
        if not self.requires_grad:
            raise RuntimeError(
                "backward() called on a tensor that does not require grad "
                "(detached, produced under no_grad, or built only from frozen inputs)"
            )
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op's output, recording it for backprop when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op} (shape {data.shape})")
    return out


class Parameter(Tensor):
    """A learnable leaf tensor. Freezing it removes it from gradient computation."""

    __slots__ = ("frozen",)

    def __init__(self, data, frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.frozen = bool(frozen)

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, frozen={self.frozen})"


class ConvWeights(Parameter):
    """Convolution filter bank of shape ``(c_out, c_in, k, k)``."""

    __slots__ = ()

    def __init__(self, data, frozen: bool = False, dtype=None):
        super().__init__(data, frozen=frozen, dtype=dtype)
        if self.data.ndim != 4 or self.data.shape[2] != self.data.shape[3]:
            raise ValueError(f"conv weights must have shape (c_out, c_in, k, k), got {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"conv weights need positive dimensions, got {self.data.shape}")

    @property
    def weights(self) -> "ConvWeights":
        return self

    @property
    def c_out(self) -> int:
        return self.data.shape[0]

    @property
    def c_in(self) -> int:
        return self.data.shape[1]

    @property
    def k(self) -> int:
        return self.data.shape[2]
