"""Differentiable neural-network operations on :class:`Tensor`.

Convolutions use the cross-correlation convention (no kernel flip) and carry
no bias. ``conv2d`` lowers to im2col + matrix multiply.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, make_result


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the tensor method name
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(out, (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, padded_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[:2]
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, c_in, H, W) with ``w`` (c_out, c_in, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weights, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    n, c_in, h, wd = x.shape
    c_out, w_cin, k, k2 = w.shape
    if w_cin != c_in or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weights {w.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty ({ho}x{wo}) for input {x.shape}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(c_out, -1)
    out = np.matmul(w2, cols).reshape(n, c_out, ho, wo)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(n, c_out, ho * wo)
        dx = dw = None
        if w.requires_grad:
            dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if x.requires_grad:
            dxp = _col2im(np.matmul(w2.T, g2), padded_shape, k, stride, ho, wo)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return dx, dw

    return make_result(out, (x, w), backward, "conv2d")


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution: every output channel is a linear combination of input channels."""
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ValueError(f"pointwise_conv needs 1x1 weights, got {w.shape}")
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"pointwise_conv shape mismatch: input {x.shape} vs weights {w.shape}")
    n, c, h, wd = x.shape
    c_out = w.shape[0]
    x2 = x.data.reshape(n, c, h * wd)
    w2 = w.data.reshape(c_out, c)
    out = np.matmul(w2, x2).reshape(n, c_out, h, wd)

    def backward(g):
        g2 = g.reshape(n, c_out, h * wd)
        dx = dw = None
        if w.requires_grad:
            dw = np.tensordot(g2, x2, axes=([0, 2], [0, 2])).reshape(w.shape)
        if x.requires_grad:
            dx = np.matmul(w2.T, g2).reshape(x.shape)
        return dx, dw

    return make_result(out, (x, w), backward, "pointwise_conv")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization with an affine transform.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, as tracked by most
    frameworks). In eval mode the running buffers are used.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects a 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d affine params {gamma.shape}/{beta.shape} do not match {c} channels")
    if eps <= 0:
        raise ValueError("batchnorm2d eps must be positive")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if m < 2:
            raise ValueError("batchnorm2d in train mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = None
        if x.requires_grad:
            scale = (gamma.data * inv)[None, :, None, None]
            if training:
                dx = scale * (g - dbeta[None, :, None, None] / m - xhat * dgamma[None, :, None, None] / m)
            else:
                dx = g * scale
        return dx, dgamma, dbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    n, c, h, wd = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * wd))[:, :, None, None], x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for ``x`` (N, F), ``w`` (C, F), ``b`` (C,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weights {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear bias shape {b.shape} does not match {w.shape[0]} outputs")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        db = g.sum(axis=0) if b is not None else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "linear")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross entropy.

    Targets are ``(1 - smoothing) * onehot + smoothing / C``.
    """
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects (N, C) logits, got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    q = np.full((n, c), smoothing / c, dtype=logits.dtype)
    q[np.arange(n), labels] += 1.0 - smoothing
    loss = np.asarray(-(q * logp).sum() / n, dtype=logits.dtype)

    def backward(g):
        return ((np.exp(logp) - q) * (g / n),)

    return make_result(loss, (logits,), backward, "softmax_cross_entropy")
