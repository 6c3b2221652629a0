"""Filter analysis and robustness tools.

* variance entropy: Shannon entropy of the explained-variance ratios of a
  layer's flattened kernels, optionally normalized by the entropy expected
  from i.i.d. random kernels of the same shape;
* spatial variance heatmaps of std-normalized kernels;
* PGM filter grids;
* single-step l_inf FGSM and the robust accuracy it induces.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as F
from .autodiff import Tensor, no_grad
from .data import Dataset, batches, denormalize
from .init import kaiming_uniform_bound
from .lc_block import Intermediate, LCBlock
from .models import spatial_layers
from .rng import DIAGNOSTICS, stream


@dataclass
class KernelStack:
    kernels: np.ndarray  # N x k x k
    layer_std: float

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        if self.kernels.ndim != 3 or self.kernels.shape[1] != self.kernels.shape[2]:
            raise ValueError(f"kernel stack must be N x k x k, got {self.kernels.shape}")

    @classmethod
    def from_weights(cls, weights) -> "KernelStack":
        """All ``c_out * c_in`` kernels of a ``(c_out, c_in, k, k)`` bank."""
        w = np.asarray(getattr(weights, "data", weights), dtype=np.float64)
        if w.ndim != 4:
            raise ValueError(f"expected (c_out, c_in, k, k) weights, got {w.shape}")
        return cls(w.reshape(-1, w.shape[2], w.shape[3]), float(w.std()))

    @property
    def n(self) -> int:
        return self.kernels.shape[0]

    @property
    def k(self) -> int:
        return self.kernels.shape[1]


def _as_stack(stack) -> KernelStack:
    return stack if isinstance(stack, KernelStack) else KernelStack.from_weights(stack)


def explained_variance_ratios(stack) -> np.ndarray:
    stack = _as_stack(stack)
    if stack.n < 2:
        raise ValueError(f"variance entropy needs at least 2 kernels, got {stack.n}")
    m = stack.kernels.reshape(stack.n, -1)
    m = m - m.mean(axis=0, keepdims=True)
    s2 = np.linalg.svd(m, compute_uv=False) ** 2
    total = s2.sum()
    scale = max(float(np.abs(m).max()), 1e-300) ** 2 * m.size
    if total <= 1e-24 * scale:
        return np.zeros_like(s2)
    return s2 / total


def variance_entropy(stack) -> float:
    """Entropy (nats) of the explained-variance spectrum; 0 for a single repeated pattern, at most ln(k^2)."""
    p = explained_variance_ratios(stack)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) if p.size else 0.0


def randomness_threshold(n: int, k: int, draws: int = 100, rng: Optional[np.random.Generator] = None) -> float:
    """Mean variance entropy of ``draws`` stacks of ``n`` i.i.d. Kaiming-uniform k x k kernels."""
    if draws < 30:
        raise ValueError(f"need at least 30 Monte-Carlo draws, got {draws}")
    if rng is None:
        rng = stream(DIAGNOSTICS, n, k)
    a = kaiming_uniform_bound(1, k)
    vals = [variance_entropy(KernelStack(rng.uniform(-a, a, size=(n, k, k)), a / math.sqrt(3)))
            for _ in range(draws)]
    return float(np.mean(vals))


def normalized_variance_entropy(stack, draws: int = 100, rng: Optional[np.random.Generator] = None) -> float:
    stack = _as_stack(stack)
    return variance_entropy(stack) / randomness_threshold(stack.n, stack.k, draws, rng)


def spatial_variance_heatmap(stack) -> np.ndarray:
    """Per-position variance over all kernels after dividing by the layer's weight std."""
    stack = _as_stack(stack)
    if stack.n < 2:
        raise ValueError(f"heatmap needs at least 2 kernels, got {stack.n}")
    if not stack.layer_std > 0:
        raise ValueError("heatmap undefined for a layer with zero weight std")
    scaled = stack.kernels / stack.layer_std
    # shift by one kernel first so identical kernels give an exact zero
    return (scaled - scaled[:1]).var(axis=0)


def filter_grid(kernels: np.ndarray) -> np.ndarray:
    """Tile ``N x k x k`` kernels into a uint8 image, ceil(sqrt(N)) per row, 1-px black separators.

    Each kernel is min-max scaled to [0, 255]; a constant kernel maps to 128.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim == 4:
        kernels = kernels.reshape(-1, *kernels.shape[2:])
    if kernels.ndim == 2:
        kernels = kernels[None]
    n, kh, kw = kernels.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    if n == 1:
        lo, hi = kernels.min(), kernels.max()
        return _scale(kernels[0], lo, hi)
    img = np.zeros((rows * (kh + 1) - 1, cols * (kw + 1) - 1), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        img[r * (kh + 1):r * (kh + 1) + kh, c * (kw + 1):c * (kw + 1) + kw] = \
            _scale(kernels[i], kernels[i].min(), kernels[i].max())
    return img


def _scale(kernel: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi - lo <= 0:
        return np.full(kernel.shape, 128, dtype=np.uint8)
    return np.rint((kernel - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def export_filter_grid(weights, path) -> np.ndarray:
    """Write a kernel stack or filter bank as a PGM grid and return the image."""
    kernels = weights.kernels if isinstance(weights, KernelStack) else np.asarray(getattr(weights, "data", weights))
    img = filter_grid(kernels)
    write_pgm(path, img)
    return img


def heatmap_image(heatmap: np.ndarray) -> np.ndarray:
    """Min-max scale a heatmap into a uint8 image (128 when constant)."""
    return _scale(np.asarray(heatmap, dtype=np.float64), heatmap.min(), heatmap.max())


def write_metric_rows(path, rows: Sequence[tuple]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("layer", "metric", "value"))
        for layer, metric, value in rows:
            writer.writerow((layer, metric, value if isinstance(value, (int, str)) else repr(float(value))))


# adversarial ------------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 1 / 255  # pixel units on the [0, 1] scale
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


def input_gradient(model, x: np.ndarray, y: np.ndarray, label_smoothing: float) -> np.ndarray:
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    loss = F.softmax_cross_entropy(model(xt), y, label_smoothing)
    loss.backward()
    if hasattr(model, "zero_grad"):
        model.zero_grad()
    return xt.grad


def fgsm_attack(model, x, y, cfg: AttackConfig, mean, std) -> np.ndarray:
    """Single-step l_inf attack with a budget of ``cfg.epsilon`` in [0, 1] pixel space.

    ``x`` is normalized with per-channel ``mean``/``std``. The step is taken
    in pixel space, clipped to [0, 1] and to the epsilon ball around the
    clean pixels, then mapped back. The result satisfies
    ``|denormalize(x_adv) - denormalize(x)| <= epsilon`` elementwise as
    evaluated by :func:`lcforge.data.denormalize`.
    """
    x = np.asarray(getattr(x, "data", x))
    if cfg.epsilon == 0:
        return x.copy()
    was_training = model.training
    model.eval()
    try:
        grad = input_gradient(model, x, np.asarray(y), cfg.label_smoothing)
    finally:
        model.train(was_training)
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    pix = denormalize(x, mean.ravel(), std.ravel())
    lo = np.maximum(pix - cfg.epsilon, 0.0)
    hi = np.minimum(pix + cfg.epsilon, 1.0)
    adv_pix = np.clip(pix + cfg.epsilon * np.sign(grad), lo, hi)
    x_adv = ((adv_pix - mean) / std).astype(x.dtype)
    # rounding to the working dtype can push a value a few ulps past the ball; step those back
    neg_inf = np.array(-np.inf, dtype=x.dtype)
    pos_inf = np.array(np.inf, dtype=x.dtype)
    for _ in range(64):
        back = denormalize(x_adv, mean.ravel(), std.ravel())
        up = back > hi
        down = back < lo
        if not (up.any() or down.any()):
            break
        x_adv = np.where(up, np.nextafter(x_adv, neg_inf), x_adv)
        x_adv = np.where(down, np.nextafter(x_adv, pos_inf), x_adv)
    return x_adv


def robust_accuracy(model, ds: Dataset, cfg: AttackConfig, batch_size: int = 256) -> tuple:
    """Return ``(clean_accuracy, robust_accuracy)``.

    A sample counts as robust when it is classified correctly both clean and
    after the attack, so robust accuracy never exceeds clean accuracy.
    """
    was_training = model.training
    model.eval()
    clean_hits = robust_hits = 0
    try:
        for x, y, _ in batches(ds, batch_size):
            with no_grad():
                clean = model(x).data.argmax(axis=1) == y
            x_adv = fgsm_attack(model, x.data, y, cfg, ds.channel_mean, ds.channel_std)
            with no_grad():
                adv = model(Tensor(x_adv, dtype=x_adv.dtype)).data.argmax(axis=1) == y
            clean_hits += int(clean.sum())
            robust_hits += int((clean & adv).sum())
    finally:
        model.train(was_training)
    return clean_hits / len(ds), robust_hits / len(ds)


# model-level ------------------------------------------------------------------

def layer_filters(model) -> list:
    """``(name, filter bank, source)`` for every spatial layer.

    LC-Blocks contribute their combined (folded) filters; blocks with an
    intermediate op cannot be folded and contribute their raw spatial bank.
    """
    out = []
    for name, m in spatial_layers(model):
        if isinstance(m, LCBlock):
            if m.config.intermediate is Intermediate.NONE:
                out.append((name, m.fold().data, "combined"))
            else:
                out.append((name, m.spatial.data, "spatial"))
        else:
            out.append((name, m.weight.data, "conv"))
    return out


def layer_report(model, draws: int = 100, seed: int = 0) -> list:
    """Raw and threshold-normalized variance entropy for each spatial layer."""
    report = []
    for i, (name, w, source) in enumerate(layer_filters(model)):
        stack = KernelStack.from_weights(w)
        raw = variance_entropy(stack)
        threshold = randomness_threshold(stack.n, stack.k, draws, stream(DIAGNOSTICS, seed, stack.n, stack.k))
        report.append({"layer": name, "source": source, "num_kernels": stack.n, "kernel_size": stack.k,
                       "variance_entropy": raw, "randomness_threshold": threshold,
                       "normalized_variance_entropy": raw / threshold})
    return report
