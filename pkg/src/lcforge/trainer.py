"""SGD/Nesterov training loop with per-step cosine annealing, evaluation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as F
from .autodiff import no_grad
from .data import AugmentPolicy, Dataset, batches
from .models import ModelSpec, ResNet, build_resnet_lc
from .nn import Module

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LCFORGE1"
CHECKPOINT_VERSION = 1
HISTORY_HEADER = ("epoch", "train_loss", "val_acc", "lr")


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    lr0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-2
    batch_size: int = 256
    label_smoothing: float = 0.1
    seed: int = 0
    eval_every: int = 1
    augment: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if self.lr0 <= 0:
            raise ValueError(f"TrainConfig.lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("TrainConfig needs 0 <= momentum < 1 and weight_decay >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)
    step_lr: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epoch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "History":
        return cls(**{k: list(v) for k, v in d.items()})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for row in zip(self.epoch, self.train_loss, self.val_acc, self.lr):
            writer.writerow([row[0], repr(float(row[1])), "" if row[2] is None else repr(float(row[2])),
                             repr(float(row[3]))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """``lr0 * (1 + cos(pi * step / total_steps)) / 2``, exactly 0 at the final step."""
    if total_steps < 1 or step < 0 or step > total_steps:
        raise ValueError(f"cosine_lr needs 0 <= step <= total_steps, got step={step}, total_steps={total_steps}")
    if step == total_steps:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_nesterov_step(params: dict, grads: dict, state: dict, lr: float, momentum: float,
                      weight_decay: float) -> None:
    """One in-place update of ``params`` (name -> Parameter).

    ``g = grad + wd * w;  v = mu * v + g;  w -= lr * (g + mu * v)``.
    Frozen parameters must not be passed in.
    """
    for name, p in params.items():
        if getattr(p, "frozen", False):
            raise ValueError(f"frozen parameter {name} passed to the optimizer")
        grad = grads.get(name)
        if grad is None:
            raise ValueError(f"no gradient for trainable parameter {name}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        dtype = p.data.dtype
        g = grad.astype(dtype, copy=True)
        if weight_decay:
            g += dtype.type(weight_decay) * p.data
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state[name] = v
        v *= dtype.type(momentum)
        v += g
        g += dtype.type(momentum) * v
        p.data -= dtype.type(lr) * g


class SGD:
    """Nesterov SGD over the model's trainable parameters; frozen ones are never touched."""

    def __init__(self, model: Module, momentum: float = 0.9, weight_decay: float = 1e-2):
        self.params = {n: p for n, p in model.named_parameters() if not p.frozen}
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self, lr: float) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        sgd_nesterov_step(self.params, grads, self.state, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def evaluate(model: Module, ds: Dataset, batch_size: int = 256) -> float:
    preds = predict_labels(model, ds, batch_size)
    return float(np.mean(preds == ds.labels))


def predict_logits(model: Module, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for x, _, _ in batches(ds, batch_size):
                out.append(model(x).data)
    finally:
        model.train(was_training)
    return np.concatenate(out)


def predict_labels(model: Module, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    # argmax picks the lowest index among ties
    return predict_logits(model, ds, batch_size).argmax(axis=1)


@dataclass
class TrainState:
    """Everything needed to continue a run at an epoch boundary."""

    epoch: int = 0
    step: int = 0
    optimizer: dict = field(default_factory=dict)
    history: History = field(default_factory=History)


def train(model: Module, train_ds: Dataset, val_ds: Optional[Dataset], cfg: TrainConfig,
          state: Optional[TrainState] = None, stop_after_epoch: Optional[int] = None,
          on_epoch_end: Optional[Callable[[TrainState], None]] = None,
          policy: Optional[AugmentPolicy] = None) -> History:
    """Run (or continue) the training loop and return its :class:`History`.

    The final weights are those of the last completed epoch. ``state`` resumes
    a run; ``stop_after_epoch`` ends early so a split run can be tested.
    Per-batch randomness derives from ``(cfg.seed, epoch, batch)``, so a
    resumed run replays the uninterrupted one exactly.
    """
    state = state or TrainState()
    if policy is None and cfg.augment:
        h = train_ds.images.shape[2]
        policy = AugmentPolicy(pad=4, crop=h, hflip_prob=0.5)
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    opt.state = state.optimizer
    per_epoch = steps_per_epoch(len(train_ds), cfg.batch_size)
    total = per_epoch * cfg.epochs
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    history = state.history
    for epoch in range(state.epoch, last):
        model.train()
        losses = []
        for x, y, _ in batches(train_ds, cfg.batch_size, cfg.seed, epoch, policy):
            lr = cosine_lr(state.step, total, cfg.lr0)
            opt.zero_grad()
            loss = F.softmax_cross_entropy(model(x), y, cfg.label_smoothing)
            loss.backward()
            opt.step(lr)
            state.step += 1
            losses.append(float(loss.data))
            history.step_loss.append(losses[-1])
            history.step_lr.append(lr)
        state.epoch = epoch + 1
        val = None
        if val_ds is not None and (state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs):
            val = evaluate(model, val_ds, cfg.batch_size)
        history.epoch.append(state.epoch)
        history.train_loss.append(float(np.mean(losses)))
        history.val_acc.append(val)
        history.lr.append(cosine_lr(state.step, total, cfg.lr0))
        logger.info("epoch %d/%d loss %.4f val_acc %s lr %.3g", state.epoch, cfg.epochs,
                    history.train_loss[-1], "-" if val is None else f"{val:.4f}", history.lr[-1])
        if on_epoch_end is not None:
            on_epoch_end(state)
    return history


# checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: ModelSpec
    config: Optional[TrainConfig]
    state: TrainState
    tensors: dict  # registry name -> array (parameters, then buffers)
    momentum: dict  # parameter name -> velocity array
    frozen: dict  # parameter name -> bool
    extra: dict

    def build_model(self) -> ResNet:
        model = build_resnet_lc(self.spec, seed=self.extra.get("model_seed", 0))
        model.load_state_dict(self.tensors)
        for name, p in model.named_parameters():
            if self.frozen.get(name, False) != p.frozen:
                raise CheckpointError(f"frozen flag of {name} disagrees with the model spec")
        return model


def save_checkpoint(path, model: ResNet, optimizer_state: Optional[dict] = None,
                    cfg: Optional[TrainConfig] = None, state: Optional[TrainState] = None,
                    extra: Optional[dict] = None) -> None:
    """Write ``LCFORGE1 | u32 LE metadata length | JSON metadata | float32 LE blobs``."""
    state = state or TrainState()
    optimizer_state = optimizer_state if optimizer_state is not None else state.optimizer
    params = dict(model.named_parameters())
    blobs = []
    manifest = []
    offset = 0

    def add(name, kind, array):
        nonlocal offset
        raw = np.ascontiguousarray(array, dtype="<f4").tobytes()
        manifest.append({"name": name, "kind": kind, "shape": list(array.shape), "offset": offset,
                         "nbytes": len(raw), "frozen": bool(getattr(params.get(name), "frozen", False))})
        blobs.append(raw)
        offset += len(raw)

    for name, p in params.items():
        add(name, "param", p.data)
    for name, b in model.named_buffers():
        add(name, "buffer", b)
    for name in params:
        if name in optimizer_state:
            add(name, "momentum", optimizer_state[name])

    extra = dict(extra or {})
    extra.setdefault("model_seed", getattr(model, "seed", 0))
    meta = {
        "format": "lcforge-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "config": cfg.to_dict() if cfg is not None else None,
        "epoch": state.epoch,
        "step": state.step,
        "history": state.history.to_dict(),
        "extra": extra,
        "manifest": manifest,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 12 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an LCFORGE1 checkpoint (bad magic)")
    (meta_len,) = struct.unpack("<I", data[8:12])
    if 12 + meta_len > len(data):
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted metadata ({exc})") from exc
    if meta.get("format") != "lcforge-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    body = memoryview(data)[12 + meta_len:]
    tensors, momentum, frozen = {}, {}, {}
    try:
        for entry in meta["manifest"]:
            start, nbytes = entry["offset"], entry["nbytes"]
            if start + nbytes > len(body):
                raise CheckpointError(f"{path}: truncated blob for {entry['name']}")
            arr = np.frombuffer(body[start:start + nbytes], dtype="<f4").astype(np.float32)
            arr = arr.reshape(entry["shape"])
            if entry["kind"] == "momentum":
                momentum[entry["name"]] = arr
            else:
                tensors[entry["name"]] = arr
                if entry["kind"] == "param":
                    frozen[entry["name"]] = entry["frozen"]
        spec = ModelSpec.from_dict(meta["spec"])
        cfg = TrainConfig.from_dict(meta["config"]) if meta.get("config") else None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    state = TrainState(meta.get("epoch", 0), meta.get("step", 0), momentum,
                       History.from_dict(meta.get("history") or {}))
    return Checkpoint(spec, cfg, state, tensors, momentum, frozen, meta.get("extra") or {})
