"""``lcforge`` command line: train, evaluate, fold, analyze, attack.

Configuration comes from an optional flat JSON file (``--config``) with
command-line flags taking precedence. Exit codes: 0 success, 1 internal
error, 2 input/validation error, 3 contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset, DatasetError, load_cifar10, load_mnist_dir
from .diagnostics import (AttackConfig, KernelStack, export_filter_grid, heatmap_image, layer_filters,
                          layer_report, robust_accuracy, spatial_variance_heatmap, write_metric_rows, write_pgm)
from .lc_block import FoldError, Intermediate
from .models import ModelSpec, build_resnet_lc, fold_model, param_census, spatial_layers
from .trainer import (CheckpointError, TrainConfig, TrainState, load_checkpoint, save_checkpoint, train,
                      predict_labels)

logger = logging.getLogger("lcforge")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONTRACT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "cifar10"
    data_dir: Optional[str] = None
    out: str = "runs/latest"
    checkpoint: Optional[str] = None
    seed: int = 0
    depth: int = 20
    width: int = 16
    expansion: int = 1
    kernel_size: int = 3
    frozen: bool = False
    intermediate: str = "none"
    use_lc: bool = True
    epochs: int = 75
    lr0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-2
    batch_size: int = 256
    label_smoothing: float = 0.1
    eval_every: int = 1
    augment: bool = True
    train_subset: Optional[int] = None
    val_subset: Optional[int] = None
    subset_seed: int = 0
    stop_after: Optional[int] = None
    epsilon: list = field(default_factory=lambda: [1 / 255])
    draws: int = 100

    @classmethod
    def from_json(cls, path) -> dict:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return raw

    def validate(self) -> "RunConfig":
        if self.dataset not in ("cifar10", "mnist"):
            raise ConfigError(f"dataset must be cifar10 or mnist, got {self.dataset!r}")
        if not isinstance(self.epsilon, list) or not self.epsilon:
            raise ConfigError("epsilon must be a non-empty list")
        self.epsilon = [parse_epsilon(e) for e in self.epsilon]
        for name in ("train_subset", "val_subset", "stop_after"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"{name} must be a positive integer")
        if self.draws < 30:
            raise ConfigError("draws must be at least 30")
        try:
            Intermediate.parse(self.intermediate)
            self.model_spec(10, 3)
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def model_spec(self, num_classes: int, channels: int) -> ModelSpec:
        return ModelSpec(self.depth, self.width, self.expansion if self.use_lc else 1, self.kernel_size,
                         self.frozen, self.intermediate if self.use_lc else "none", self.use_lc,
                         num_classes, channels)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr0, self.momentum, self.weight_decay, self.batch_size,
                           self.label_smoothing, self.seed, self.eval_every, self.augment)


def parse_epsilon(value) -> float:
    """Accept floats or fractions such as ``"1/255"``."""
    try:
        eps = float(Fraction(str(value))) if isinstance(value, str) else float(value)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"invalid epsilon {value!r}") from None
    if eps < 0:
        raise ConfigError(f"epsilon must be non-negative, got {value!r}")
    return eps


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file with RunConfig keys")
    common.add_argument("--data-dir", dest="data_dir")
    common.add_argument("--dataset", choices=("cifar10", "mnist"))
    common.add_argument("--out")
    common.add_argument("--checkpoint")
    common.add_argument("--seed", type=int)
    common.add_argument("--depth", type=int)
    common.add_argument("--width", type=int)
    common.add_argument("--expansion", type=int)
    common.add_argument("--kernel-size", dest="kernel_size", type=int)
    common.add_argument("--frozen", action="store_const", const=True)
    common.add_argument("--baseline", dest="use_lc", action="store_const", const=False,
                        help="plain ResNet without LC-Blocks")
    common.add_argument("--intermediate", choices=("none", "relu", "bn", "bnrelu"))
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", dest="lr0", type=float)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--weight-decay", dest="weight_decay", type=float)
    common.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    common.add_argument("--eval-every", dest="eval_every", type=int)
    common.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    common.add_argument("--train-subset", dest="train_subset", type=int)
    common.add_argument("--val-subset", dest="val_subset", type=int)
    common.add_argument("--stop-after", dest="stop_after", type=int,
                        help="end training after this epoch (resume later with --checkpoint)")
    common.add_argument("--epsilon", nargs="+", help="attack budget(s) in pixel units, e.g. 1/255")
    common.add_argument("--draws", type=int, help="Monte-Carlo draws for the randomness threshold")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lcforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train a model and write checkpoint, history and manifest"),
                            ("evaluate", "report validation accuracy of a checkpoint"),
                            ("fold", "fold LC-Blocks into combined filters"),
                            ("analyze", "filter variance entropy and spatial variance heatmaps"),
                            ("attack", "clean and FGSM robust accuracy")):
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = RunConfig.from_json(args.config) if args.config else {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


# helpers ----------------------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             timeout=10, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def load_data(cfg: RunConfig) -> tuple:
    if not cfg.data_dir:
        raise DatasetError("no dataset directory given (--data-dir)")
    if not Path(cfg.data_dir).is_dir():
        raise DatasetError(f"dataset directory not found: {cfg.data_dir}")
    train_ds, test_ds = load_cifar10(cfg.data_dir) if cfg.dataset == "cifar10" else load_mnist_dir(cfg.data_dir)
    rng = np.random.default_rng(cfg.subset_seed)
    if cfg.train_subset is not None and cfg.train_subset < len(train_ds):
        idx = np.sort(rng.permutation(len(train_ds))[:cfg.train_subset])
        train_ds = Dataset(train_ds.images[idx], train_ds.labels[idx], train_ds.num_classes, name=train_ds.name)
        test_ds = test_ds.with_stats(train_ds.channel_mean, train_ds.channel_std)
    if cfg.val_subset is not None and cfg.val_subset < len(test_ds):
        test_ds = test_ds.subset(np.arange(cfg.val_subset))
    return train_ds, test_ds


def load_model(path):
    if not path:
        raise CheckpointError("no checkpoint given (--checkpoint)")
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_model()


def eval_dataset(cfg: RunConfig, ckpt) -> Dataset:
    _, test_ds = load_data(cfg)
    mean, std = ckpt.extra.get("channel_mean"), ckpt.extra.get("channel_std")
    if mean is not None:
        test_ds = test_ds.with_stats(mean, std)
    return test_ds


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# commands ---------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    start = time.time()
    train_ds, val_ds = load_data(cfg)
    spec = cfg.model_spec(train_ds.num_classes, train_ds.channels)
    tcfg = cfg.train_config()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_resnet_lc(spec, seed=cfg.seed)
    extra = {"channel_mean": train_ds.channel_mean.tolist(), "channel_std": train_ds.channel_std.tolist(),
             "model_seed": cfg.seed, "dataset": cfg.dataset}
    history_path = out / "history.csv"
    ckpt_path = out / "model.ckpt"

    state = TrainState()
    if cfg.checkpoint:
        resumed = load_checkpoint(cfg.checkpoint)
        if resumed.spec != spec:
            raise ConfigError("resume checkpoint was trained with a different model spec")
        model.load_state_dict(resumed.tensors)
        state = resumed.state
        logger.info("resuming from epoch %d", state.epoch)

    def checkpoint_epoch(st: TrainState) -> None:
        st.history.write_csv(history_path)
        save_checkpoint(ckpt_path, model, cfg=tcfg, state=st, extra=extra)

    try:
        history = train(model, train_ds, val_ds, tcfg, state=state, stop_after_epoch=cfg.stop_after,
                        on_epoch_end=checkpoint_epoch)
    except OSError:
        state.history.write_csv(history_path)
        raise
    census = param_census(model)
    manifest = {
        "command": "train",
        "seed": cfg.seed,
        "spec": spec.to_dict(),
        "model_name": spec.name,
        "config": asdict(cfg),
        "git_describe": git_describe(),
        "wall_time_s": round(time.time() - start, 3),
        "trainable_params": census["trainable_count"],
        "frozen_params": census["frozen_count"],
        "final_val_acc": history.val_acc[-1] if history.val_acc else None,
    }
    write_json(out / "manifest.json", manifest)
    print(f"{spec.name}: final val_acc={manifest['final_val_acc']} -> {ckpt_path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    ckpt, model = load_model(cfg.checkpoint)
    ds = eval_dataset(cfg, ckpt)
    preds = predict_labels(model, ds, cfg.batch_size)
    acc = float(np.mean(preds == ds.labels))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "predictions.npy", preds)
    write_json(out / "evaluate.json", {"checkpoint": str(cfg.checkpoint), "val_acc": acc, "n": len(ds)})
    print(f"val_acc={acc:.6f} ({len(ds)} samples)")
    return EXIT_OK


def cmd_fold(cfg: RunConfig) -> int:
    ckpt, model = load_model(cfg.checkpoint)
    if not ckpt.spec.use_lc:
        print("nothing to fold: model has no LC-Blocks")
        return EXIT_OK
    folded = fold_model(model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    layers = []
    folded_modules = dict(folded.named_modules())
    for name, _ in spatial_layers(model):
        w = folded_modules[name].weight.data
        blob = out / f"{name}.f32"
        np.ascontiguousarray(w, dtype="<f4").tofile(blob)
        export_filter_grid(w, out / f"{name}.pgm")
        layers.append({"layer": name, "shape": list(w.shape), "blob": blob.name})
    extra = dict(ckpt.extra, folded_from=str(cfg.checkpoint), source_spec=ckpt.spec.to_dict())
    save_checkpoint(out / "folded.ckpt", folded, cfg=ckpt.config, state=TrainState(ckpt.state.epoch, ckpt.state.step,
                    {}, ckpt.state.history), extra=extra)
    write_json(out / "fold_manifest.json", {"checkpoint": str(cfg.checkpoint), "layers": layers,
                                            "folded_checkpoint": "folded.ckpt"})
    print(f"folded {len(layers)} LC-Blocks -> {out / 'folded.ckpt'}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    _, model = load_model(cfg.checkpoint)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = layer_report(model, cfg.draws, seed=cfg.seed)
    rows = []
    for r in report:
        for metric in ("source", "num_kernels", "kernel_size", "variance_entropy", "randomness_threshold",
                       "normalized_variance_entropy"):
            rows.append((r["layer"], metric, r[metric]))
    write_metric_rows(out / "entropy.csv", rows)
    filters = layer_filters(model)
    for name, w, _ in (filters[0], filters[-1]):
        heat = spatial_variance_heatmap(KernelStack.from_weights(w))
        write_metric_rows(out / f"heatmap_{name}.csv",
                          [(name, f"var_r{r}_c{c}", heat[r, c]) for r in range(heat.shape[0])
                           for c in range(heat.shape[1])])
        write_pgm(out / f"heatmap_{name}.pgm", heatmap_image(heat))
        export_filter_grid(w, out / f"filters_{name}.pgm")
    for r in report:
        print(f"{r['layer']:<24} H={r['variance_entropy']:.4f} normalized={r['normalized_variance_entropy']:.4f}")
    return EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    ckpt, model = load_model(cfg.checkpoint)
    ds = eval_dataset(cfg, ckpt)
    smoothing = ckpt.config.label_smoothing if ckpt.config else cfg.label_smoothing
    rows = []
    for eps in sorted(set(cfg.epsilon)):
        clean, robust = robust_accuracy(model, ds, AttackConfig(eps, smoothing), cfg.batch_size)
        rows.append((eps, clean, robust))
        print(f"epsilon={eps:.6g} clean_acc={clean:.6f} robust_acc={robust:.6f}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["epsilon,clean_acc,robust_acc"] + [f"{e!r},{c!r},{r!r}" for e, c, r in rows]
    (out / "attack.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "fold": cmd_fold, "analyze": cmd_analyze,
            "attack": cmd_attack}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        threads = os.environ.get("LCFORGE_THREADS")
        if threads:
            with threadpool_limits(limits=int(threads)):
                return COMMANDS[args.command](cfg)
        return COMMANDS[args.command](cfg)
    except FoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit 1
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
