"""Desk-scale trend runs comparing a learnable ResNet with frozen-random LC variants.

Run as ``python -m lcforge.experiments --data-dir DIR --out DIR``. Every
configuration is trained for each seed on the same fixed train subset and
scored on the full test split; results land in ``trend.csv``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from statistics import mean

from .cli import RunConfig, load_data
from .models import build_resnet_lc
from .trainer import evaluate, train

logger = logging.getLogger("lcforge")

TREND_CONFIGS = {
    "baseline": dict(use_lc=False),
    "frozen_e1": dict(frozen=True, expansion=1),
    "frozen_e8": dict(frozen=True, expansion=8),
    "frozen_e8_bnrelu": dict(frozen=True, expansion=8, intermediate="bnrelu"),
}


def trend_base(data_dir, **overrides) -> RunConfig:
    """ResNet-{LC-}14-8 on a fixed 10,000-image subset for 20 epochs."""
    base = RunConfig(data_dir=str(data_dir), depth=14, width=8, epochs=20, train_subset=10_000, subset_seed=0,
                     batch_size=128, eval_every=20)
    return replace(base, **overrides).validate()


def run_trend(data_dir, out, seeds=(0, 1, 2), configs=None, **overrides) -> dict:
    """Train every (config, seed) pair and return ``{config: [acc per seed]}``."""
    names = list(configs or TREND_CONFIGS)
    base = trend_base(data_dir, **overrides)
    train_ds, test_ds = load_data(base)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = {name: [] for name in names}
    rows = []
    for name in names:
        for seed in seeds:
            cfg = replace(base, seed=seed, **TREND_CONFIGS[name]).validate()
            model = build_resnet_lc(cfg.model_spec(train_ds.num_classes, train_ds.channels), seed=seed)
            start = time.time()
            train(model, train_ds, None, cfg.train_config())
            acc = evaluate(model, test_ds)
            results[name].append(acc)
            rows.append((name, seed, acc, round(time.time() - start, 1)))
            logger.info("%s seed=%d acc=%.4f", name, seed, acc)
    with open(out / "trend.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "seed", "val_acc", "wall_time_s"])
        w.writerows(rows)
    return results


def trend_checks(results: dict) -> dict:
    """Directional checks on mean accuracies; missing configs yield ``None``."""
    m = {k: mean(v) for k, v in results.items() if v}
    checks = {}

    def need(*keys):
        return all(k in m for k in keys)

    checks["baseline_min"] = m["baseline"] >= 0.55 if need("baseline") else None
    checks["e8_beats_e1"] = m["frozen_e8"] - m["frozen_e1"] >= 0.02 if need("frozen_e8", "frozen_e1") else None
    checks["e8_near_baseline"] = (m["baseline"] - m["frozen_e8"] <= 0.06
                                  if need("baseline", "frozen_e8") else None)
    checks["bnrelu_not_worse"] = (m["frozen_e8_bnrelu"] >= m["frozen_e8"]
                                  if need("frozen_e8_bnrelu", "frozen_e8") else None)
    return checks


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m lcforge.experiments", description=__doc__.splitlines()[0])
    parser.add_argument("--data-dir", required=True)
    parser.add_argument("--out", default="runs/trend")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--configs", nargs="+", choices=sorted(TREND_CONFIGS))
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--train-subset", dest="train_subset", type=int)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = {k: v for k, v in (("epochs", args.epochs), ("train_subset", args.train_subset)) if v is not None}
    results = run_trend(args.data_dir, args.out, args.seeds, args.configs, **overrides)
    for name, check in trend_checks(results).items():
        if check is not None:
            print(f"{name}: {'PASS' if check else 'FAIL'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
