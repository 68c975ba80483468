#!/usr/bin/env python3
"""Paired ablation on the blobs benchmark: freezing on vs off.

Runs the same config twice with an identical seed, then prints the
savings breakdown (backward/forward FLOPs, all-reduce bytes) and the
freeze/unfreeze timeline. Point --config at any run config; the freezing
run's outputs land in <out>/freeze and the baseline's in <out>/baseline.

Usage:
    python scripts/run_blobs.py [--config configs/blobs.ini] [--out runs/ablation]
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from glacier.config import parse_config
from glacier.harness import train
from glacier.metrics import report


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/blobs.ini")
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    results = {}
    for name, freezing in (("freeze", True), ("baseline", False)):
        cfg = parse_config(args.config)
        cfg.freezing_enabled = freezing
        cfg.out_dir = os.path.join(args.out, name)
        if args.seed is not None:
            cfg.seed = args.seed
        started = time.perf_counter()
        results[name] = train(cfg)
        elapsed = time.perf_counter() - started
        acc = results[name].final_val_accuracy
        acc_str = f"{acc:.4f}" if acc is not None else "n/a"
        print(f"[{name}] done in {elapsed:.1f}s, final val accuracy {acc_str}")

    print("\n=== freezing run vs baseline ===")
    for line in report(results["freeze"].metrics_path, results["baseline"].metrics_path):
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
