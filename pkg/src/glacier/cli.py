"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from glacier.config import ConfigError, parse_config


def _cmd_train(args) -> int:
    from glacier.harness import train

    cfg = parse_config(args.config)
    if args.no_freeze:
        cfg.freezing_enabled = False
    if args.no_cache:
        cfg.cache.enabled = False
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    result = train(cfg)
    print(f"run complete: {result.out_dir}")
    print(f"  evaluation interval n = {result.resolved_n}")
    if result.final_val_accuracy is not None:
        print(f"  final val accuracy = {result.final_val_accuracy:.4f}")
    print(f"  metrics   {result.metrics_path}")
    print(f"  decisions {result.decisions_path}")
    return 0


def _cmd_eval(args) -> int:
    from glacier.harness import build_datasets, evaluate, load_checkpoint, restore_model

    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    data_cfg = parse_config(args.data).dataset
    train_ds, val_ds, _ = build_datasets(data_cfg, seed=ckpt.seed)
    dataset = val_ds if val_ds is not None else train_ds
    acc = evaluate(model, dataset)
    print(f"accuracy = {acc:.4f} on {dataset.name} ({len(dataset)} samples)")
    return 0


def _cmd_quantize(args) -> int:
    from glacier.harness import load_checkpoint, restore_model
    from glacier.quant import QuantizedTensor, snapshot_reference

    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    ref = snapshot_reference(model, snapshot_iteration=ckpt.iteration)
    arrays: dict[str, np.ndarray] = {"__arch_json__": np.frombuffer(
        ckpt.arch_json.encode(), dtype=np.uint8)}
    for m in ref.modules:
        for i, layer in enumerate(m.layers):
            base = f"m{m.index}_l{i}"
            weight = getattr(layer, "weight", None)
            if isinstance(weight, QuantizedTensor):
                arrays[f"{base}.q"] = weight.q
                arrays[f"{base}.scale"] = np.array([weight.scale], dtype=np.float64)
                arrays[f"{base}.bias"] = layer.bias
    np.savez(args.out, **arrays)
    total_q = sum(a.size for k, a in arrays.items() if k.endswith(".q"))
    print(f"wrote {args.out}: {len(arrays)} arrays, {total_q} int8 weights")
    return 0


def _cmd_report(args) -> int:
    from glacier.metrics import report

    for line in report(args.metrics, args.baseline):
        print(line)
    return 0


def _cmd_inspect_cache(args) -> int:
    from glacier.cache import inspect_cache

    rows = inspect_cache(args.dir)
    total = 0
    for r in rows:
        total += r["bytes"]
        print(
            f"{r['file']}@{r['offset']}: epoch={r['epoch']} batch={r['batch_seq']} "
            f"boundary={r['boundary_module']} version={r['freeze_version']} "
            f"samples={r['samples']} shape={r['shape']} bytes={r['bytes']}"
        )
    print(f"total: {len(rows)} entries, {total} bytes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glacier",
        description="Train small networks with plasticity-guided layer freezing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training job from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--no-freeze", action="store_true", help="ablation: disable freezing")
    p.add_argument("--no-cache", action="store_true", help="ablation: disable activation caching")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory override")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="config file providing the [dataset] section")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("quantize", help="write the int8 reference snapshot of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("report", help="summarize a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--baseline", default=None, help="baseline metrics CSV for savings")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("inspect-cache", help="list activation cache entries")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=_cmd_inspect_cache)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
