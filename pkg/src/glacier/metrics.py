"""Per-iteration metrics CSV, per-epoch accuracy CSV, and run reports."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

METRICS_HEADER = [
    "iteration",
    "epoch",
    "loss",
    "lr",
    "frontmost_active",
    "frozen_param_fraction",
    "fwd_flops",
    "bwd_flops",
    "bytes_allreduced",
    "cache_hits",
    "wall_ms",
]

EPOCHS_HEADER = ["epoch", "val_accuracy"]


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)  # shortest round-trip form: parsing gives the bits back
    return str(value)


class CsvWriter:
    """Append-only CSV with a fixed header; floats printed at full precision."""

    def __init__(self, path: str, header: list[str]):
        self.path = path
        self.header = header
        self.rows_written = 0
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(header)

    def write_row(self, row: dict) -> None:
        missing = set(self.header) - set(row)
        if missing:
            raise ValueError(f"metrics row missing columns: {sorted(missing)}")
        self._writer.writerow([_format(row[k]) for k in self.header])
        self.rows_written += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def csv_without_column(path: str, column: str) -> str:
    """The file's content with one column removed (for determinism diffs)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return ""
    idx = rows[0].index(column)
    out = io.StringIO()
    writer = csv.writer(out)
    for row in rows:
        writer.writerow(row[:idx] + row[idx + 1 :])
    return out.getvalue()


@dataclass
class RunSummary:
    iterations: int
    total_fwd_flops: float
    total_bwd_flops: float
    total_bytes_allreduced: float
    total_cache_hits: int
    final_frozen_fraction: float
    final_val_accuracy: float | None
    timeline: list[str]

    def lines(self) -> list[str]:
        out = [
            f"iterations            {self.iterations}",
            f"fwd FLOPs             {self.total_fwd_flops:.6g}",
            f"bwd FLOPs             {self.total_bwd_flops:.6g}",
            f"bytes all-reduced     {self.total_bytes_allreduced:.6g}",
            f"cache hits            {self.total_cache_hits}",
            f"final frozen fraction {self.final_frozen_fraction:.4f}",
        ]
        if self.final_val_accuracy is not None:
            out.append(f"final val accuracy    {self.final_val_accuracy:.4f}")
        if self.timeline:
            out.append("freeze/unfreeze timeline:")
            out.extend("  " + line for line in self.timeline)
        return out


def summarize(metrics_path: str, decisions_path: str | None = None,
              epochs_path: str | None = None) -> RunSummary:
    rows = read_csv(metrics_path)
    timeline = []
    if decisions_path and os.path.exists(decisions_path):
        with open(decisions_path) as fh:
            timeline = [line.strip() for line in fh if "event=freeze" in line
                        or "event=unfreeze_all" in line]
    final_acc = None
    if epochs_path and os.path.exists(epochs_path):
        erows = read_csv(epochs_path)
        if erows:
            final_acc = float(erows[-1]["val_accuracy"])
    return RunSummary(
        iterations=len(rows),
        total_fwd_flops=sum(float(r["fwd_flops"]) for r in rows),
        total_bwd_flops=sum(float(r["bwd_flops"]) for r in rows),
        total_bytes_allreduced=sum(float(r["bytes_allreduced"]) for r in rows),
        total_cache_hits=sum(int(r["cache_hits"]) for r in rows),
        final_frozen_fraction=float(rows[-1]["frozen_param_fraction"]) if rows else 0.0,
        final_val_accuracy=final_acc,
        timeline=timeline,
    )


def frozen_fraction_by_epoch(metrics_path: str, out_path: str) -> None:
    """Plot-data CSV: mean frozen_param_fraction per epoch."""
    rows = read_csv(metrics_path)
    by_epoch: dict[int, list[float]] = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append(float(r["frozen_param_fraction"]))
    writer = CsvWriter(out_path, ["epoch", "frozen_param_fraction"])
    for epoch in sorted(by_epoch):
        values = by_epoch[epoch]
        writer.write_row({"epoch": epoch, "frozen_param_fraction": sum(values) / len(values)})
    writer.close()


def report(metrics_path: str, baseline_path: str | None = None) -> list[str]:
    """Human-readable run report; add a baseline for savings percentages."""
    run_dir = os.path.dirname(metrics_path)
    summary = summarize(
        metrics_path,
        decisions_path=os.path.join(run_dir, "decisions.log"),
        epochs_path=os.path.join(run_dir, "epochs.csv"),
    )
    lines = summary.lines()
    if baseline_path:
        base = summarize(baseline_path)
        if base.total_bwd_flops > 0:
            saved = 1.0 - summary.total_bwd_flops / base.total_bwd_flops
            lines.append(f"bwd FLOPs saved       {saved:.2%}")
        if base.total_fwd_flops > 0:
            saved = 1.0 - summary.total_fwd_flops / base.total_fwd_flops
            lines.append(f"fwd FLOPs saved       {saved:.2%}")
        if base.total_bytes_allreduced > 0:
            saved = 1.0 - summary.total_bytes_allreduced / base.total_bytes_allreduced
            lines.append(f"bytes saved           {saved:.2%}")
    plot_path = os.path.join(run_dir, "frozen_fraction_by_epoch.csv")
    frozen_fraction_by_epoch(metrics_path, plot_path)
    lines.append(f"plot data             {plot_path}")
    return lines
