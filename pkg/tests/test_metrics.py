import pytest

from glacier.metrics import (
    METRICS_HEADER,
    CsvWriter,
    csv_without_column,
    frozen_fraction_by_epoch,
    read_csv,
    report,
    summarize,
)


def write_rows(path, rows):
    writer = CsvWriter(str(path), METRICS_HEADER)
    for row in rows:
        writer.write_row(row)
    writer.close()


def fake_row(i, epoch=0, bwd=100.0, frozen=0.0):
    return {
        "iteration": i,
        "epoch": epoch,
        "loss": 1.0,
        "lr": 0.1,
        "frontmost_active": 0,
        "frozen_param_fraction": frozen,
        "fwd_flops": 50.0,
        "bwd_flops": bwd,
        "bytes_allreduced": 8.0,
        "cache_hits": 0,
        "wall_ms": 1.5,
    }


def test_writer_round_trips_floats_exactly(tmp_path):
    path = tmp_path / "m.csv"
    value = 0.014114326040931546
    write_rows(path, [fake_row(0, frozen=value)])
    assert float(read_csv(str(path))[0]["frozen_param_fraction"]) == value


def test_writer_rejects_missing_columns(tmp_path):
    writer = CsvWriter(str(tmp_path / "m.csv"), METRICS_HEADER)
    with pytest.raises(ValueError, match="loss"):
        writer.write_row({"iteration": 0})
    writer.close()


def test_csv_without_column(tmp_path):
    path = tmp_path / "m.csv"
    write_rows(path, [fake_row(0), fake_row(1)])
    stripped = csv_without_column(str(path), "wall_ms")
    assert "wall_ms" not in stripped.splitlines()[0]
    assert len(stripped.splitlines()) == 3


def test_report_savings_match_column_arithmetic(tmp_path, capsys):
    # paired ablation: savings must equal 1 - ratio of summed bwd columns
    run = tmp_path / "run" / "metrics.csv"
    base = tmp_path / "base" / "metrics.csv"
    write_rows(run, [fake_row(i, bwd=60.0) for i in range(10)])
    write_rows(base, [fake_row(i, bwd=100.0) for i in range(10)])
    lines = report(str(run), str(base))
    saved = next(l for l in lines if l.startswith("bwd FLOPs saved"))
    assert "40.00%" in saved  # 1 - 600/1000
    assert (tmp_path / "run" / "frozen_fraction_by_epoch.csv").exists()


def test_summarize_totals(tmp_path):
    path = tmp_path / "m.csv"
    write_rows(path, [fake_row(i, epoch=i // 2, frozen=0.5) for i in range(4)])
    summary = summarize(str(path))
    assert summary.iterations == 4
    assert summary.total_bwd_flops == 400.0
    assert summary.final_frozen_fraction == 0.5


def test_frozen_fraction_by_epoch(tmp_path):
    path = tmp_path / "m.csv"
    write_rows(
        path,
        [fake_row(0, epoch=0, frozen=0.0), fake_row(1, epoch=0, frozen=0.5),
         fake_row(2, epoch=1, frozen=1.0)],
    )
    out = tmp_path / "plot.csv"
    frozen_fraction_by_epoch(str(path), str(out))
    rows = read_csv(str(out))
    assert [float(r["frozen_param_fraction"]) for r in rows] == [0.25, 1.0]
