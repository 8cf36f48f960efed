"""Delimited report files: round-trips, byte stability, and figure output."""

import numpy as np
import pytest

from linflow import reporting


def test_roundtrip_preserves_floats_exactly(tmp_path):
    rows = [{"a": 1, "b": 0.1, "c": 1 / 3, "d": "text"},
            {"a": 2, "b": -5.25e-17, "c": 2.0, "d": "x"}]
    path = tmp_path / "r.tsv"
    reporting.write_records(path, rows)
    back = reporting.read_records(path)
    assert len(back) == 2
    for row, orig in zip(back, rows):
        assert int(row["a"]) == orig["a"]
        assert float(row["b"]) == orig["b"]  # repr floats round-trip exactly
        assert float(row["c"]) == orig["c"]
        assert row["d"] == orig["d"]


def test_write_is_byte_stable(tmp_path):
    rows = [{"x": np.float32(0.30000001), "y": np.int64(7), "z": True}]
    p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
    reporting.write_records(p1, rows)
    reporting.write_records(p2, rows)
    assert p1.read_bytes() == p2.read_bytes()


def test_column_order_and_missing_cells(tmp_path):
    rows = [{"b": 1, "a": 2}, {"a": 3}]
    path = tmp_path / "r.tsv"
    reporting.write_records(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "b\ta"
    assert lines[2] == "\t3"  # second row has no b


def test_explicit_columns(tmp_path):
    path = tmp_path / "r.tsv"
    reporting.write_records(path, [{"a": 1, "b": 2}], columns=["b"])
    assert path.read_text() == "b\n2\n"


def test_empty_rows(tmp_path):
    path = tmp_path / "r.tsv"
    reporting.write_records(path, [])
    assert reporting.read_records(path) == []


def test_write_metrics(tmp_path):
    path = tmp_path / "m.tsv"
    reporting.write_metrics(path, {"w2": 0.25, "count": 4})
    lines = path.read_text().splitlines()
    assert lines[0] == "metric\tvalue"
    assert lines[1] == "w2\t0.25"
    assert lines[2] == "count\t4"


def test_format_value():
    assert reporting.format_value(True) == "1"
    assert reporting.format_value(np.float64(0.5)) == "0.5"
    assert reporting.format_value(np.int32(-3)) == "-3"
    assert reporting.format_value("s") == "s"


@pytest.fixture
def loss_rows():
    rng = np.random.default_rng(0)
    return [{"step": i, "loss": float(np.exp(-i / 50) + 0.1 * rng.random()),
             "loss_obj": float(rng.random())} for i in range(200)]


def test_figures_render_nonempty(tmp_path, loss_rows):
    rng = np.random.default_rng(1)
    jobs = [
        lambda p: reporting.plot_loss_curves(loss_rows, ["loss"], p, "t"),
        lambda p: reporting.plot_r_history(rng.random((100, 8)), p),
        lambda p: reporting.plot_scaling(
            [{"kernel": "softmax", "n": n, "median_s": (n / 1e4) ** 2}
             for n in (1024, 2048)] +
            [{"kernel": "linear", "n": n, "median_s": n / 1e6}
             for n in (1024, 2048)],
            {"softmax": 2.0, "linear": 1.0}, p),
        lambda p: reporting.plot_samples(rng.standard_normal((8, 16, 2)), p),
        lambda p: reporting.plot_greedy_curve([0.1, 0.2, 0.5], p),
    ]
    for i, job in enumerate(jobs):
        path = tmp_path / f"fig{i}.png"
        job(path)
        assert path.stat().st_size > 2000


def test_figures_are_byte_deterministic(tmp_path, loss_rows):
    p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
    reporting.plot_loss_curves(loss_rows, ["loss", "loss_obj"], p1, "curves")
    reporting.plot_loss_curves(loss_rows, ["loss", "loss_obj"], p2, "curves")
    assert p1.read_bytes() == p2.read_bytes()
