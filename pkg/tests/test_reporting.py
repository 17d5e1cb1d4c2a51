import numpy as np
import pandas as pd
import pytest

from app.services import reporting


def test_table_carries_hash_and_seed(tmp_path):
    frame = pd.DataFrame({"epoch": [1, 2], "acc": [0.5, 0.75]})
    path = reporting.write_table(frame, tmp_path / "out" / "trace.csv", "abc123", seed=4)
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc123 seed=4"
    assert lines[1] == "epoch,acc"
    pd.testing.assert_frame_equal(reporting.read_table(path), frame)


def test_trace_frame_has_fixed_columns():
    frame = reporting.trace_frame([{"epoch": 1, "acc": 0.9}])
    assert list(frame.columns) == reporting.TRACE_COLUMNS
    assert frame.loc[0, "epoch"] == 1


def test_summarize_mean_and_std():
    rows = [
        {"alpha": 1.0, "dda": 1.0, "acc": 0.8, "ari": 0.5, "nmi": 0.6},
        {"alpha": 1.0, "dda": 1.0, "acc": 0.9, "ari": 0.7, "nmi": 0.6},
        {"alpha": 10.0, "dda": 0.9, "acc": 0.7, "ari": 0.4, "nmi": 0.5},
    ]
    overall = reporting.summarize(rows[:2])
    assert overall.loc[0, "acc_mean"] == pytest.approx(0.85)
    assert overall.loc[0, "acc_std"] == pytest.approx(0.05)
    assert overall.loc[0, "acc"] == "0.8500±0.0500"
    assert overall.loc[0, "runs"] == 2

    grouped = reporting.summarize(rows, group="alpha")
    assert grouped["alpha"].tolist() == [1.0, 10.0]
    assert grouped.loc[1, "acc_std"] == 0.0


def test_json_handles_numpy(tmp_path):
    path = reporting.write_json({"k": np.int64(3), "v": np.array([1.0, 2.0])}, tmp_path / "m.json")
    assert '"k": 3' in path.read_text()


def test_scatter_is_byte_stable(tmp_path, rng):
    coords = rng.standard_normal((30, 2))
    clusters = np.repeat([0, 4, 7], 10)
    first = reporting.scatter_svg(coords, clusters, tmp_path / "a.svg", title="latent")
    second = reporting.scatter_svg(coords, clusters, tmp_path / "b.svg", title="latent")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text().lstrip().startswith("<?xml")
