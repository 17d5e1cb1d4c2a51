import json

import pytest

from app.main import main
from app.services import reporting


@pytest.fixture
def config_path(tmp_path):
    config = {
        "dataset": str(tmp_path / "data" / "sim"),
        "out_dir": str(tmp_path / "runs"),
        "epochs": 3,
        "batch_size": 8,
        "learning_rate": 1e-3,
        "latent_dim": 2,
        "hidden_sizes": [8],
        "ingest_epochs": 1,
        "seeds": [0],
        "split": [0.5, 0.25, 0.25],
        "schedule": [{"epoch": 0, "classes": [0]}, {"epoch": 1, "classes": [0, 1]}],
        "simulation": {
            "n_floors": 3,
            "duration": 20.0,
            "burn_in": 2.0,
            "nperseg": 256,
            "output": str(tmp_path / "data" / "sim"),
            "scenarios": [
                {"label": 0, "n_samples": 8},
                {"label": 1, "reductions": {"1": 0.3}, "n_samples": 8},
            ],
        },
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(config))
    return str(path)


@pytest.fixture
def trained(config_path, tmp_path):
    assert main(["simulate", "--config", config_path]) == 0
    assert main(["train", "--config", config_path]) == 0
    return tmp_path / "runs"


def test_simulate_writes_dataset(config_path, tmp_path):
    assert main(["simulate", "--config", config_path]) == 0
    descriptor = json.loads((tmp_path / "data" / "sim.json").read_text())
    assert descriptor["rows"] == 16
    assert (tmp_path / "data" / "sim.bin").stat().st_size == 16 * descriptor["dim"] * 8


def test_simulate_is_reproducible(config_path, tmp_path):
    assert main(["simulate", "--config", config_path]) == 0
    first = (tmp_path / "data" / "sim.bin").read_bytes()
    assert main(["simulate", "--config", config_path, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again.bin").read_bytes() == first


def test_train_artifacts(trained):
    run_dir = trained / "seed_0"
    for name in ("checkpoint.ckpt", "trace.csv", "metrics.json", "pca.svg"):
        assert (run_dir / name).exists()
    trace = reporting.read_table(run_dir / "trace.csv")
    assert list(trace.columns) == reporting.TRACE_COLUMNS
    assert trace["epoch"].tolist() == [1, 2, 3]
    assert trace["classes"].astype(str).tolist()[0] == "0"
    assert (run_dir / "trace.csv").read_text().startswith("# config_hash=")
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert set(metrics["test"]) == {"dda", "acc", "ari", "nmi"}
    summary = reporting.read_table(trained / "summary.csv")
    assert summary.loc[0, "runs"] == 1


def test_eval(trained, config_path, tmp_path):
    out = tmp_path / "eval"
    code = main(["eval", "--config", config_path, "--checkpoint", str(trained / "seed_0" / "checkpoint.ckpt"),
                 "--out", str(out)])
    assert code == 0
    assignments = reporting.read_table(out / "assignments.csv")
    assert len(assignments) == 16
    assert set(reporting.read_table(out / "metrics.csv").columns) == {"dda", "acc", "ari", "nmi"}


def test_stream(trained, config_path, tmp_path):
    out = tmp_path / "stream"
    ckpt = str(trained / "seed_0" / "checkpoint.ckpt")
    batch = str(tmp_path / "data" / "sim.json")
    assert main(["stream", "--config", config_path, "--checkpoint", ckpt, "--out", str(out), batch]) == 0
    verdicts = reporting.read_table(out / "verdicts.csv")
    assert list(verdicts.columns) == reporting.VERDICT_COLUMNS
    assert len(verdicts) == 16
    assert (out / "checkpoint.ckpt").exists()


def test_stream_without_batches(trained, config_path, tmp_path):
    out = tmp_path / "idle"
    ckpt = str(trained / "seed_0" / "checkpoint.ckpt")
    assert main(["stream", "--config", config_path, "--checkpoint", ckpt, "--out", str(out)]) == 0
    assert not (out / "verdicts.csv").exists()


def test_export(trained, config_path, tmp_path):
    out = tmp_path / "export"
    assert main(["export", "--config", config_path, "--out", str(out)]) == 0
    assert len(reporting.read_table(out / "dataset.csv")) == 16
    ckpt = str(trained / "seed_0" / "checkpoint.ckpt")
    assert main(["export", "--config", config_path, "--checkpoint", ckpt, "--out", str(out)]) == 0
    latent = reporting.read_table(out / "latent_pca.csv")
    assert list(latent.columns) == ["sample_id", "label", "cluster", "pc1", "pc2"]
    assert (out / "latent_pca.svg").exists()


def test_sensitivity(config_path, tmp_path):
    assert main(["simulate", "--config", config_path]) == 0
    out = tmp_path / "sens"
    assert main(["sensitivity", "--config", config_path, "--alphas", "1", "10", "--out", str(out)]) == 0
    table = reporting.read_table(out / "sensitivity.csv")
    assert table["alpha"].tolist() == [1.0, 10.0]
    assert len(reporting.read_table(out / "sensitivity_runs.csv")) == 2


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2

    def test_missing_dataset(self, config_path):
        assert main(["train", "--config", config_path]) == 3

    def test_corrupted_checkpoint(self, trained, config_path, tmp_path):
        path = trained / "seed_0" / "checkpoint.ckpt"
        raw = bytearray(path.read_bytes())
        raw[-20] ^= 0xFF
        path.write_bytes(bytes(raw))
        assert main(["eval", "--config", config_path, "--checkpoint", str(path)]) == 3

    def test_checkpoint_required(self, config_path):
        assert main(["eval", "--config", config_path]) == 2
