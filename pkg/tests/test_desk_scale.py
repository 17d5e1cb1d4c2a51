from pathlib import Path

import numpy as np
import pytest

from app.config import DamageScenario, EngineConfig, SimulationConfig, load_config
from app.services import engine, metrics, runner, simulator

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def shear_data():
    config = SimulationConfig(
        scenarios=[
            DamageScenario(label=0, n_samples=160),
            DamageScenario(label=5, reductions={2: 0.15, 4: 0.20, 6: 0.25}, n_samples=60),
        ],
        seed=11,
    )
    return simulator.build_dataset(config, workers=2)


@pytest.fixture(scope="module")
def healthy_model(shear_data):
    healthy = shear_data.features[shear_data.labels == 0]
    config = EngineConfig(epochs=40, learning_rate=1e-3, ingest_epochs=3, rng_seed=0)
    return engine.fit_initial(config, healthy[:120]), healthy[120:]


def test_held_out_healthy_batch_is_mostly_normal(healthy_model):
    ckpt, held_out = healthy_model
    _, _, anomaly = engine.ingest(ckpt, held_out)
    assert anomaly.mean() <= 0.05


def test_damaged_batch_is_detected(healthy_model, shear_data):
    ckpt, held_out = healthy_model
    damaged = shear_data.features[shear_data.labels == 5]
    updated, _, anomaly = engine.ingest(ckpt, damaged)
    assert anomaly.mean() >= 0.9
    assert updated.k_active > ckpt.k_active

    mixed = np.vstack([held_out, damaged])
    truth = np.r_[np.zeros(len(held_out), dtype=int), np.full(len(damaged), 5)]
    verdicts = engine.score(updated, engine.normalize(updated, mixed))
    assert metrics.dda(verdicts.anomaly, truth) >= 0.9


def test_earlier_class_is_not_forgotten(healthy_model, shear_data):
    ckpt, held_out = healthy_model
    truth = np.zeros(len(held_out), dtype=int)
    before = engine.score(ckpt, engine.normalize(ckpt, held_out))
    updated, _, _ = engine.ingest(ckpt, shear_data.features[shear_data.labels == 5])
    after = engine.score(updated, engine.normalize(updated, held_out))
    assert metrics.acc(after.assigned, truth) >= metrics.acc(before.assigned, truth) - 0.10
    assert (~after.anomaly).mean() >= (~before.anomaly).mean() - 0.10


DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


@pytest.fixture(scope="module")
def desk_config():
    return load_config(str(DESK_CONFIG))


@pytest.fixture(scope="module")
def desk_data(desk_config):
    return simulator.build_dataset(desk_config.simulation, workers=4)


@pytest.fixture(scope="module")
def desk_runs(desk_config, desk_data):
    return runner.train_many(desk_config, desk_data, [0, 1, 2], workers=3)


def test_desk_scale_scores_over_three_seeds(desk_runs):
    means = {name: np.mean([run.test[name] for run in desk_runs]) for name in ("dda", "acc", "ari", "nmi")}
    assert means["dda"] >= 0.95
    assert means["acc"] >= 0.90
    assert means["ari"] >= 0.80
    assert means["nmi"] >= 0.80


def _dips_and_recovers(trace, introductions) -> bool:
    acc = [row["acc"] for row in trace]
    for epoch in introductions:
        before = acc[epoch - 1]
        if before - acc[epoch] < 0.02:
            return False
        if max(acc[epoch:epoch + 30]) < before - 0.05:
            return False
    return True


def test_accuracy_dips_then_recovers_at_each_introduction(desk_runs, desk_config):
    introductions = [stage.epoch for stage in desk_config.schedule[1:]]
    recovered = sum(_dips_and_recovers(run.trace, introductions) for run in desk_runs)
    assert recovered >= 2


def test_accuracy_is_insensitive_to_alpha(desk_config, desk_data):
    config = desk_config.model_copy(update={"seeds": [0]})
    results = runner.sensitivity(config, desk_data, [0.1, 1.0, 10.0, 50.0, 100.0], workers=5)
    accs = [result.test["acc"] for result in results]
    assert max(accs) - min(accs) <= 0.08
