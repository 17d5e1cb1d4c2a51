import json
from pathlib import Path

import pytest

from app.config import (
    DamageScenario, EngineConfig, RunConfig, SimulationConfig, config_hash, get_settings, load_config,
)
from app.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, payload) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload) if not isinstance(payload, str) else payload)
    return str(path)


class TestLoadConfig:
    def test_defaults_without_file(self):
        config = load_config(None)
        assert config.alpha == 10.0
        assert config.batch_size == 32
        assert config.learning_rate == 5e-5
        assert config.run_seeds() == [0]

    def test_shipped_configs(self):
        desk = load_config(str(CONFIG_DIR / "desk.json"))
        full = load_config(str(CONFIG_DIR / "full.json"))
        assert [stage.epoch for stage in desk.schedule] == [0, 20, 40, 60]
        assert sum(s.n_samples for s in full.simulation.scenarios) == 2000
        assert full.run_seeds() == [0, 1, 2, 3, 4]

    def test_overrides(self, tmp_path):
        config = load_config(write(tmp_path, {"alpha": 2.0}), latent_dim=3, epochs=None)
        assert config.alpha == 2.0 and config.latent_dim == 3 and config.epochs == 150

    @pytest.mark.parametrize("payload", [
        "{not json",
        {"unknown_key": 1},
        {"alpha": 0.0},
        {"split": [0.5, 0.5, 0.5]},
        {"schedule": [{"epoch": 5, "classes": [0]}]},
        {"schedule": [{"epoch": 0, "classes": [0]}, {"epoch": 0, "classes": [0, 1]}]},
        {"hidden_sizes": [8, 0]},
        {"simulation": {"n_floors": 3, "scenarios": [{"label": 1, "reductions": {"5": 0.1}, "n_samples": 2}]}},
        {"simulation": {"band": [5.0, 1.0]}},
    ])
    def test_invalid(self, tmp_path, payload):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, payload))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))


class TestModels:
    def test_engine_config_projection(self):
        config = RunConfig(alpha=3.0, dataset="data/x", seeds=[4, 9])
        engine_config = config.engine_config()
        assert isinstance(engine_config, EngineConfig)
        assert engine_config.alpha == 3.0
        assert config.run_seeds() == [4, 9]
        assert RunConfig(rng_seed=5, repeats=3).run_seeds() == [5, 6, 7]

    def test_config_hash(self):
        assert config_hash(EngineConfig()) == config_hash(EngineConfig())
        assert config_hash(EngineConfig()) != config_hash(EngineConfig(alpha=1.0))
        assert len(config_hash(EngineConfig())) == 16

    def test_damage_scenario_bounds(self):
        with pytest.raises(ValueError):
            DamageScenario(label=1, reductions={0: 0.1}, n_samples=1)
        with pytest.raises(ValueError):
            DamageScenario(label=1, reductions={1: 1.0}, n_samples=1)

    def test_default_pairs(self):
        assert SimulationConfig(n_floors=3, scenarios=[]).resolved_pairs() == [(2, 1), (3, 2)]
        assert SimulationConfig(pairs=[[8, 1]]).resolved_pairs() == [(8, 1)]


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("DPVIL_LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("DPVIL_WORKERS", "3")
    get_settings.cache_clear()
    settings = get_settings()
    assert settings.log_level == "DEBUG"
    assert settings.workers == 3
    assert settings.record_runs is False
