import numpy as np
import pytest

from app.config import DamageScenario, EngineConfig, SimulationConfig, get_settings
from app.services import dpmm


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    """No run registry and no shared output directory unless a test opts in."""
    monkeypatch.setenv("DPVIL_RECORD_RUNS", "false")
    monkeypatch.setenv("DPVIL_DEFAULT_OUT_DIR", str(tmp_path / "runs"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def three_blobs(rng):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    Z = np.vstack([center + 0.3 * rng.standard_normal((60, 2)) for center in centers])
    labels = np.repeat(np.arange(3), 60)
    return Z, labels


@pytest.fixture
def prior_1d():
    return dpmm.DpPrior(alpha=1.0, m=np.zeros(1), lam=1.0, W=np.eye(1), nu=3.0)


@pytest.fixture
def tiny_engine_config():
    return EngineConfig(
        batch_size=16,
        epochs=2,
        learning_rate=1e-3,
        latent_dim=2,
        hidden_sizes=[8],
        max_sweeps=20,
        ingest_epochs=1,
        rng_seed=3,
    )


@pytest.fixture
def healthy_features(rng):
    return rng.normal(0.0, 1.0, size=(48, 6))


@pytest.fixture
def tiny_simulation():
    return SimulationConfig(
        n_floors=3,
        duration=20.0,
        burn_in=2.0,
        nperseg=256,
        scenarios=[
            DamageScenario(label=0, n_samples=6),
            DamageScenario(label=1, reductions={1: 0.3}, n_samples=6),
        ],
    )


def make_state(prior, stats, tau=1e-6):
    """DpmmState whose posteriors are refit from the given statistics."""
    nw, sticks = dpmm.posterior_from_stats(prior, stats)
    k = stats.k
    return dpmm.DpmmState(
        prior=prior,
        ids=np.arange(k, dtype=np.int64),
        nw=nw,
        sticks=sticks,
        stats=stats,
        memory=dpmm.SuffStats.empty(k, prior.dim),
        elbo=0.0,
        tau=tau,
        next_id=k,
    )


def hard_stats(Z, labels, k):
    pi = np.zeros((Z.shape[0], k))
    pi[np.arange(Z.shape[0]), labels] = 1.0
    resp = dpmm.Responsibilities(pi=pi, tail=np.zeros(Z.shape[0]), log_norm=np.zeros(Z.shape[0]))
    return dpmm.accumulate_stats(Z, resp)
