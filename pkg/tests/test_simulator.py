import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import linalg, signal

from app.config import DamageScenario, SimulationConfig, default_scenarios
from app.errors import BandEmpty, DataError
from app.services import simulator
from app.services.simulator import BuildingSpec


class TestStructure:
    def test_first_frequency(self):
        system = simulator.assemble_system(BuildingSpec())
        assert system.natural_frequencies()[0] == pytest.approx(1.4685, abs=1e-3)

    def test_matches_closed_form(self):
        spec = BuildingSpec()
        assert_allclose(simulator.assemble_system(spec).natural_frequencies(), spec.analytic_frequencies(), rtol=1e-8)

    def test_matrices(self):
        system = simulator.assemble_system(BuildingSpec())
        assert np.array_equal(system.K, system.K.T)
        assert np.array_equal(system.M, np.diag(np.diag(system.M)))
        assert system.K[-1, -1] == pytest.approx(2.5e6)
        assert system.K[0, 0] == pytest.approx(5.0e6)

    def test_rayleigh_targets_first_two_modes(self):
        system = simulator.assemble_system(BuildingSpec())
        zeta = system.modal_damping()
        assert zeta[0] == pytest.approx(0.01, abs=1e-10)
        assert zeta[1] == pytest.approx(0.01, abs=1e-10)
        assert np.all(zeta[2:] > 0.01)

    def test_damage_lowers_first_frequency(self):
        config = SimulationConfig()
        f1 = {label: f[0] for label, f in simulator.scenario_frequencies(config).items()}
        assert f1[2] < f1[1] < f1[0]

    def test_story_stiffness_reduction(self):
        spec = BuildingSpec(n_floors=3)
        k = simulator.story_stiffness(spec, DamageScenario(label=1, reductions={2: 0.25}, n_samples=1))
        assert_allclose(k, [2.5e6, 1.875e6, 2.5e6])

    def test_default_scenarios(self):
        scenarios = default_scenarios()
        assert [s.n_samples for s in scenarios] == [300] + [100] * 7
        full = SimulationConfig.full_scale()
        assert sum(s.n_samples for s in full.scenarios) == 2000
        assert full.duration == 300.0


class TestIntegration:
    def test_discretization_is_exact(self):
        A, B, _, _ = simulator.state_space(simulator.assemble_system(BuildingSpec(n_floors=3)))
        dt = 0.02
        Ad, Bd = simulator.discretize(A, B, dt)
        assert_allclose(Ad, linalg.expm(A * dt), rtol=1e-12, atol=1e-14)
        assert_allclose(Bd, np.linalg.solve(A, (Ad - np.eye(A.shape[0])) @ B), rtol=1e-6, atol=1e-12)

    @pytest.mark.parametrize("convention,expected", [("one_sided", np.sqrt(12.5)), ("two_sided", 5.0)])
    def test_excitation_std(self, convention, expected):
        config = SimulationConfig(psd_convention=convention)
        assert simulator.excitation_std(config) == pytest.approx(expected, rel=1e-12)

    def test_zero_excitation_gives_silence(self, tiny_simulation, rng):
        config = tiny_simulation.model_copy(update={"excitation_psd": 0.0})
        system = simulator.assemble_system(BuildingSpec.from_config(config))
        acc = simulator.simulate_response(system, config, rng, with_noise=False)
        assert acc.shape == (1000, 3)
        assert np.array_equal(acc, np.zeros_like(acc))

    def test_measurement_noise_level(self, rng):
        t = np.arange(200_000) / 50.0
        clean = np.sin(2.0 * np.pi * 1.3 * t)[:, None]
        noisy = simulator.add_measurement_noise(clean, 20.0, rng)
        ratio = np.mean((noisy - clean) ** 2) / np.mean(clean ** 2)
        assert ratio == pytest.approx(0.01, rel=0.05)
        assert simulator.add_measurement_noise(clean, None, rng) is clean

    def test_floor_one_peaks_at_natural_frequencies(self):
        config = SimulationConfig(duration=1200.0)
        system = simulator.assemble_system(BuildingSpec.from_config(config))
        acc = simulator.simulate_response(system, config, np.random.default_rng(5), with_noise=False)
        nperseg = 2048
        freqs, psd = signal.welch(acc[:, 0], fs=config.fs, nperseg=nperseg)
        resolution = config.fs / nperseg
        for f in system.natural_frequencies()[:3]:
            window = np.flatnonzero(np.abs(freqs - f) <= 3 * resolution)
            peak = window[np.argmax(psd[window])]
            assert abs(freqs[peak] - f) <= resolution + 1e-12
            assert psd[peak] > psd[peak - 1] and psd[peak] > psd[peak + 1]


class TestTransmissibility:
    def test_identical_channels(self, rng):
        x = rng.standard_normal(4096)
        freqs, tf = simulator.compute_tf(x, x, 50.0, (0.5, 16.0))
        assert freqs.min() >= 0.5 and freqs.max() <= 16.0
        assert_allclose(tf, 0.0, atol=1e-12)

    def test_scaled_channel(self, rng):
        x = rng.standard_normal(4096)
        _, tf = simulator.compute_tf(2.0 * x, x, 50.0, (0.5, 16.0))
        assert_allclose(tf, np.log10(2.0), atol=1e-12)

    def test_band_above_nyquist(self, rng):
        x = rng.standard_normal(4096)
        with pytest.raises(BandEmpty):
            simulator.compute_tf(x, x, 50.0, (30.0, 40.0))

    def test_length_mismatch(self, rng):
        with pytest.raises(DataError):
            simulator.compute_tf(rng.standard_normal(100), rng.standard_normal(101), 50.0, (0.5, 16.0))


class TestDataset:
    def test_sample_is_deterministic(self, tiny_simulation):
        a = simulator.simulate_sample(tiny_simulation, 3, 0)
        b = simulator.simulate_sample(tiny_simulation, 3, 0)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, simulator.simulate_sample(tiny_simulation, 4, 0))

    def test_build_dataset(self, tiny_simulation):
        data = simulator.build_dataset(tiny_simulation)
        freqs = simulator.frequency_grid(tiny_simulation)
        assert data.features.shape == (12, len(freqs) * 2)
        assert_allclose(data.freqs, freqs)
        assert data.labels.tolist() == [0] * 6 + [1] * 6
        assert data.pairs == [(2, 1), (3, 2)]
        assert np.all(np.isfinite(data.features))

    def test_frequency_grid_band_empty(self, tiny_simulation):
        config = tiny_simulation.model_copy(update={"band": (24.9, 24.95)})
        with pytest.raises(BandEmpty):
            simulator.frequency_grid(config)
