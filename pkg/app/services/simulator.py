"""Shear-building vibration simulator and transmissibility features.

Floor 1 is the lowest floor; story stiffness k_i connects floor i to the one
below it (k_1 to the ground). The ambient force acts on floor 1.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg, signal

from app.config import DamageScenario, SimulationConfig
from app.errors import BandEmpty, DataError, UnstableIntegration
from app.services.dataset import TfDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BuildingSpec:
    n_floors: int = 8
    stiffness: float = 2.5e6
    mass: float = 1000.0
    damping_ratio: float = 0.01

    @classmethod
    def from_config(cls, config: SimulationConfig) -> "BuildingSpec":
        return cls(config.n_floors, config.stiffness, config.mass, config.damping_ratio)

    def analytic_frequencies(self) -> np.ndarray:
        """Closed-form natural frequencies (Hz) of the undamaged uniform shear chain."""
        j = np.arange(1, self.n_floors + 1)
        omega = 2.0 * np.sqrt(self.stiffness / self.mass) * np.sin((2 * j - 1) * np.pi / (2 * (2 * self.n_floors + 1)))
        return omega / (2.0 * np.pi)


@dataclass(eq=False)
class StructuralSystem:
    M: np.ndarray
    K: np.ndarray
    C: np.ndarray
    rayleigh: Tuple[float, float]

    @property
    def n_dof(self) -> int:
        return self.M.shape[0]

    def natural_frequencies(self) -> np.ndarray:
        """Undamped natural frequencies in Hz from the generalized eigenproblem (K, M)."""
        eigenvalues = linalg.eigh(self.K, self.M, eigvals_only=True)
        return np.sqrt(eigenvalues) / (2.0 * np.pi)

    def modal_damping(self) -> np.ndarray:
        omega = 2.0 * np.pi * self.natural_frequencies()
        a0, a1 = self.rayleigh
        return 0.5 * (a0 / omega + a1 * omega)


def story_stiffness(spec: BuildingSpec, scenario: Optional[DamageScenario] = None) -> np.ndarray:
    k = np.full(spec.n_floors, spec.stiffness)
    if scenario is not None:
        for floor, loss in scenario.reductions.items():
            k[floor - 1] *= 1.0 - loss
    return k


def rayleigh_coefficients(omega1: float, omega2: float, zeta: float) -> Tuple[float, float]:
    """(a0, a1) giving damping ratio zeta at both angular frequencies."""
    a0 = 2.0 * zeta * omega1 * omega2 / (omega1 + omega2)
    a1 = 2.0 * zeta / (omega1 + omega2)
    return a0, a1


def assemble_system(spec: BuildingSpec, scenario: Optional[DamageScenario] = None) -> StructuralSystem:
    k = story_stiffness(spec, scenario)
    n = spec.n_floors
    K = np.zeros((n, n))
    for i in range(n):
        K[i, i] = k[i] + (k[i + 1] if i + 1 < n else 0.0)
        if i + 1 < n:
            K[i, i + 1] = K[i + 1, i] = -k[i + 1]
    M = np.eye(n) * spec.mass
    omega = np.sqrt(linalg.eigh(K, M, eigvals_only=True))
    a0, a1 = rayleigh_coefficients(omega[0], omega[1], spec.damping_ratio)
    return StructuralSystem(M=M, K=K, C=a0 * M + a1 * K, rayleigh=(a0, a1))


def state_space(system: StructuralSystem) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Continuous (A, B, C, D) with state [u; u'], input force on floor 1, output floor accelerations."""
    n = system.n_dof
    m_inv = np.linalg.inv(system.M)
    A = np.block([[np.zeros((n, n)), np.eye(n)], [-m_inv @ system.K, -m_inv @ system.C]])
    load = np.zeros((n, 1))
    load[0, 0] = 1.0
    B = np.vstack([np.zeros((n, 1)), m_inv @ load])
    C = np.hstack([-m_inv @ system.K, -m_inv @ system.C])
    D = m_inv @ load
    return A, B, C, D


def discretize(A: np.ndarray, B: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization via the augmented matrix exponential."""
    n, m = B.shape
    block = np.zeros((n + m, n + m))
    block[:n, :n] = A
    block[:n, n:] = B
    phi = linalg.expm(block * dt)
    return phi[:n, :n], phi[:n, n:]


def excitation_std(config: SimulationConfig) -> float:
    """Std of the discrete white-noise ground acceleration for the configured PSD convention."""
    if config.psd_convention == "one_sided":
        variance = config.excitation_psd * config.fs / 2.0
    else:
        variance = config.excitation_psd * config.fs
    return float(np.sqrt(variance * config.psd_scale))


def add_measurement_noise(acc: np.ndarray, snr_db: Optional[float], rng: np.random.Generator) -> np.ndarray:
    """Independent Gaussian noise per channel at the given SNR of that channel's empirical power."""
    if snr_db is None:
        return acc
    power = np.mean(acc ** 2, axis=0)
    noise_std = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return acc + rng.standard_normal(acc.shape) * noise_std[None, :]


def simulate_response(system: StructuralSystem, config: SimulationConfig, rng: np.random.Generator,
                      with_noise: bool = True) -> np.ndarray:
    """Floor accelerations, shape (n_samples, n_floors), after the burn-in is discarded."""
    dt = 1.0 / config.fs
    A, B, C, D = state_space(system)
    Ad, Bd = discretize(A, B, dt)
    radius = np.max(np.abs(np.linalg.eigvals(Ad)))
    if not radius < 1.0:
        raise UnstableIntegration(f"discrete system has spectral radius {radius:.6f}")

    burn = int(round(config.burn_in * config.fs))
    keep = int(round(config.duration * config.fs))
    ground = rng.standard_normal(burn + keep) * excitation_std(config)
    force = system.M[0, 0] * ground
    _, acc, _ = signal.dlsim((Ad, Bd, C, D, dt), force[:, None])
    acc = np.asarray(acc)[burn:]
    if not np.all(np.isfinite(acc)):
        raise UnstableIntegration("time integration produced non-finite accelerations")
    if with_noise:
        acc = add_measurement_noise(acc, config.snr_db, rng)
    return acc


def compute_tf(acc_i: np.ndarray, acc_ref: np.ndarray, fs: float, band: Tuple[float, float],
               nperseg: int = 512) -> Tuple[np.ndarray, np.ndarray]:
    """log10 |H1| transmissibility of channel i relative to the reference, restricted to the band."""
    acc_i = np.asarray(acc_i, dtype=np.float64)
    acc_ref = np.asarray(acc_ref, dtype=np.float64)
    if acc_i.shape != acc_ref.shape:
        raise DataError(f"records differ in length: {acc_i.shape} vs {acc_ref.shape}")
    seg = min(nperseg, acc_ref.shape[0])
    options = dict(fs=fs, window="hann", nperseg=seg, noverlap=seg // 2)
    freqs, g_rr = signal.welch(acc_ref, **options)
    _, g_ri = signal.csd(acc_ref, acc_i, **options)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    if not mask.any():
        raise BandEmpty(f"no frequency bins inside band {band} (resolution {freqs[1] - freqs[0]:.4f} Hz)")
    if np.any(g_rr[mask] <= 0):
        raise DataError("reference channel has no power inside the analysis band")
    magnitude = np.abs(g_ri[mask]) / g_rr[mask]
    return freqs[mask], np.log10(magnitude)


def tf_features(acc: np.ndarray, config: SimulationConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Concatenated transmissibility segments for every configured (floor, reference) pair."""
    segments, freqs = [], None
    for floor, ref in config.resolved_pairs():
        freqs, segment = compute_tf(acc[:, floor - 1], acc[:, ref - 1], config.fs, config.band, config.nperseg)
        segments.append(segment)
    return np.concatenate(segments), freqs


def _sample_plan(config: SimulationConfig) -> List[Tuple[int, int, int]]:
    """(global index, scenario position, label) for every sample, in dataset order."""
    plan, index = [], 0
    for position, scenario in enumerate(config.scenarios):
        for _ in range(scenario.n_samples):
            plan.append((index, position, scenario.label))
            index += 1
    return plan


def simulate_sample(config: SimulationConfig, index: int, position: int) -> np.ndarray:
    spec = BuildingSpec.from_config(config)
    system = assemble_system(spec, config.scenarios[position])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, index])))
    features, _ = tf_features(simulate_response(system, config, rng), config)
    return features


def _simulate_job(args) -> np.ndarray:
    config_json, index, position = args
    return simulate_sample(SimulationConfig.model_validate_json(config_json), index, position)


def build_dataset(config: SimulationConfig, workers: int = 1) -> TfDataset:
    """Simulate every scenario sample; results are independent of worker scheduling."""
    plan = _sample_plan(config)
    if not plan:
        raise DataError("simulation config has no samples")
    logger.info(f"Step 1: Simulating {len(plan)} samples across {len(config.scenarios)} scenarios")
    if workers > 1:
        payload = config.model_dump_json()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_simulate_job, [(payload, i, p) for i, p, _ in plan], chunksize=8))
    else:
        rows = []
        for done, (index, position, _label) in enumerate(plan, start=1):
            rows.append(simulate_sample(config, index, position))
            if done % 100 == 0:
                logger.info(f"   simulated {done}/{len(plan)}")
    freqs = frequency_grid(config)
    features = np.vstack(rows)
    labels = np.array([label for _, _, label in plan], dtype=np.int64)
    logger.info(f"✅ Dataset ready: {features.shape[0]} x {features.shape[1]} features")
    return TfDataset(
        features=features,
        labels=labels,
        freqs=freqs,
        pairs=config.resolved_pairs(),
        meta={"source": "shear_building", "simulation": config.model_dump(mode="json")},
    )


def frequency_grid(config: SimulationConfig) -> np.ndarray:
    """Band-limited Welch frequencies the features are evaluated on."""
    seg = min(config.nperseg, int(round(config.duration * config.fs)))
    freqs = np.fft.rfftfreq(seg, d=1.0 / config.fs)
    mask = (freqs >= config.band[0]) & (freqs <= config.band[1])
    if not mask.any():
        raise BandEmpty(f"no frequency bins inside band {config.band}")
    return freqs[mask]


def scenario_frequencies(config: SimulationConfig) -> Dict[int, np.ndarray]:
    spec = BuildingSpec.from_config(config)
    return {s.label: assemble_system(spec, s).natural_frequencies() for s in config.scenarios}
