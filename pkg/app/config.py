import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigError

ModelT = TypeVar("ModelT", bound=BaseModel)


class Settings(BaseSettings):
    database_url: str = "sqlite:///./dpvil_runs.db"
    record_runs: bool = True
    log_level: str = "INFO"
    environment: str = "development"
    default_out_dir: str = "runs"
    workers: int = 1

    model_config = SettingsConfigDict(env_file=".env", env_prefix="DPVIL_", extra="ignore")


@lru_cache()
def get_settings():
    return Settings()


class EngineConfig(BaseModel):
    """Hyperparameters of the joint network/DPMM optimizer.

    Defaults are the shear-building settings (Adam, lr 5e-5, batch 32,
    alpha 10, gamma 1).
    """

    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(32, gt=0)
    epochs: int = Field(150, ge=0)
    learning_rate: float = Field(5e-5, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    gamma: float = Field(1.0, ge=0)
    alpha: float = Field(10.0, gt=0)
    tau: float = Field(1e-6, ge=0)
    latent_dim: int = Field(8, gt=0)
    hidden_sizes: List[int] = Field(default_factory=lambda: [128, 32])
    mc_samples: int = Field(1, gt=0, description="L, reconstruction samples per point")
    rng_seed: int = 0
    normalization: Literal["zscore", "none"] = "zscore"
    latent_source: Literal["sample", "mean"] = "sample"
    stats_mode: Literal["batch", "streaming"] = "batch"
    regularizer: Literal["gaussian", "monte_carlo"] = "gaussian"
    regularizer_draws: int = Field(8, gt=0, description="J, NW draws for the monte_carlo regularizer")
    logvar_clamp: float = Field(10.0, gt=0)
    max_sweeps: int = Field(50, gt=0)
    sweep_tol: float = Field(1e-7, gt=0)
    prune_threshold: float = Field(1e-3, ge=0)
    merge_exhaustive_limit: int = Field(20, gt=1)
    ingest_epochs: int = Field(5, ge=0)
    ingest_learning_rate: Optional[float] = Field(None, ge=0)
    healthy_min_share: float = Field(0.1, ge=0, le=1, description="healthy support a split child needs, as a share of its family")

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_sizes(cls, value: List[int]) -> List[int]:
        if any(size <= 0 for size in value):
            raise ValueError("hidden sizes must be positive")
        return value


class DamageScenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    label: int = Field(ge=0)
    reductions: Dict[int, float] = Field(default_factory=dict, description="floor (1-based) -> stiffness loss")
    n_samples: int = Field(gt=0)

    @field_validator("reductions")
    @classmethod
    def _fractions(cls, value: Dict[int, float]) -> Dict[int, float]:
        for floor, loss in value.items():
            if floor < 1:
                raise ValueError(f"floor index {floor} must be 1-based")
            if not 0.0 <= loss < 1.0:
                raise ValueError(f"stiffness reduction {loss} outside [0, 1)")
        return value


# Damaged floors and extents of the eight structural conditions.
DAMAGE_REDUCTIONS: List[Dict[int, float]] = [
    {},
    {1: 0.05},
    {1: 0.10},
    {2: 0.10, 4: 0.10},
    {1: 0.10, 3: 0.15, 5: 0.20},
    {2: 0.15, 4: 0.20, 6: 0.25},
    {1: 0.10, 3: 0.15, 5: 0.20, 7: 0.25},
    {1: 0.10, 2: 0.15, 4: 0.20, 6: 0.25, 8: 0.30},
]


def default_scenarios(healthy: int = 300, damaged: int = 100) -> List[DamageScenario]:
    return [
        DamageScenario(label=label, reductions=reductions, n_samples=healthy if label == 0 else damaged)
        for label, reductions in enumerate(DAMAGE_REDUCTIONS)
    ]


class SimulationConfig(BaseModel):
    """Shear-building dataset generation. Defaults are the desk-scale variant."""

    model_config = ConfigDict(extra="forbid")

    n_floors: int = Field(8, gt=1)
    stiffness: float = Field(2.5e6, gt=0)
    mass: float = Field(1000.0, gt=0)
    damping_ratio: float = Field(0.01, gt=0, lt=1)
    scenarios: List[DamageScenario] = Field(default_factory=default_scenarios)
    duration: float = Field(60.0, gt=0)
    fs: float = Field(50.0, gt=0)
    burn_in: float = Field(10.0, ge=0)
    excitation_psd: float = Field(0.5, ge=0)
    psd_convention: Literal["one_sided", "two_sided"] = "one_sided"
    psd_scale: float = Field(1.0, gt=0)
    snr_db: Optional[float] = 20.0
    band: Tuple[float, float] = (0.5, 16.0)
    pairs: Optional[List[Tuple[int, int]]] = Field(
        None, description="(floor, reference floor), 1-based; default all adjacent pairs"
    )
    nperseg: int = Field(512, gt=8)
    seed: int = 0
    output: str = "data/shear_building"

    @model_validator(mode="after")
    def _check(self) -> "SimulationConfig":
        low, high = self.band
        if not 0 <= low < high:
            raise ValueError(f"invalid band {self.band}")
        for scenario in self.scenarios:
            if any(floor > self.n_floors for floor in scenario.reductions):
                raise ValueError(f"scenario {scenario.label} damages a floor above {self.n_floors}")
        return self

    def resolved_pairs(self) -> List[Tuple[int, int]]:
        if self.pairs is not None:
            return [tuple(pair) for pair in self.pairs]
        return [(floor + 1, floor) for floor in range(1, self.n_floors)]

    @classmethod
    def full_scale(cls, **overrides) -> "SimulationConfig":
        values = dict(scenarios=default_scenarios(600, 200), duration=300.0)
        values.update(overrides)
        return cls(**values)


class ScheduleStage(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epoch: int = Field(ge=0)
    classes: List[int]


class RunConfig(EngineConfig):
    """Everything one CLI invocation needs besides the input files."""

    dataset: Optional[str] = None
    schedule: List[ScheduleStage] = Field(default_factory=list)
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    out_dir: Optional[str] = None
    seeds: Optional[List[int]] = None
    repeats: int = Field(1, gt=0)
    alphas: List[float] = Field(default_factory=lambda: [0.1, 1.0, 10.0, 50.0, 100.0])
    healthy_label: int = 0
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        epochs = [stage.epoch for stage in self.schedule]
        if any(later <= earlier for earlier, later in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")
        if epochs and epochs[0] != 0:
            raise ValueError("the first schedule stage must start at epoch 0")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions {self.split} must be non-negative and sum to 1")
        if any(alpha <= 0 for alpha in self.alphas):
            raise ValueError("alphas must be positive")
        if self.dataset is not None and self.out_dir is not None:
            if Path(self.dataset).resolve() == Path(self.out_dir).resolve():
                raise ValueError("dataset and output paths must differ")
        return self

    def engine_config(self) -> EngineConfig:
        fields = EngineConfig.model_fields.keys()
        return EngineConfig(**{name: getattr(self, name) for name in fields})

    def run_seeds(self) -> List[int]:
        if self.seeds:
            return list(self.seeds)
        return [self.rng_seed + offset for offset in range(self.repeats)]


def load_config(path: Optional[str], model: Type[ModelT] = RunConfig, **overrides) -> ModelT:
    """Read a JSON config file (or start from defaults) and validate it."""
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    data.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return model(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
