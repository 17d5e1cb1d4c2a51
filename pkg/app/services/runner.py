"""Training runs over a class-introduction schedule, repeats and alpha sweeps."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import RunConfig, ScheduleStage
from app.errors import ConfigError, EmptyDataset
from app.services import engine, metrics
from app.services.dataset import TfDataset, stratified_split

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class TrainResult:
    seed: int
    alpha: float
    checkpoint: engine.EngineCheckpoint
    trace: List[Dict] = field(default_factory=list)
    test: Dict[str, float] = field(default_factory=dict)
    validation: Dict[str, float] = field(default_factory=dict)
    test_latents: Optional[np.ndarray] = None
    test_clusters: Optional[np.ndarray] = None

    def summary_row(self) -> Dict:
        return {"seed": self.seed, "alpha": self.alpha, "k_active": self.checkpoint.k_active, **self.test}


def resolve_schedule(config: RunConfig, data: TfDataset) -> List[ScheduleStage]:
    """Configured stages, or healthy-only first and every class from a fifth of the budget on."""
    present = set(data.classes())
    if config.schedule:
        stages = config.schedule
        for stage in stages:
            missing = set(stage.classes) - present
            if missing:
                raise ConfigError(f"schedule stage at epoch {stage.epoch} names absent classes {sorted(missing)}")
        return list(stages)
    if config.healthy_label not in present:
        raise ConfigError(f"healthy label {config.healthy_label} is not in the dataset")
    stages = [ScheduleStage(epoch=0, classes=[config.healthy_label])]
    if present != {config.healthy_label} and config.epochs > 1:
        stages.append(ScheduleStage(epoch=max(1, config.epochs // 5), classes=sorted(present)))
    return stages


def _stage_at(stages: Sequence[ScheduleStage], epoch: int) -> int:
    index = 0
    for i, stage in enumerate(stages):
        if stage.epoch <= epoch:
            index = i
    return index


def evaluate(ckpt: engine.EngineCheckpoint, data: TfDataset, healthy_label: int = 0) -> Tuple[Dict[str, float], engine.Verdicts]:
    verdicts = engine.score(ckpt, engine.normalize(ckpt, data.features))
    return metrics.score_all(verdicts.assigned, verdicts.anomaly, data.labels, healthy_label), verdicts


def train_run(config: RunConfig, data: TfDataset, seed: int) -> TrainResult:
    """One seeded run: split, train through the schedule, score held-out rows."""
    config = config.model_copy(update={"rng_seed": seed})
    train, validation, test = stratified_split(data, config.split, seed)
    if len(train) == 0:
        raise EmptyDataset("training split is empty")
    stages = resolve_schedule(config, train)
    logger.info(f"Step 1: Training seed={seed} alpha={config.alpha} on {len(train)} rows, {len(stages)} stage(s)")

    ckpt = engine.create_checkpoint(config.engine_config(), train.features)
    X = engine.normalize(ckpt, train.features)
    X_healthy = X[np.isin(train.labels, stages[0].classes)]
    trace: List[Dict] = []
    current = 0
    healthy_marked = False
    for epoch in range(config.epochs):
        stage_index = _stage_at(stages, epoch)
        if stage_index != current:
            if not healthy_marked:
                ckpt = engine.mark_healthy(ckpt)
                healthy_marked = True
            if config.stats_mode == "streaming":
                ckpt = engine.commit(ckpt)
            logger.info(f"   epoch {epoch}: introducing classes {stages[stage_index].classes}")
            current = stage_index
        observed = stages[current].classes
        if config.stats_mode == "streaming" and current > 0:
            active = sorted(set(observed) - set(stages[current - 1].classes)) or observed
        else:
            active = observed
        rows = np.isin(train.labels, active)
        ckpt, summary = engine.run_epoch(ckpt, X[rows], healthy=X_healthy if healthy_marked else None)

        seen = np.isin(train.labels, observed)
        verdicts = engine.score(ckpt, X[seen])
        scores = metrics.score_all(verdicts.assigned, verdicts.anomaly, train.labels[seen], config.healthy_label)
        trace.append({
            "epoch": summary.epoch,
            "classes": ",".join(str(c) for c in observed),
            "n_rows": summary.n_rows,
            "k_active": summary.k_active,
            "elbo": summary.elbo,
            "objective": summary.objective,
            "bound": summary.bound,
            **scores,
        })
    if ckpt.dpmm is None:
        raise EmptyDataset("no epochs were run; set epochs >= 1")
    if not healthy_marked:
        ckpt = engine.mark_healthy(ckpt)
    ckpt = engine.commit(ckpt)

    result = TrainResult(seed=seed, alpha=config.alpha, checkpoint=ckpt, trace=trace)
    if len(validation):
        result.validation, _ = evaluate(ckpt, validation, config.healthy_label)
    if len(test):
        result.test, verdicts = evaluate(ckpt, test, config.healthy_label)
        result.test_latents = engine.latent_means(ckpt, engine.normalize(ckpt, test.features))
        result.test_clusters = verdicts.assigned
    logger.info(f"✅ Seed {seed} finished: K_a={ckpt.k_active}, test={result.test}")
    return result


def _train_job(args) -> TrainResult:
    config_json, data, seed = args
    return train_run(RunConfig.model_validate_json(config_json), data, seed)


def train_many(config: RunConfig, data: TfDataset, seeds: Sequence[int], workers: int = 1) -> List[TrainResult]:
    """Independent runs, returned in seed order regardless of worker scheduling."""
    if workers > 1 and len(seeds) > 1:
        payload = config.model_dump_json()
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            return list(pool.map(_train_job, [(payload, data, seed) for seed in seeds]))
    return [train_run(config, data, seed) for seed in seeds]


def sensitivity(config: RunConfig, data: TfDataset, alphas: Sequence[float], workers: int = 1) -> List[TrainResult]:
    results = []
    for alpha in alphas:
        if alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {alpha}")
        logger.info(f"Sensitivity: alpha={alpha}")
        results.extend(train_many(config.model_copy(update={"alpha": alpha}), data, config.run_seeds(), workers))
    return results
