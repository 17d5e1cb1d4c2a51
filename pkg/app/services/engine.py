"""Joint network/DPMM training, incremental ingest and the anomaly rule."""

import copy
import logging
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, Iterable, Mapping, Optional, Tuple

import numpy as np

from app.config import EngineConfig
from app.errors import EmptyDataset, ShapeMismatch
from app.services import dpmm, numerics, vae

logger = logging.getLogger(__name__)

MIN_HEALTHY_SUPPORT = 0.5


@dataclass(frozen=True)
class HealthyRegistry:
    ids: FrozenSet[int] = frozenset()

    def __contains__(self, component_id) -> bool:
        return int(component_id) in self.ids

    def __len__(self) -> int:
        return len(self.ids)

    def apply(self, events: Iterable[dpmm.ComponentEvent], support: Optional[Mapping[int, float]] = None,
              min_share: float = 0.0) -> "HealthyRegistry":
        """Follow component lineage through split, merge and prune events.

        Merges are healthy if either parent was. Without `support` both
        children of a healthy split inherit the mark. With it (component id
        -> healthy mass), a child keeps the mark only if it holds at least
        `min_share` of the children's combined support, and a family holding
        less than MIN_HEALTHY_SUPPORT in total loses it entirely.
        """
        ids = set(self.ids)
        for event in events:
            if event.kind == "split":
                if event.source[0] not in ids:
                    continue
                ids.difference_update(event.result)
                if support is None:
                    ids.update(event.result)
                    continue
                total = sum(support.get(child, 0.0) for child in event.result)
                if total >= MIN_HEALTHY_SUPPORT:
                    ids.update(child for child in event.result if support.get(child, 0.0) >= min_share * total)
            elif event.kind == "merge":
                healthy = any(source in ids for source in event.source)
                ids.difference_update(event.source)
                if healthy:
                    ids.update(event.result)
            elif event.kind == "prune":
                ids.difference_update(event.source)
        return HealthyRegistry(frozenset(ids))

    def restrict(self, active_ids: Iterable[int]) -> "HealthyRegistry":
        return HealthyRegistry(self.ids & {int(i) for i in active_ids})


@dataclass(eq=False)
class EngineCheckpoint:
    config: EngineConfig
    params: vae.MlpParams
    adam: vae.AdamState
    dpmm: Optional[dpmm.DpmmState]
    registry: HealthyRegistry
    feature_mean: np.ndarray
    feature_std: np.ndarray
    rng: np.random.Generator
    epoch: int = 0

    def copy(self) -> "EngineCheckpoint":
        return copy.deepcopy(self)

    @property
    def k_active(self) -> int:
        return self.dpmm.k_active if self.dpmm is not None else 0

    def cavi_options(self) -> dpmm.CaviOptions:
        cfg = self.config
        return dpmm.CaviOptions(
            max_sweeps=cfg.max_sweeps,
            sweep_tol=cfg.sweep_tol,
            prune_threshold=cfg.prune_threshold,
            merge_exhaustive_limit=cfg.merge_exhaustive_limit,
        )


@dataclass
class EpochSummary:
    epoch: int
    n_rows: int
    objective: float
    recon: float
    reg: float
    bound: float
    elbo: float
    k_active: int


@dataclass(eq=False)
class Verdicts:
    component: np.ndarray
    assigned: np.ndarray
    tail: np.ndarray
    anomaly: np.ndarray

    def __len__(self) -> int:
        return self.assigned.shape[0]


def normalization_stats(X: np.ndarray, mode: str) -> Tuple[np.ndarray, np.ndarray]:
    dim = X.shape[1]
    if mode == "none":
        return np.zeros(dim), np.ones(dim)
    std = X.std(axis=0)
    return X.mean(axis=0), np.where(std > 0, std, 1.0)


def normalize(ckpt: EngineCheckpoint, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != ckpt.feature_mean.shape[0]:
        raise ShapeMismatch(f"features have shape {X.shape}, expected (N, {ckpt.feature_mean.shape[0]})")
    return (X - ckpt.feature_mean) / ckpt.feature_std


def create_checkpoint(config: EngineConfig, X_raw: np.ndarray) -> EngineCheckpoint:
    """Fresh network and optimizer; normalization statistics taken from X_raw."""
    X_raw = np.asarray(X_raw, dtype=np.float64)
    if X_raw.ndim != 2 or X_raw.shape[0] == 0:
        raise EmptyDataset("cannot build a model from an empty feature matrix")
    mean, std = normalization_stats(X_raw, config.normalization)
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    params = vae.init_params(X_raw.shape[1], config.latent_dim, config.hidden_sizes, rng)
    adam = vae.AdamState.create(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    return EngineCheckpoint(
        config=config, params=params, adam=adam, dpmm=None, registry=HealthyRegistry(),
        feature_mean=mean, feature_std=std, rng=rng,
    )


def _latents(ckpt: EngineCheckpoint, lat: vae.LatentGaussian, eps: np.ndarray) -> np.ndarray:
    if ckpt.config.latent_source == "mean":
        return lat.mu
    return vae.reparameterize(lat, eps[0])


def _targets(ckpt: EngineCheckpoint) -> Optional[vae.RegularizerTargets]:
    if ckpt.dpmm is None:
        return None
    if ckpt.config.regularizer == "monte_carlo":
        return vae.sampled_targets(ckpt.dpmm, ckpt.config.regularizer_draws, ckpt.rng)
    return vae.gaussian_targets(ckpt.dpmm)


def _healthy_memory(ckpt: EngineCheckpoint) -> Optional[dpmm.SuffStats]:
    if ckpt.dpmm is None or not len(ckpt.registry):
        return None
    rows = np.flatnonzero([cid in ckpt.registry for cid in ckpt.dpmm.ids])
    return ckpt.dpmm.memory.take(rows)


def healthy_support(state: dpmm.DpmmState, latents: Optional[np.ndarray] = None,
                    reference: Optional[dpmm.SuffStats] = None) -> Dict[int, float]:
    """Healthy mass held by each component id.

    Known-healthy latents count by their responsibilities. Otherwise each
    healthy memory component contributes its mass spread over its sigma points.
    """
    support = np.zeros(state.k_active)
    if latents is not None and latents.shape[0]:
        support += dpmm.update_responsibilities(state, latents).pi.sum(axis=0)
    elif reference is not None:
        means, scatters = reference.means(), reference.scatters()
        for j in np.flatnonzero(reference.n > 0):
            points = numerics.sigma_points(means[j], scatters[j])
            support += reference.n[j] * dpmm.update_responsibilities(state, points).pi.mean(axis=0)
    return {int(cid): float(mass) for cid, mass in zip(state.ids, support)}


def run_epoch(ckpt: EngineCheckpoint, X: np.ndarray, use_memory: Optional[bool] = None,
              healthy: Optional[np.ndarray] = None) -> Tuple[EngineCheckpoint, EpochSummary]:
    """One pass of minibatch network updates followed by split-merge CAVI on the epoch's latents.

    X must already be normalized. use_memory defaults to the configured
    stats mode: streaming keeps the DPMM memory, batch clears it first.
    healthy holds normalized rows known to be healthy; without it the
    healthy components' memory decides which split children stay healthy.
    """
    ckpt = ckpt.copy()
    cfg = ckpt.config
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise EmptyDataset("training epoch needs at least one row")
    if use_memory is None:
        use_memory = cfg.stats_mode == "streaming"

    order = ckpt.rng.permutation(n)
    Z = np.empty((n, cfg.latent_dim))
    targets = _targets(ckpt)
    recon = reg = 0.0
    for start in range(0, n, cfg.batch_size):
        rows = order[start:start + cfg.batch_size]
        xb = X[rows]
        eps = ckpt.rng.standard_normal((cfg.mc_samples, rows.shape[0], cfg.latent_dim))
        lat = vae.encode(ckpt.params, xb, cfg.logvar_clamp)
        if ckpt.dpmm is None:
            prior = dpmm.DpPrior.default(lat.mu, cfg.alpha)
            ckpt.dpmm = dpmm.init_state(prior, np.empty((0, cfg.latent_dim)), cfg.tau)
            targets = _targets(ckpt)
        Z[rows] = _latents(ckpt, lat, eps)
        grads, terms = vae.backprop(
            ckpt.params, xb, eps, ckpt.dpmm, cfg.gamma,
            scale=n / rows.shape[0], targets=targets, clamp=cfg.logvar_clamp,
        )
        ckpt.params, ckpt.adam = vae.adam_step(ckpt.params, grads, ckpt.adam)
        recon += terms.recon
        reg += terms.reg

    reference = _healthy_memory(ckpt)
    state = ckpt.dpmm if use_memory else dpmm.clear_memory(ckpt.dpmm)
    state = dpmm.run_split_merge(state, Z, ckpt.cavi_options(), ckpt.rng)
    if len(ckpt.registry):
        latents = None if healthy is None else latent_means(ckpt, healthy)
        support = healthy_support(state, latents, reference)
        ckpt.registry = ckpt.registry.apply(state.events, support, cfg.healthy_min_share).restrict(state.ids)
    else:
        ckpt.registry = ckpt.registry.restrict(state.ids)
    ckpt.dpmm = replace(state, events=())
    ckpt.epoch += 1

    objective = recon - cfg.gamma * reg
    kl_terms = dpmm.dpmm_kl_terms(ckpt.dpmm, dpmm.update_responsibilities(ckpt.dpmm, Z))
    summary = EpochSummary(
        epoch=ckpt.epoch, n_rows=n, objective=objective, recon=recon, reg=reg,
        bound=objective + kl_terms, elbo=ckpt.dpmm.elbo, k_active=ckpt.k_active,
    )
    logger.debug(
        f"Epoch {ckpt.epoch}: objective={objective:.3f} L_CAVI={summary.elbo:.3f} K_a={summary.k_active}"
    )
    return ckpt, summary


def train_epoch(ckpt: EngineCheckpoint, X: np.ndarray) -> EngineCheckpoint:
    return run_epoch(ckpt, X)[0]


def mark_healthy(ckpt: EngineCheckpoint) -> EngineCheckpoint:
    """Designate every currently active component as healthy."""
    ckpt = ckpt.copy()
    ckpt.registry = HealthyRegistry(frozenset(int(i) for i in ckpt.dpmm.ids))
    return ckpt


def commit(ckpt: EngineCheckpoint) -> EngineCheckpoint:
    ckpt = ckpt.copy()
    ckpt.dpmm = dpmm.commit_memory(ckpt.dpmm)
    return ckpt


def fit_initial(config: EngineConfig, healthy: np.ndarray, epochs: Optional[int] = None) -> EngineCheckpoint:
    """Train on healthy-condition features and mark every resulting component healthy."""
    healthy = np.asarray(healthy, dtype=np.float64)
    if healthy.ndim != 2 or healthy.shape[0] == 0:
        raise EmptyDataset("fit_initial needs at least one healthy feature vector")
    epochs = config.epochs if epochs is None else epochs
    logger.info(f"Step 1: Fitting initial model on {healthy.shape[0]} healthy samples for {epochs} epochs")
    ckpt = create_checkpoint(config, healthy)
    X = normalize(ckpt, healthy)
    for _ in range(max(epochs, 1)):
        ckpt = train_epoch(ckpt, X)
    ckpt = commit(mark_healthy(ckpt))
    logger.info(f"✅ Initial model ready: K_a={ckpt.k_active}, healthy components={sorted(ckpt.registry.ids)}")
    return ckpt


def score(ckpt: EngineCheckpoint, X: np.ndarray) -> Verdicts:
    """Assign normalized rows by their encoder means; read-only on the checkpoint."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0 or ckpt.dpmm is None:
        empty = np.zeros(0, dtype=np.int64)
        return Verdicts(empty, empty.copy(), np.zeros(0), np.zeros(0, dtype=bool))
    lat = vae.encode(ckpt.params, X, ckpt.config.logvar_clamp)
    resp = dpmm.update_responsibilities(ckpt.dpmm, lat.mu)
    component = np.argmax(resp.pi, axis=1)
    assigned = ckpt.dpmm.ids[component]
    known = np.array([cid in ckpt.registry for cid in assigned], dtype=bool)
    anomaly = ~known | (resp.tail >= resp.pi.max(axis=1))
    return Verdicts(component=component, assigned=assigned, tail=resp.tail, anomaly=anomaly)


def latent_means(ckpt: EngineCheckpoint, X: np.ndarray) -> np.ndarray:
    return vae.encode(ckpt.params, X, ckpt.config.logvar_clamp).mu


def ingest_with_verdicts(ckpt: EngineCheckpoint, new_batch: np.ndarray) -> Tuple[EngineCheckpoint, Verdicts]:
    """Incremental update on raw features of a new batch plus the summary-statistic memory."""
    new_batch = np.asarray(new_batch, dtype=np.float64)
    if new_batch.size == 0:
        return ckpt, score(ckpt, np.zeros((0, ckpt.feature_mean.shape[0])))
    X = normalize(ckpt, new_batch)
    cfg = ckpt.config
    ckpt = ckpt.copy()
    if cfg.ingest_learning_rate is not None:
        ckpt.adam.learning_rate = cfg.ingest_learning_rate
    for _ in range(cfg.ingest_epochs):
        ckpt, _summary = run_epoch(ckpt, X, use_memory=True)
    verdicts = score(ckpt, X)
    ckpt = commit(ckpt)
    logger.info(
        f"Ingested {X.shape[0]} rows: K_a={ckpt.k_active}, {int(verdicts.anomaly.sum())} flagged anomalous"
    )
    return ckpt, verdicts


def ingest(ckpt: EngineCheckpoint, new_batch: np.ndarray) -> Tuple[EngineCheckpoint, np.ndarray, np.ndarray]:
    ckpt, verdicts = ingest_with_verdicts(ckpt, new_batch)
    return ckpt, verdicts.assigned, verdicts.anomaly
