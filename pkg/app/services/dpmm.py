"""Truncation-free variational Dirichlet-process Gaussian mixture.

Components carry Normal-Wishart posteriors and additive summary statistics
(n, s1, s2). Components beyond the active ones stay at the prior and their
assignment mass is summed analytically. `run_split_merge` implements the
greedy split-then-merge coordinate ascent.
"""

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import List, Literal, Optional, Tuple

import numpy as np
from scipy import special

from app.errors import (
    DegenerateSplit,
    NoConvergence,
    NonFinite,
    NotPositiveDefinite,
    NumericalUnderflow,
    ShapeMismatch,
)
from app.services import numerics

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
MIN_SIDE_MASS = 1e-10


@dataclass(frozen=True, eq=False)
class DpPrior:
    alpha: float
    m: np.ndarray
    lam: float
    W: np.ndarray
    nu: float

    def __post_init__(self):
        dim = self.m.shape[0]
        if self.alpha <= 0 or self.lam <= 0:
            raise ValueError("alpha and lambda must be positive")
        if self.nu <= dim - 1:
            raise ValueError(f"nu must exceed D-1 = {dim - 1}, got {self.nu}")
        if self.W.shape != (dim, dim):
            raise ShapeMismatch(f"W has shape {self.W.shape}, expected {(dim, dim)}")
        numerics.cholesky(self.W)

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    @cached_property
    def W_inv(self) -> np.ndarray:
        return numerics.cholesky(self.W).inverse()

    @cached_property
    def logdet_W(self) -> float:
        return numerics.cholesky(self.W).log_det

    @classmethod
    def default(cls, latents: np.ndarray, alpha: float) -> "DpPrior":
        """Weakly informative prior centred on a batch of latents."""
        dim = latents.shape[1]
        return cls(
            alpha=float(alpha),
            m=latents.mean(axis=0),
            lam=1.0,
            W=np.eye(dim) / dim,
            nu=float(dim + 2),
        )


@dataclass(eq=False)
class SuffStats:
    """Raw additive statistics per component; (N, z̄, S) are derived views."""

    n: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    n_tail: float = 0.0

    @classmethod
    def empty(cls, k: int, dim: int) -> "SuffStats":
        return cls(n=np.zeros(k), s1=np.zeros((k, dim)), s2=np.zeros((k, dim, dim)))

    @property
    def k(self) -> int:
        return self.n.shape[0]

    @property
    def dim(self) -> int:
        return self.s1.shape[1]

    def __add__(self, other: "SuffStats") -> "SuffStats":
        if other.n.shape != self.n.shape:
            raise ShapeMismatch(f"cannot add stats over {self.k} and {other.k} components")
        return SuffStats(self.n + other.n, self.s1 + other.s1, self.s2 + other.s2, self.n_tail + other.n_tail)

    def take(self, index) -> "SuffStats":
        return SuffStats(self.n[index], self.s1[index], self.s2[index], self.n_tail)

    def means(self) -> np.ndarray:
        safe = np.where(self.n > 0, self.n, 1.0)
        return np.where(self.n[:, None] > 0, self.s1 / safe[:, None], 0.0)

    def scatters(self) -> np.ndarray:
        """S_k = s2_k / n_k - z̄_k z̄_kᵀ."""
        safe = np.where(self.n > 0, self.n, 1.0)
        zbar = self.means()
        scatter = self.s2 / safe[:, None, None] - np.einsum("kd,ke->kde", zbar, zbar)
        scatter = 0.5 * (scatter + np.swapaxes(scatter, 1, 2))
        return np.where(self.n[:, None, None] > 0, scatter, 0.0)

    def combine(self, k1: int, k2: int) -> "SuffStats":
        """Fold component k2 into k1 and drop k2."""
        n, s1, s2 = self.n.copy(), self.s1.copy(), self.s2.copy()
        n[k1] += n[k2]
        s1[k1] += s1[k2]
        s2[k1] += s2[k2]
        keep = np.arange(self.k) != k2
        return SuffStats(n[keep], s1[keep], s2[keep], self.n_tail)

    def without_tail(self) -> "SuffStats":
        return SuffStats(self.n, self.s1, self.s2, 0.0)


@dataclass(eq=False)
class NwPosterior:
    m: np.ndarray
    lam: np.ndarray
    W: np.ndarray
    W_inv: np.ndarray
    nu: np.ndarray
    logdet_W: np.ndarray

    def precision(self, k: int) -> np.ndarray:
        """λ̂_k Ŵ_k, the precision of the Gaussian stand-in for the Student-t marginal."""
        return self.lam[k] * self.W[k]


@dataclass(eq=False)
class StickPosterior:
    a1: np.ndarray
    a2: np.ndarray
    order: np.ndarray  # component indices by stick-breaking position


@dataclass(eq=False)
class Responsibilities:
    pi: np.ndarray
    tail: np.ndarray
    log_norm: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.pi.shape[0]


@dataclass(frozen=True)
class ComponentEvent:
    kind: Literal["split", "merge", "prune"]
    source: Tuple[int, ...]
    result: Tuple[int, ...]


@dataclass(eq=False)
class DpmmState:
    prior: DpPrior
    ids: np.ndarray
    nw: NwPosterior
    sticks: StickPosterior
    stats: SuffStats
    memory: SuffStats
    elbo: float
    tau: float
    next_id: int
    events: Tuple[ComponentEvent, ...] = ()

    @property
    def k_active(self) -> int:
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return self.prior.dim


@dataclass(frozen=True)
class CaviOptions:
    max_sweeps: int = 50
    sweep_tol: float = 1e-7
    prune_threshold: float = 1e-3
    merge_exhaustive_limit: int = 20
    max_components: int = 64


# ---------------------------------------------------------------------------
# Expectations under the variational posterior
# ---------------------------------------------------------------------------

def tail_log_factor(alpha: float) -> float:
    """-log(1 - exp(ψ(α) - ψ(1+α))): summing the geometric run of inactive sticks."""
    ratio = numerics.digamma(alpha) - numerics.digamma(1.0 + alpha)
    return float(-np.log(-np.expm1(ratio)))


def expected_log_weights(sticks: StickPosterior, alpha: float) -> Tuple[np.ndarray, float]:
    """E[log π_k] for active components and for the first inactive one."""
    total = special.digamma(sticks.a1 + sticks.a2)
    elog_v = special.digamma(sticks.a1) - total
    elog_rest = special.digamma(sticks.a2) - total
    ordered_rest = elog_rest[sticks.order]
    before = np.concatenate([[0.0], np.cumsum(ordered_rest)[:-1]])
    elog_pi = np.empty_like(elog_v)
    elog_pi[sticks.order] = elog_v[sticks.order] + before
    first_tail = float(np.sum(elog_rest)) + numerics.digamma(1.0) - numerics.digamma(1.0 + alpha)
    return elog_pi, first_tail


def expected_log_det(nu: np.ndarray, logdet_W: np.ndarray, dim: int) -> np.ndarray:
    """E[log|Λ|] under Wishart(Ŵ, ν̂)."""
    i = np.arange(1, dim + 1)
    nu = np.atleast_1d(nu)
    return special.digamma((nu[:, None] + 1.0 - i[None, :]) / 2.0).sum(axis=1) + dim * np.log(2.0) + logdet_W


def expected_loglik(Z: np.ndarray, m: np.ndarray, lam: np.ndarray, W: np.ndarray, nu: np.ndarray,
                    logdet_W: np.ndarray) -> np.ndarray:
    """E_q[log N(z_n | μ_k, Λ_k⁻¹)] for every row and component, shape (N, K)."""
    dim = Z.shape[1]
    diff = Z[:, None, :] - m[None, :, :]
    maha = np.einsum("nkd,kde,nke->nk", diff, W, diff)
    quad = dim / lam[None, :] + nu[None, :] * maha
    elogdet = expected_log_det(nu, logdet_W, dim)
    return 0.5 * elogdet[None, :] - 0.5 * dim * LOG_2PI - 0.5 * quad


def _prior_loglik(Z: np.ndarray, prior: DpPrior) -> np.ndarray:
    return expected_loglik(
        Z, prior.m[None, :], np.array([prior.lam]), prior.W[None], np.array([prior.nu]),
        np.array([prior.logdet_W]),
    )[:, 0]


def _check_latents(state: DpmmState, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != state.dim:
        raise ShapeMismatch(f"latents have shape {Z.shape}, expected (N, {state.dim})")
    return Z


def update_responsibilities(state: DpmmState, Z: np.ndarray) -> Responsibilities:
    Z = _check_latents(state, Z)
    nw = state.nw
    elog_pi, first_tail = expected_log_weights(state.sticks, state.prior.alpha)
    log_rho = expected_loglik(Z, nw.m, nw.lam, nw.W, nw.nu, nw.logdet_W) + elog_pi[None, :]
    log_tail = _prior_loglik(Z, state.prior) + first_tail + tail_log_factor(state.prior.alpha)
    stacked = np.column_stack([log_rho, log_tail])
    if Z.shape[0] and not np.all(np.isfinite(stacked)):
        raise NumericalUnderflow("non-finite log responsibilities; latents contain NaN or inf")
    log_norm = special.logsumexp(stacked, axis=1) if Z.shape[0] else np.zeros(0)
    return Responsibilities(
        pi=np.exp(log_rho - log_norm[:, None]),
        tail=np.exp(log_tail - log_norm),
        log_norm=log_norm,
    )


def accumulate_stats(Z: np.ndarray, resp: Responsibilities) -> SuffStats:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[0] != resp.n_rows:
        raise ShapeMismatch(f"{Z.shape[0]} latents but {resp.n_rows} responsibility rows")
    return SuffStats(
        n=resp.pi.sum(axis=0),
        s1=resp.pi.T @ Z,
        s2=np.einsum("nk,nd,ne->kde", resp.pi, Z, Z),
        n_tail=float(resp.tail.sum()),
    )


def stick_order(n: np.ndarray) -> np.ndarray:
    return np.argsort(-n, kind="stable")


def posterior_from_stats(prior: DpPrior, stats: SuffStats) -> Tuple[NwPosterior, StickPosterior]:
    k, dim = stats.k, prior.dim
    zbar = stats.means()
    scatter = stats.scatters()

    m = np.empty((k, dim))
    lam = prior.lam + stats.n
    nu = prior.nu + stats.n
    W = np.empty((k, dim, dim))
    W_inv = np.empty((k, dim, dim))
    logdet_W = np.empty(k)
    for j in range(k):
        n_j = stats.n[j]
        if n_j <= 0:
            m[j], W[j], W_inv[j], logdet_W[j] = prior.m, prior.W, prior.W_inv, prior.logdet_W
            lam[j], nu[j] = prior.lam, prior.nu
            continue
        m[j] = (prior.lam * prior.m + n_j * zbar[j]) / lam[j]
        delta = zbar[j] - prior.m
        inv = prior.W_inv + n_j * scatter[j] + (prior.lam * n_j / lam[j]) * np.outer(delta, delta)
        factor = numerics.with_jitter(numerics.symmetrize(inv))
        W_inv[j] = factor.reconstruct()
        W[j] = factor.inverse()
        logdet_W[j] = -factor.log_det

    order = stick_order(stats.n)
    after = np.empty(k)
    ranked = stats.n[order]
    after[order] = ranked.sum() - np.cumsum(ranked)
    # Tail assignments pass every active stick.
    sticks = StickPosterior(a1=1.0 + stats.n, a2=prior.alpha + after + stats.n_tail, order=order)
    return NwPosterior(m=m, lam=lam, W=W, W_inv=W_inv, nu=nu, logdet_W=logdet_W), sticks


# ---------------------------------------------------------------------------
# Bound terms
# ---------------------------------------------------------------------------

def kl_beta(a1: np.ndarray, a2: np.ndarray, alpha: float) -> np.ndarray:
    """KL[Beta(a1, a2) || Beta(1, α)] elementwise."""
    return (
        special.betaln(1.0, alpha) - special.betaln(a1, a2)
        + (a1 - 1.0) * special.digamma(a1)
        + (a2 - alpha) * special.digamma(a2)
        + (1.0 + alpha - a1 - a2) * special.digamma(a1 + a2)
    )


def _log_wishart_norm(logdet_W: np.ndarray, nu: np.ndarray, dim: int) -> np.ndarray:
    """log B(W, ν) of the Wishart density."""
    lmg = np.array([special.multigammaln(v / 2.0, dim) for v in np.atleast_1d(nu)])
    return -0.5 * nu * logdet_W - 0.5 * nu * dim * np.log(2.0) - lmg


def kl_normal_wishart(nw: NwPosterior, prior: DpPrior) -> np.ndarray:
    """KL[NW(φ̂_k) || NW(φ)] per component."""
    dim = prior.dim
    elogdet = expected_log_det(nw.nu, nw.logdet_W, dim)
    wishart = (
        _log_wishart_norm(nw.logdet_W, nw.nu, dim)
        - _log_wishart_norm(np.full_like(nw.nu, prior.logdet_W), np.full_like(nw.nu, prior.nu), dim)
        + 0.5 * (nw.nu - prior.nu) * elogdet
        - 0.5 * nw.nu * dim
        + 0.5 * nw.nu * np.einsum("de,ked->k", prior.W_inv, nw.W)
    )
    delta = nw.m - prior.m[None, :]
    gaussian = 0.5 * (
        dim * prior.lam / nw.lam - dim + dim * np.log(nw.lam / prior.lam)
        + prior.lam * nw.nu * np.einsum("kd,kde,ke->k", delta, nw.W, delta)
    )
    return wishart + gaussian


def _memory_term(state: DpmmState, elog_pi: np.ndarray) -> float:
    """Expected complete-data log-likelihood of memory pseudo-observations (fixed assignment)."""
    mem, nw, dim = state.memory, state.nw, state.dim
    if not np.any(mem.n > 0):
        return 0.0
    elogdet = expected_log_det(nw.nu, nw.logdet_W, dim)
    centred = (
        mem.s2
        - np.einsum("kd,ke->kde", mem.s1, nw.m)
        - np.einsum("kd,ke->kde", nw.m, mem.s1)
        + mem.n[:, None, None] * np.einsum("kd,ke->kde", nw.m, nw.m)
    )
    trace = np.einsum("kde,ked->k", nw.W, centred)
    loglik = mem.n * (0.5 * elogdet - 0.5 * dim * LOG_2PI - 0.5 * dim / nw.lam) - 0.5 * nw.nu * trace
    return float(np.sum(loglik + mem.n * elog_pi))


def cavi_elbo(state: DpmmState, Z: np.ndarray, resp: Responsibilities) -> float:
    _check_latents(state, Z)
    if resp.n_rows != np.asarray(Z).shape[0]:
        raise ShapeMismatch("responsibilities do not match latents")
    stick_term = -np.sum(kl_beta(state.sticks.a1, state.sticks.a2, state.prior.alpha))
    nw_term = -np.sum(kl_normal_wishart(state.nw, state.prior))
    elog_pi, _ = expected_log_weights(state.sticks, state.prior.alpha)
    value = float(stick_term + nw_term + np.sum(resp.log_norm) + _memory_term(state, elog_pi))
    if not np.isfinite(value):
        raise NonFinite(f"L_CAVI is not finite ({value})")
    return value


def dpmm_kl_terms(state: DpmmState, resp: Responsibilities) -> float:
    """E_q[log p(c, v, η) / q(c, v, η)] for the rows in `resp`."""
    alpha = state.prior.alpha
    stick_term = -np.sum(kl_beta(state.sticks.a1, state.sticks.a2, alpha))
    nw_term = -np.sum(kl_normal_wishart(state.nw, state.prior))
    assignment = assignment_term(state, resp)
    value = float(stick_term + nw_term + assignment)
    if not np.isfinite(value):
        raise NonFinite(f"DPMM bound term is not finite ({value})")
    return value


def assignment_term(state: DpmmState, resp: Responsibilities) -> float:
    """Σ_n E[log p(c_n | v)] + H[q(c_n)], the inactive run spread geometrically."""
    alpha = state.prior.alpha
    elog_pi, first_tail = expected_log_weights(state.sticks, alpha)
    ratio = float(np.exp(-1.0 / alpha))
    mean_offset = ratio / (1.0 - ratio)
    tail_elog = first_tail - mean_offset / alpha
    tail_entropy = -np.log1p(-ratio) + mean_offset / alpha
    expected = np.sum(resp.pi * elog_pi[None, :]) + np.sum(resp.tail) * tail_elog
    entropy = -np.sum(special.xlogy(resp.pi, resp.pi)) - np.sum(special.xlogy(resp.tail, resp.tail))
    entropy += np.sum(resp.tail) * tail_entropy
    return float(expected + entropy)


# ---------------------------------------------------------------------------
# State construction and coordinate ascent
# ---------------------------------------------------------------------------

def refit(state: DpmmState, stats: SuffStats) -> DpmmState:
    nw, sticks = posterior_from_stats(state.prior, stats)
    return replace(state, nw=nw, sticks=sticks, stats=stats)


def init_state(prior: DpPrior, Z: np.ndarray, tau: float = 1e-6) -> DpmmState:
    """K_a = 1 with every latent fully assigned to the single component."""
    Z = np.asarray(Z, dtype=np.float64)
    dim = prior.dim
    resp = Responsibilities(pi=np.ones((Z.shape[0], 1)), tail=np.zeros(Z.shape[0]), log_norm=np.zeros(Z.shape[0]))
    stats = accumulate_stats(Z, resp) if Z.shape[0] else SuffStats.empty(1, dim)
    nw, sticks = posterior_from_stats(prior, stats)
    state = DpmmState(
        prior=prior, ids=np.array([0], dtype=np.int64), nw=nw, sticks=sticks, stats=stats,
        memory=SuffStats.empty(1, dim), elbo=0.0, tau=tau, next_id=1,
    )
    if Z.shape[0]:
        state.elbo = cavi_elbo(state, Z, update_responsibilities(state, Z))
    return state


def commit_memory(state: DpmmState) -> DpmmState:
    """Fold the current statistics into memory so they outlive the current rows."""
    return replace(state, memory=state.stats.without_tail())


def clear_memory(state: DpmmState) -> DpmmState:
    return replace(state, memory=SuffStats.empty(state.k_active, state.dim))


def sweep(state: DpmmState, Z: np.ndarray, options: CaviOptions = CaviOptions()) -> Tuple[DpmmState, Responsibilities]:
    """Full coordinate ascent (responsibilities, stats, posteriors) to convergence or the sweep cap."""
    resp = update_responsibilities(state, Z)
    elbo = cavi_elbo(state, Z, resp)
    for _ in range(options.max_sweeps):
        state = refit(state, accumulate_stats(Z, resp) + state.memory)
        resp = update_responsibilities(state, Z)
        new = cavi_elbo(state, Z, resp)
        if new < elbo - 1e-8 * abs(elbo):
            logger.warning(f"L_CAVI decreased during a sweep: {elbo:.6f} -> {new:.6f}")
        converged = abs(new - elbo) <= options.sweep_tol * max(abs(elbo), 1e-12)
        elbo = new
        if converged:
            break
    return replace(state, elbo=elbo), resp


def improves(new: float, old: float, tau: float) -> bool:
    """Relative improvement test with |L| in the denominator."""
    if old == 0.0:
        return new > tau
    return (new - old) / abs(old) > tau


def _candidate(state: DpmmState, Z: np.ndarray, pi: np.ndarray, tail: np.ndarray, memory: SuffStats,
               ids: np.ndarray, next_id: int, event: ComponentEvent) -> DpmmState:
    resp = Responsibilities(pi=pi, tail=tail, log_norm=np.zeros(pi.shape[0]))
    stats = accumulate_stats(Z, resp) + memory
    candidate = replace(state, ids=ids, memory=memory, next_id=next_id, events=state.events + (event,))
    return refit(candidate, stats)


def propose_split(state: DpmmState, Z: np.ndarray, resp: Responsibilities, k: int) -> DpmmState:
    """Split component k along the bisector of its principal axis."""
    Z = _check_latents(state, Z)
    stats = state.stats
    if stats.n[k] < 2:
        raise DegenerateSplit(f"component {k} holds {stats.n[k]:.3g} < 2 points")
    zbar = stats.means()[k]
    scatter = stats.scatters()[k]
    if np.trace(scatter) <= 1e-12 * (1.0 + float(zbar @ zbar)):
        raise DegenerateSplit(f"component {k} has no scatter to split along")
    try:
        direction = numerics.principal_eigvec(scatter)
    except NoConvergence as e:
        raise DegenerateSplit(str(e)) from e

    upper = (Z - zbar) @ direction > 0
    weight = resp.pi[:, k]
    pi = np.column_stack([resp.pi, np.where(upper, 0.0, weight)])
    pi[:, k] = np.where(upper, weight, 0.0)

    memory = SuffStats(
        n=np.append(state.memory.n, 0.0),
        s1=np.vstack([state.memory.s1, np.zeros((1, state.dim))]),
        s2=np.concatenate([state.memory.s2, np.zeros((1, state.dim, state.dim))]),
    )
    if memory.n[k] > 0 and (memory.s1[k] / memory.n[k] - zbar) @ direction <= 0:
        memory.n[-1], memory.s1[-1], memory.s2[-1] = memory.n[k], memory.s1[k], memory.s2[k]
        memory.n[k], memory.s1[k], memory.s2[k] = 0.0, 0.0, 0.0

    masses = pi[:, [k, -1]].sum(axis=0) + memory.n[[k, -1]]
    if np.any(masses < MIN_SIDE_MASS):
        raise DegenerateSplit(f"split of component {k} leaves one side empty")

    new_id = state.next_id
    ids = np.append(state.ids, new_id)
    event = ComponentEvent("split", (int(state.ids[k]),), (int(state.ids[k]), new_id))
    candidate = _candidate(state, Z, pi, resp.tail, memory, ids, new_id + 1, event)

    # Restricted pass: redistribute k's mass between the two children only.
    nw = candidate.nw
    elog_pi, _ = expected_log_weights(candidate.sticks, state.prior.alpha)
    pair = [k, candidate.k_active - 1]
    log_rho = expected_loglik(Z, nw.m[pair], nw.lam[pair], nw.W[pair], nw.nu[pair], nw.logdet_W[pair])
    log_rho += elog_pi[pair][None, :]
    share = np.exp(log_rho - special.logsumexp(log_rho, axis=1, keepdims=True))
    pi = pi.copy()
    pi[:, pair] = weight[:, None] * share
    resp_c = Responsibilities(pi=pi, tail=resp.tail, log_norm=np.zeros(pi.shape[0]))
    candidate = refit(candidate, accumulate_stats(Z, resp_c) + memory)
    candidate.elbo = cavi_elbo(candidate, Z, update_responsibilities(candidate, Z))
    return candidate


def log_marginal(prior: DpPrior, n: float, s1: np.ndarray, s2: np.ndarray) -> float:
    """log M(s): NW marginal likelihood of one component's statistics."""
    if n <= 0:
        return 0.0
    dim = prior.dim
    stats = SuffStats(np.array([n]), s1[None, :], s2[None, :, :])
    zbar, scatter = stats.means()[0], stats.scatters()[0]
    lam_n = prior.lam + n
    nu_n = prior.nu + n
    delta = zbar - prior.m
    inv_n = prior.W_inv + n * scatter + (prior.lam * n / lam_n) * np.outer(delta, delta)
    logdet_inv_n = numerics.with_jitter(numerics.symmetrize(inv_n)).log_det
    return float(
        -0.5 * n * dim * np.log(np.pi)
        + numerics.log_multigamma(nu_n / 2.0, dim) - numerics.log_multigamma(prior.nu / 2.0, dim)
        - 0.5 * prior.nu * prior.logdet_W - 0.5 * nu_n * logdet_inv_n
        + 0.5 * dim * (np.log(prior.lam) - np.log(lam_n))
    )


def merge_score(stats: SuffStats, k1: int, k2: int, prior: DpPrior) -> float:
    if k1 == k2:
        raise ValueError("merge_score needs two distinct components")
    merged = log_marginal(prior, stats.n[k1] + stats.n[k2], stats.s1[k1] + stats.s1[k2], stats.s2[k1] + stats.s2[k2])
    return merged - log_marginal(prior, stats.n[k1], stats.s1[k1], stats.s2[k1]) \
        - log_marginal(prior, stats.n[k2], stats.s1[k2], stats.s2[k2])


def propose_merge(state: DpmmState, Z: np.ndarray, resp: Responsibilities, k1: int, k2: int) -> DpmmState:
    """Merge two components; the larger one keeps its id."""
    if state.stats.n[k2] > state.stats.n[k1]:
        k1, k2 = k2, k1
    pi = resp.pi.copy()
    pi[:, k1] += pi[:, k2]
    keep = np.arange(state.k_active) != k2
    memory = state.memory.combine(k1, k2)
    event = ComponentEvent("merge", (int(state.ids[k1]), int(state.ids[k2])), (int(state.ids[k1]),))
    candidate = _candidate(state, Z, pi[:, keep], resp.tail, memory, state.ids[keep], state.next_id, event)
    candidate.elbo = cavi_elbo(candidate, Z, update_responsibilities(candidate, Z))
    return candidate


def _merge_pairs(state: DpmmState, options: CaviOptions, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """For each first component, the partner with the best marginal-likelihood ratio."""
    k = state.k_active
    firsts = np.arange(k)
    if k > options.merge_exhaustive_limit:
        firsts = np.sort(rng.choice(k, size=options.merge_exhaustive_limit, replace=False))
    pairs = set()
    for k1 in firsts:
        scores = []
        for k2 in range(k):
            if k2 == k1:
                continue
            try:
                scores.append((merge_score(state.stats, int(k1), k2, state.prior), k2))
            except NotPositiveDefinite:
                logger.warning(f"Skipping merge score for pair ({k1}, {k2})")
        if scores:
            best = max(scores)[1]
            pairs.add((min(int(k1), best), max(int(k1), best)))
    return sorted(pairs)


def _prune(state: DpmmState, Z: np.ndarray, resp: Responsibilities, threshold: float) -> Optional[DpmmState]:
    keep = state.stats.n >= threshold
    if keep.all():
        return None
    if not keep.any():
        keep[np.argmax(state.stats.n)] = True
    events = tuple(ComponentEvent("prune", (int(i),), ()) for i in state.ids[~keep])
    pi = resp.pi[:, keep]
    # Pruned mass returns to the remaining components in proportion.
    row_mass = pi.sum(axis=1, keepdims=True)
    lost = resp.pi[:, ~keep].sum(axis=1, keepdims=True)
    pi = np.where(row_mass > 0, pi + lost * pi / np.where(row_mass > 0, row_mass, 1.0), pi)
    memory = state.memory.take(np.flatnonzero(keep))
    pruned = replace(state, ids=state.ids[keep], memory=memory, events=state.events + events)
    stats = accumulate_stats(Z, Responsibilities(pi=pi, tail=resp.tail, log_norm=resp.log_norm)) + memory
    return refit(pruned, stats)


def run_split_merge(state: DpmmState, Z: np.ndarray, options: CaviOptions = CaviOptions(),
                    rng: Optional[np.random.Generator] = None) -> DpmmState:
    """Greedy split step, then greedy merge step, with full sweeps between proposals."""
    Z = _check_latents(state, Z)
    if Z.shape[0] == 0:
        return state
    rng = rng if rng is not None else np.random.default_rng(0)
    state = replace(state, events=())
    state, resp = sweep(state, Z, options)
    logger.debug(f"Split-merge start: K_a={state.k_active}, L={state.elbo:.4f}")

    while state.k_active < options.max_components:
        best = None
        for k in range(state.k_active):
            try:
                candidate = propose_split(state, Z, resp, k)
            except (DegenerateSplit, NotPositiveDefinite) as e:
                logger.debug(f"Split of component {k} rejected: {e}")
                continue
            if best is None or candidate.elbo > best.elbo:
                best = candidate
        if best is None:
            break
        accepted, accepted_resp = sweep(best, Z, options)
        if not improves(accepted.elbo, state.elbo, state.tau):
            break
        logger.debug(f"Split accepted: K_a {state.k_active} -> {accepted.k_active}, L={accepted.elbo:.4f}")
        state, resp = accepted, accepted_resp

    while state.k_active > 1:
        best = None
        for k1, k2 in _merge_pairs(state, options, rng):
            try:
                candidate = propose_merge(state, Z, resp, k1, k2)
            except NotPositiveDefinite as e:
                logger.debug(f"Merge of ({k1}, {k2}) rejected: {e}")
                continue
            if best is None or candidate.elbo > best.elbo:
                best = candidate
        if best is None:
            break
        accepted, accepted_resp = sweep(best, Z, options)
        if not improves(accepted.elbo, state.elbo, state.tau):
            break
        logger.debug(f"Merge accepted: K_a {state.k_active} -> {accepted.k_active}, L={accepted.elbo:.4f}")
        state, resp = accepted, accepted_resp

    pruned = _prune(state, Z, resp, options.prune_threshold)
    if pruned is not None:
        state, resp = sweep(pruned, Z, options)
    return state
