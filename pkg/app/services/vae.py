"""Gaussian encoder/decoder MLP with hand-derived gradients and Adam.

Layers compute ``h @ W + b``; hidden layers use ReLU, both heads are linear
and every log-variance head is clamped to [-clamp, clamp].
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from app.errors import NonFinite, ShapeMismatch
from app.services import dpmm, numerics

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(eq=False)
class MlpParams:
    """Encoder and decoder weights keyed by path, e.g. ``enc.0.W`` or ``dec.mu.b``."""

    arrays: Dict[str, np.ndarray]
    input_dim: int
    latent_dim: int
    hidden_sizes: Tuple[int, ...]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> List[str]:
        return list(self.arrays)

    def copy(self) -> "MlpParams":
        return MlpParams({k: v.copy() for k, v in self.arrays.items()}, self.input_dim, self.latent_dim, self.hidden_sizes)

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "MlpParams":
        return MlpParams(arrays, self.input_dim, self.latent_dim, self.hidden_sizes)

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def _layer_shapes(input_dim: int, latent_dim: int, hidden_sizes: Sequence[int]) -> Dict[str, Tuple[int, int]]:
    shapes = {}
    sizes = [input_dim, *hidden_sizes]
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        shapes[f"enc.{i}"] = (fan_in, fan_out)
    shapes["enc.mu"] = shapes["enc.logvar"] = (sizes[-1], latent_dim)
    sizes = [latent_dim, *reversed(hidden_sizes)]
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        shapes[f"dec.{i}"] = (fan_in, fan_out)
    shapes["dec.mu"] = shapes["dec.logvar"] = (sizes[-1], input_dim)
    return shapes


def init_params(input_dim: int, latent_dim: int, hidden_sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    arrays = {}
    for name, (fan_in, fan_out) in _layer_shapes(input_dim, latent_dim, hidden_sizes).items():
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"{name}.b"] = rng.uniform(-bound, bound, size=fan_out)
    return MlpParams(arrays, input_dim, latent_dim, tuple(hidden_sizes))


def zero_params(input_dim: int, latent_dim: int, hidden_sizes: Sequence[int]) -> MlpParams:
    arrays = {}
    for name, (fan_in, fan_out) in _layer_shapes(input_dim, latent_dim, hidden_sizes).items():
        arrays[f"{name}.W"] = np.zeros((fan_in, fan_out))
        arrays[f"{name}.b"] = np.zeros(fan_out)
    return MlpParams(arrays, input_dim, latent_dim, tuple(hidden_sizes))


@dataclass(eq=False)
class LatentGaussian:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


@dataclass(eq=False)
class _Trunk:
    """Intermediates of one MLP pass, kept for the backward pass."""

    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    top: np.ndarray
    mu: np.ndarray
    logvar_raw: np.ndarray
    logvar: np.ndarray


def _trunk(params: MlpParams, prefix: str, x: np.ndarray, clamp: float) -> _Trunk:
    depth = len(params.hidden_sizes)
    inputs, pre = [], []
    h = x
    for i in range(depth):
        inputs.append(h)
        a = h @ params[f"{prefix}.{i}.W"] + params[f"{prefix}.{i}.b"]
        pre.append(a)
        h = np.maximum(a, 0.0)
    raw = h @ params[f"{prefix}.logvar.W"] + params[f"{prefix}.logvar.b"]
    return _Trunk(
        inputs=inputs, pre=pre, top=h,
        mu=h @ params[f"{prefix}.mu.W"] + params[f"{prefix}.mu.b"],
        logvar_raw=raw, logvar=np.clip(raw, -clamp, clamp),
    )


def _trunk_backward(params: MlpParams, prefix: str, trunk: _Trunk, d_mu: np.ndarray, d_logvar: np.ndarray,
                    clamp: float, grads: Dict[str, np.ndarray]) -> np.ndarray:
    """Accumulate parameter gradients into `grads`; return the gradient w.r.t. the trunk input."""
    d_raw = d_logvar * ((trunk.logvar_raw > -clamp) & (trunk.logvar_raw < clamp))
    grads[f"{prefix}.mu.W"] += trunk.top.T @ d_mu
    grads[f"{prefix}.mu.b"] += d_mu.sum(axis=0)
    grads[f"{prefix}.logvar.W"] += trunk.top.T @ d_raw
    grads[f"{prefix}.logvar.b"] += d_raw.sum(axis=0)
    dh = d_mu @ params[f"{prefix}.mu.W"].T + d_raw @ params[f"{prefix}.logvar.W"].T
    for i in reversed(range(len(trunk.pre))):
        da = dh * (trunk.pre[i] > 0)
        grads[f"{prefix}.{i}.W"] += trunk.inputs[i].T @ da
        grads[f"{prefix}.{i}.b"] += da.sum(axis=0)
        dh = da @ params[f"{prefix}.{i}.W"].T
    return dh


def _as_rows(a: np.ndarray, width: int, what: str) -> Tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    rows = a[None, :] if single else a
    if rows.ndim != 2 or rows.shape[1] != width:
        raise ShapeMismatch(f"{what} has shape {a.shape}, expected last dimension {width}")
    return rows, single


def encode(params: MlpParams, x: np.ndarray, clamp: float = 10.0) -> LatentGaussian:
    rows, single = _as_rows(x, params.input_dim, "input")
    trunk = _trunk(params, "enc", rows, clamp)
    if single:
        return LatentGaussian(trunk.mu[0], trunk.logvar[0])
    return LatentGaussian(trunk.mu, trunk.logvar)


def decode(params: MlpParams, z: np.ndarray, clamp: float = 10.0) -> Tuple[np.ndarray, np.ndarray]:
    rows, single = _as_rows(z, params.latent_dim, "latent")
    trunk = _trunk(params, "dec", rows, clamp)
    if single:
        return trunk.mu[0], trunk.logvar[0]
    return trunk.mu, trunk.logvar


def reparameterize(lat: LatentGaussian, eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-lat.mu.ndim:] != lat.mu.shape:
        raise ShapeMismatch(f"eps has shape {eps.shape}, latent mean has shape {lat.mu.shape}")
    return lat.mu + lat.sigma * eps


def recon_loglik(x: np.ndarray, mu_x: np.ndarray, logvar_x: np.ndarray):
    """log N(x | μ_x, diag exp(logvar_x)), summed over the last axis."""
    x, mu_x, logvar_x = (np.asarray(a, dtype=np.float64) for a in (x, mu_x, logvar_x))
    if x.shape != mu_x.shape or x.shape != logvar_x.shape:
        raise ShapeMismatch(f"shapes differ: x {x.shape}, mu {mu_x.shape}, logvar {logvar_x.shape}")
    value = np.sum(-0.5 * LOG_2PI - 0.5 * logvar_x - 0.5 * (x - mu_x) ** 2 * np.exp(-logvar_x), axis=-1)
    if not np.all(np.isfinite(value)):
        raise NonFinite("reconstruction log-likelihood is not finite")
    return float(value) if np.ndim(value) == 0 else value


def kl_diag_vs_full(lat: LatentGaussian, mean: np.ndarray, precision: np.ndarray):
    """KL[N(μ_z, diag σ_z²) || N(mean, precision⁻¹)] for one row or a batch of rows."""
    factor = numerics.cholesky(precision)
    mu, single = _as_rows(lat.mu, factor.dim, "latent mean")
    logvar = np.atleast_2d(lat.logvar)
    diff = np.asarray(mean)[None, :] - mu
    trace = np.exp(logvar) @ np.diag(precision)
    quad = np.einsum("nd,de,ne->n", diff, precision, diff)
    value = 0.5 * (trace + quad - factor.dim - factor.log_det - logvar.sum(axis=1))
    return float(value[0]) if single else value


@dataclass(eq=False)
class RegularizerTargets:
    """Per component, J Gaussian targets (mean, precision) averaged in the KL penalty."""

    means: np.ndarray
    precisions: np.ndarray
    log_dets: np.ndarray

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def draws(self) -> int:
        return self.means.shape[1]


def gaussian_targets(state: dpmm.DpmmState) -> RegularizerTargets:
    """N(m̂_k, (λ̂_k Ŵ_k)⁻¹), the Gaussian stand-in for each component's predictive."""
    precisions = np.stack([state.nw.precision(k) for k in range(state.k_active)])
    log_dets = np.array([numerics.cholesky(p).log_det for p in precisions])
    return RegularizerTargets(state.nw.m[:, None, :].copy(), precisions[:, None], log_dets[:, None])


def sampled_targets(state: dpmm.DpmmState, draws: int, rng: np.random.Generator) -> RegularizerTargets:
    """J draws (μ, Λ) ~ NW(φ̂_k) per component."""
    k, dim = state.k_active, state.dim
    means = np.empty((k, draws, dim))
    precisions = np.empty((k, draws, dim, dim))
    log_dets = np.empty((k, draws))
    for j in range(k):
        wishart = stats.wishart(df=state.nw.nu[j], scale=state.nw.W[j])
        for d in range(draws):
            lam = np.reshape(wishart.rvs(random_state=rng), (dim, dim))
            lam = numerics.symmetrize(lam)
            factor = numerics.with_jitter(lam)
            cov = factor.inverse() / state.nw.lam[j]
            means[j, d] = rng.multivariate_normal(state.nw.m[j], cov)
            precisions[j, d] = lam
            log_dets[j, d] = factor.log_det
    return RegularizerTargets(means, precisions, log_dets)


@dataclass
class NetObjectiveTerms:
    recon: float
    reg: float
    total: float


@dataclass(eq=False)
class _Pass:
    x: np.ndarray
    eps: np.ndarray
    enc: _Trunk
    decs: List[_Trunk]
    weights: np.ndarray
    targets: RegularizerTargets
    recon_rows: np.ndarray
    kl_rows: np.ndarray


def _as_eps(eps: np.ndarray, batch: int, latent_dim: int) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 1:
        eps = eps[None, None, :]
    elif eps.ndim == 2:
        eps = eps[None]
    if eps.shape[1:] != (batch, latent_dim):
        raise ShapeMismatch(f"eps has shape {eps.shape}, expected (L, {batch}, {latent_dim})")
    return eps


def component_weights(state: dpmm.DpmmState, mu_z: np.ndarray) -> np.ndarray:
    """q(c=k) of each encoder mean under the frozen mixture, tail mass dropped."""
    return dpmm.update_responsibilities(state, mu_z).pi


def _forward(params: MlpParams, x: np.ndarray, eps: np.ndarray, state: dpmm.DpmmState,
             targets: Optional[RegularizerTargets], weights: Optional[np.ndarray], clamp: float) -> _Pass:
    rows, _ = _as_rows(x, params.input_dim, "input")
    eps = _as_eps(eps, rows.shape[0], params.latent_dim)
    enc = _trunk(params, "enc", rows, clamp)
    sigma = np.exp(0.5 * enc.logvar)

    decs, recon = [], np.zeros(rows.shape[0])
    for sample in eps:
        dec = _trunk(params, "dec", enc.mu + sigma * sample, clamp)
        decs.append(dec)
        recon += recon_loglik(rows, dec.mu, dec.logvar)
    recon /= eps.shape[0]

    targets = targets if targets is not None else gaussian_targets(state)
    weights = weights if weights is not None else component_weights(state, enc.mu)
    if weights.shape != (rows.shape[0], targets.k):
        raise ShapeMismatch(f"weights have shape {weights.shape}, expected {(rows.shape[0], targets.k)}")

    var = np.exp(enc.logvar)
    diff = targets.means[None] - enc.mu[:, None, None, :]
    trace = np.einsum("nd,kjdd->nkj", var, targets.precisions)
    quad = np.einsum("nkjd,kjde,nkje->nkj", diff, targets.precisions, diff)
    kl = 0.5 * (trace + quad - params.latent_dim - targets.log_dets[None] - enc.logvar.sum(axis=1)[:, None, None])
    kl_rows = np.einsum("nk,nk->n", weights, kl.mean(axis=2))
    return _Pass(rows, eps, enc, decs, weights, targets, recon, kl_rows)


def net_objective(params: MlpParams, x: np.ndarray, eps: np.ndarray, state: dpmm.DpmmState, gamma: float, *,
                  targets: Optional[RegularizerTargets] = None, weights: Optional[np.ndarray] = None,
                  clamp: float = 10.0) -> NetObjectiveTerms:
    """Reconstruction minus γ times the responsibility-weighted KL, summed over the rows of x.

    eps has shape (D,), (B, D) or (L, B, D); L > 1 averages the reconstruction term.
    """
    fwd = _forward(params, x, eps, state, targets, weights, clamp)
    recon = float(fwd.recon_rows.sum())
    reg = float(fwd.kl_rows.sum())
    total = recon - gamma * reg
    if not np.isfinite(total):
        raise NonFinite("network objective is not finite")
    return NetObjectiveTerms(recon=recon, reg=reg, total=total)


def backprop(params: MlpParams, x: np.ndarray, eps: np.ndarray, state: dpmm.DpmmState, gamma: float, *,
             scale: float = 1.0, targets: Optional[RegularizerTargets] = None,
             weights: Optional[np.ndarray] = None, clamp: float = 10.0) -> Tuple[Dict[str, np.ndarray], NetObjectiveTerms]:
    """Gradients of scale * Σ_n total_n with responsibilities and eps held fixed.

    The trainer passes scale = N / B so a minibatch estimates the full-data objective.
    """
    fwd = _forward(params, x, eps, state, targets, weights, clamp)
    if fwd.x.shape[0] == 0:
        raise ShapeMismatch("backprop needs a non-empty batch")
    grads = params.zeros_like()
    n_samples = fwd.eps.shape[0]
    sigma = np.exp(0.5 * fwd.enc.logvar)

    d_mu_z = np.zeros_like(fwd.enc.mu)
    d_logvar_z = np.zeros_like(fwd.enc.logvar)
    for sample, dec in zip(fwd.eps, fwd.decs):
        inv_var = np.exp(-dec.logvar)
        resid = fwd.x - dec.mu
        d_mu_x = (scale / n_samples) * resid * inv_var
        d_logvar_x = (scale / n_samples) * (-0.5 + 0.5 * resid ** 2 * inv_var)
        dz = _trunk_backward(params, "dec", dec, d_mu_x, d_logvar_x, clamp, grads)
        d_mu_z += dz
        d_logvar_z += dz * sample * 0.5 * sigma

    if gamma != 0.0:
        tg = fwd.targets
        coef = -gamma * scale * fwd.weights / tg.draws
        diff = fwd.enc.mu[:, None, None, :] - tg.means[None]
        d_mu_z += np.einsum("nk,kjde,nkje->nd", coef, tg.precisions, diff)
        diag = np.einsum("kjdd->kjd", tg.precisions)
        var = np.exp(fwd.enc.logvar)
        d_logvar_z += 0.5 * np.einsum("nk,nkjd->nd", coef, diag[None] * var[:, None, None, :] - 1.0)

    _trunk_backward(params, "enc", fwd.enc, d_mu_z, d_logvar_z, clamp, grads)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"gradient of {name} is not finite")
    terms = NetObjectiveTerms(
        recon=float(fwd.recon_rows.sum()), reg=float(fwd.kl_rows.sum()),
        total=float(fwd.recon_rows.sum() - gamma * fwd.kl_rows.sum()),
    )
    return grads, terms


@dataclass(eq=False)
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: MlpParams, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, learning_rate, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: Dict[str, np.ndarray], state: AdamState) -> Tuple[MlpParams, AdamState]:
    """One bias-corrected Adam step of gradient ascent; inputs are left untouched."""
    step = state.step + 1
    arrays, m, v = {}, {}, {}
    for name, value in params.arrays.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeMismatch(f"gradient {name} has shape {g.shape}, parameter has {value.shape}")
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m[name] / (1.0 - state.beta1 ** step)
        v_hat = v[name] / (1.0 - state.beta2 ** step)
        arrays[name] = value + state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, step, state.learning_rate, state.beta1, state.beta2, state.eps)
    return params.with_arrays(arrays), new_state
