"""Dense linear algebra and special functions shared by the other services."""

import logging
from dataclasses import dataclass
from typing import Callable, TypeVar

import numpy as np
from scipy import linalg, special

from app.errors import DomainError, NoConvergence, NotPositiveDefinite

logger = logging.getLogger(__name__)

T = TypeVar("T")

SYMMETRY_TOL = 1e-9
JITTER_START = 1e-10
JITTER_MAX = 1e-6


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of an SPD matrix with its cached log-determinant."""

    lower: np.ndarray
    log_det: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.lower, True), rhs)

    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def cholesky(m: np.ndarray) -> SpdFactor:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotPositiveDefinite(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        lower = linalg.cholesky(symmetrize(m), lower=True)
    except linalg.LinAlgError as e:
        raise NotPositiveDefinite(str(e)) from e
    diag = np.diag(lower)
    if np.any(diag <= 0) or not np.all(np.isfinite(lower)):
        raise NotPositiveDefinite("factor has a non-positive pivot")
    return SpdFactor(lower=lower, log_det=float(2.0 * np.sum(np.log(diag))))


def with_jitter(m: np.ndarray, op: Callable[[np.ndarray], T] = cholesky) -> T:
    """Apply `op` to m, adding eps*I (1e-10 up to 1e-6, x10 steps) on NotPositiveDefinite."""
    try:
        return op(m)
    except NotPositiveDefinite:
        pass
    eye = np.eye(m.shape[0])
    eps = JITTER_START
    while eps <= JITTER_MAX * (1 + 1e-12):
        try:
            result = op(m + eps * eye)
            logger.warning(f"Matrix regularized with jitter {eps:.0e}")
            return result
        except NotPositiveDefinite:
            eps *= 10.0
    raise NotPositiveDefinite(f"matrix still not positive-definite after jitter {JITTER_MAX:.0e}")


def digamma(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise DomainError("digamma is only defined here for x > 0")
    out = special.digamma(x)
    return float(out) if out.ndim == 0 else out


def log_gamma(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise DomainError("log_gamma is only defined here for x > 0")
    out = special.gammaln(x)
    return float(out) if out.ndim == 0 else out


def log_multigamma(a: float, dim: int) -> float:
    """ln Γ_D(a), the multivariate log-gamma used by Wishart normalizers."""
    if a <= (dim - 1) / 2.0:
        raise DomainError(f"multivariate log-gamma needs a > {(dim - 1) / 2.0}, got {a}")
    return float(special.multigammaln(a, dim))


def sign_normalize(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip v so that its first non-negligible entry is positive."""
    nonzero = np.flatnonzero(np.abs(v) > tol)
    if nonzero.size and v[nonzero[0]] < 0:
        return -v
    return v


def principal_eigvec(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    dim = s.shape[0]
    try:
        _, vectors = linalg.eigh(symmetrize(s), subset_by_index=[dim - 1, dim - 1])
    except (linalg.LinAlgError, ValueError) as e:
        raise NoConvergence(f"eigensolver failed: {e}") from e
    v = vectors[:, 0]
    v = v / np.linalg.norm(v)
    return sign_normalize(v)


def sigma_points(mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """2D symmetric points mean ± sqrt(D)·(columns of a covariance square root).

    A singular or zero covariance collapses the points onto the mean.
    """
    mean = np.asarray(mean, dtype=np.float64)
    dim = mean.shape[0]
    values, vectors = np.linalg.eigh(symmetrize(np.asarray(cov, dtype=np.float64)))
    root = vectors * np.sqrt(np.clip(values, 0.0, None))
    offsets = np.sqrt(dim) * root.T
    return np.vstack([mean + offsets, mean - offsets])
