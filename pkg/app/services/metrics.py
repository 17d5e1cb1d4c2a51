"""Clustering and detection scores, plus a 2-D projection for plots."""

import logging
from typing import Dict

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.decomposition import PCA
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from app.errors import DataError

logger = logging.getLogger(__name__)


def _check(pred, truth):
    pred = np.asarray(pred).astype(np.int64)
    truth = np.asarray(truth).astype(np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DataError(f"label vectors differ: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise DataError("cannot score an empty labeling")
    return pred, truth


def acc(pred, truth) -> float:
    """Best one-to-one matching of clusters to classes (Hungarian), as a fraction of rows.

    Rectangular tables are allowed; unmatched clusters count as errors.
    """
    pred, truth = _check(pred, truth)
    table = contingency_matrix(truth, pred)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / pred.size)


def ari(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    return float(adjusted_rand_score(truth, pred))


def nmi(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    return float(normalized_mutual_info_score(truth, pred, average_method="arithmetic"))


def dda(flags, truth, healthy_label: int = 0) -> float:
    flags = np.asarray(flags, dtype=bool)
    truth = np.asarray(truth).astype(np.int64)
    if flags.shape != truth.shape or flags.size == 0:
        raise DataError(f"flags {flags.shape} and labels {truth.shape} do not line up")
    return float(np.mean(flags == (truth != healthy_label)))


def score_all(pred, flags, truth, healthy_label: int = 0) -> Dict[str, float]:
    return {
        "dda": dda(flags, truth, healthy_label),
        "acc": acc(pred, truth),
        "ari": ari(pred, truth),
        "nmi": nmi(pred, truth),
    }


def pca2d(Z) -> np.ndarray:
    """Project onto the top two principal axes; each axis' largest loading is made positive."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise DataError(f"pca2d needs at least two rows, got shape {Z.shape}")
    n_components = min(2, Z.shape[1])
    pca = PCA(n_components=n_components, svd_solver="full")
    coords = pca.fit_transform(Z)
    for j, axis in enumerate(pca.components_):
        if axis[np.argmax(np.abs(axis))] < 0:
            coords[:, j] = -coords[:, j]
    if n_components < 2:
        coords = np.column_stack([coords, np.zeros(Z.shape[0])])
    return coords
