# src/capclust/metrics.py
from collections.abc import Sequence
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score
from sklearn.metrics.cluster import contingency_matrix, pair_confusion_matrix

from .models.structures import CoefficientRow, FitResult, ModelParams, SimGroundTruth, SimilarityRow
from .utils.constants import MAX_PERMUTATION_LABELS
from .utils.errors import DimensionMismatch, InvalidInput, PermutationLimit


def projection_similarity(g_hat: np.ndarray, pi_true: np.ndarray) -> float:
    """|<g/||g||, pi/||pi||>|"""
    g_hat = np.asarray(g_hat, dtype=float)
    pi_true = np.asarray(pi_true, dtype=float)
    g_norm, pi_norm = np.linalg.norm(g_hat), np.linalg.norm(pi_true)
    if g_norm == 0.0 or pi_norm == 0.0:
        raise InvalidInput("projection similarity is undefined for a zero vector")
    return float(min(1.0, abs(g_hat @ pi_true) / (g_norm * pi_norm)))


def _check_labels(a: Sequence, b: Sequence) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"label vectors differ in shape: {a.shape} vs {b.shape}")
    return a, b


def adjusted_rand_index(a: Sequence, b: Sequence) -> float:
    a, b = _check_labels(a, b)
    if a.size < 2:
        raise InvalidInput("ARI needs at least two labels")
    return float(adjusted_rand_score(a, b))


def jaccard_index(a: Sequence, b: Sequence) -> float:
    """
    Pair-counting Jaccard index

    Pairs clustered together in both partitions over pairs clustered together in at least one;
    1 when neither partition groups any pair.
    """
    a, b = _check_labels(a, b)
    counts = pair_confusion_matrix(a, b)
    together = counts[1, 1]
    union = counts[1, 1] + counts[0, 1] + counts[1, 0]
    if union == 0:
        return 1.0
    return float(together / union)


def classification_error(a: Sequence, truth: Sequence) -> float:
    """Smallest mismatch fraction over relabelings of a"""
    a, truth = _check_labels(a, truth)
    n_labels = max(np.unique(a).size, np.unique(truth).size)
    if n_labels > MAX_PERMUTATION_LABELS:
        raise PermutationLimit(n_labels, MAX_PERMUTATION_LABELS)
    table = contingency_matrix(truth, a)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(1.0 - table[rows, cols].sum() / a.size)


def unit_norm_coefficients(params: ModelParams) -> np.ndarray:
    """Expert coefficients for the Euclidean-unit projection gamma/||gamma||"""
    beta = params.beta.copy()
    beta[:, 0] -= 2.0 * np.log(np.linalg.norm(params.gamma))
    return beta


def align_clusters(beta_hat: np.ndarray, beta_true: np.ndarray) -> np.ndarray:
    """Rows of beta_hat reordered to match beta_true by minimal total squared distance"""
    if beta_hat.shape != beta_true.shape:
        raise DimensionMismatch(f"estimated {beta_hat.shape} and true {beta_true.shape} coefficients differ")
    cost = ((beta_hat[:, None, :] - beta_true[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    aligned = np.empty_like(beta_hat)
    aligned[cols] = beta_hat[rows]
    return aligned


def coefficient_bias_mse(
    fits: Sequence[Optional[FitResult]], truth: SimGroundTruth, dim: int
) -> list[CoefficientRow]:
    """
    Bias and MSE of the expert coefficients for one structured dimension

    Each fit is converted to unit-norm coefficients and aligned to the true clusters; per
    cluster the entrywise errors are averaged over the q1 coefficients and over the fits.
    Missing fits (None) are excluded.
    """
    beta_true = truth.beta_for(dim)
    errors = [align_clusters(unit_norm_coefficients(fit.params), beta_true) - beta_true for fit in fits if fit is not None]
    if not errors:
        return []
    stacked = np.stack(errors)
    return [
        CoefficientRow(
            dim=dim,
            cluster=k + 1,
            bias=float(stacked[:, k, :].mean()),
            mse=float((stacked[:, k, :] ** 2).mean()),
            n=len(errors),
        )
        for k in range(beta_true.shape[0])
    ]


def summarize_similarity(values: Sequence[float], dim: int) -> SimilarityRow:
    """Mean and standard error over replications"""
    array = np.asarray(values, dtype=float)
    se = float(array.std(ddof=1) / np.sqrt(array.size)) if array.size > 1 else 0.0
    return SimilarityRow(dim=dim, mean=float(array.mean()), se=se, n=int(array.size))


def match_components(gammas: Sequence[np.ndarray], truth: SimGroundTruth) -> dict[int, int]:
    """
    Pair components with structured dimensions by maximal total similarity

    Returns:
        Mapping structured dim -> 0-based component position; dims left over when there are
        fewer components than dims are absent
    """
    dims = truth.structured_dims
    if not gammas:
        return {}
    similarity = np.array([[projection_similarity(g, truth.projection(dim)) for dim in dims] for g in gammas])
    rows, cols = linear_sum_assignment(similarity, maximize=True)
    return {dims[c]: int(r) for r, c in zip(rows, cols)}
