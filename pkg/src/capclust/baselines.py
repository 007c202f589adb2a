# src/capclust/baselines.py
"""
Competing clusterers: K-means and agglomerative clustering on Fisher-z correlation features or
on log projected variances, plus a hook for clusterers run as external commands.
"""

import os
import shlex
import subprocess
import tempfile
from typing import Optional

import backoff
import numpy as np
import pandas as pd
from scipy.cluster.hierarchy import fcluster, linkage
from sklearn.cluster import KMeans

from .models.structures import Dataset, FeatureMatrix
from .utils.constants import FISHER_Z_CLAMP
from .utils.errors import ExternalMethodFailed, InvalidInput
from .utils.helpers import logger


def fisher_z_lower_tri(S: np.ndarray) -> np.ndarray:
    """
    atanh of the strictly lower-triangular correlations, column-major

    Args:
        S: Covariance matrix with a positive diagonal

    Returns:
        Vector of length p(p-1)/2
    """
    S = np.asarray(S, dtype=float)
    sd = np.sqrt(np.diag(S))
    if np.any(sd <= 0.0):
        raise InvalidInput("Fisher z features need a positive covariance diagonal")
    R = S / np.outer(sd, sd)
    # upper triangle in row-major order is the lower triangle in column-major order
    lower = R[np.triu_indices(S.shape[0], k=1)]
    return np.arctanh(np.clip(lower, -FISHER_Z_CLAMP, FISHER_Z_CLAMP))


def log_projected_variance(S: np.ndarray, gamma: np.ndarray) -> float:
    value = float(gamma @ S @ gamma)
    if value <= 0.0:
        raise InvalidInput("projected variance must be positive")
    return float(np.log(value))


def fisher_z_features(d: Dataset) -> FeatureMatrix:
    return FeatureMatrix(values=np.stack([fisher_z_lower_tri(s.S) for s in d.subjects]), construction="fisher_z_lowtri")


def log_projected_features(d: Dataset, gamma: np.ndarray) -> FeatureMatrix:
    values = np.array([[log_projected_variance(s.S, gamma)] for s in d.subjects])
    return FeatureMatrix(values=values, construction="log_projected")


def _check_size(F: FeatureMatrix, K: int) -> None:
    if K < 1 or F.n < K:
        raise InvalidInput(f"cannot form K={K} clusters from {F.n} subjects")


def kmeans(F: FeatureMatrix, K: int, seed: int = 0, n_init: int = 10) -> np.ndarray:
    """
    Lloyd's algorithm with k-means++ seeding, best of n_init runs by within-cluster sum of squares

    Returns:
        0-based labels
    """
    _check_size(F, K)
    model = KMeans(n_clusters=K, init="k-means++", n_init=n_init, random_state=seed)
    return model.fit_predict(F.values).astype(int)


def hierarchical(F: FeatureMatrix, K: int, method: str = "ward") -> np.ndarray:
    """Agglomerative clustering on Euclidean distances cut at K clusters; 0-based labels"""
    _check_size(F, K)
    if F.n == 1:
        return np.zeros(1, dtype=int)
    tree = linkage(F.values, method=method, metric="euclidean")
    return fcluster(tree, t=K, criterion="maxclust").astype(int) - 1


@backoff.on_exception(
    backoff.expo,
    (subprocess.CalledProcessError, subprocess.TimeoutExpired),
    max_tries=3,
    max_value=10,
)
def _run_command(command: list[str], timeout: float) -> None:
    subprocess.run(command, check=True, capture_output=True, timeout=timeout)


def run_external_clusterer(command_template: str, F: FeatureMatrix, K: int, timeout: float = 600.0) -> np.ndarray:
    """
    Cluster with an external program

    The template may use {features} (input CSV, one row per subject), {labels} (output CSV
    with a 'label' column) and {k}.

    Returns:
        Labels as written by the program
    """
    with tempfile.TemporaryDirectory(prefix="capclust-") as workdir:
        features_path = os.path.join(workdir, "features.csv")
        labels_path = os.path.join(workdir, "labels.csv")
        pd.DataFrame(F.values).to_csv(features_path, index=False, float_format="%.17g")
        command = shlex.split(command_template.format(features=features_path, labels=labels_path, k=K))
        try:
            _run_command(command, timeout)
        except (subprocess.CalledProcessError, subprocess.TimeoutExpired, OSError) as e:
            raise ExternalMethodFailed(f"external clusterer failed: {e}") from e
        if not os.path.exists(labels_path):
            raise ExternalMethodFailed(f"external clusterer wrote no labels to {labels_path}")
        frame = pd.read_csv(labels_path)

    column = "label" if "label" in frame.columns else frame.columns[0]
    labels = frame[column].to_numpy()
    if labels.shape[0] != F.n:
        raise ExternalMethodFailed(f"external clusterer returned {labels.shape[0]} labels for {F.n} subjects")
    logger.debug(f"External clusterer returned {np.unique(labels).size} clusters")
    return labels


def load_label_file(path: str, ids: list[str], dim: Optional[int] = None) -> np.ndarray:
    """
    Labels produced elsewhere, as CSV with columns subject, cluster and optionally dim

    Args:
        path: CSV path
        ids: Subject order to return
        dim: Structured dimension to select when the file has a dim column

    Returns:
        Labels ordered like ids
    """
    frame = pd.read_csv(path, dtype={"subject": str})
    if not {"subject", "cluster"} <= set(frame.columns):
        raise InvalidInput(f"{path}: label files need 'subject' and 'cluster' columns")
    if "dim" in frame.columns and dim is not None:
        frame = frame[frame["dim"] == dim]
    lookup = dict(zip(frame["subject"], frame["cluster"]))
    missing = [subject for subject in ids if subject not in lookup]
    if missing:
        raise InvalidInput(f"{path}: no label for subject '{missing[0]}'")
    return np.array([lookup[subject] for subject in ids])
