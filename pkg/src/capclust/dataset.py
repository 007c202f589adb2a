# src/capclust/dataset.py
"""
Multi-subject data: ingestion, centering/scaling, pooled covariance and serialization

File formats:
    time series     NDJSON, one object per subject: {"id": str, "Y": [[row floats]]}
    covariances     NDJSON, one object per subject: {"id": str, "T": int, "S": [[...]]}
    covariates      CSV with header id,x1,...,w1,...; intercepts are prepended on load
"""

import json
import os
from collections.abc import Iterator
from typing import Any, Optional

import numpy as np
import pandas as pd

from .models.structures import Dataset, SubjectRecord
from .utils.constants import EIGENVECTOR_MATCH_THRESHOLD, PD_RELATIVE_TOL
from .utils.errors import (
    DimensionMismatch,
    DuplicateSubject,
    InvalidInput,
    MissingCovariates,
    RawDataRequired,
    SingularPooled,
    ZeroVariance,
)
from .utils.helpers import dumps_json, ensure_directory_exists, logger, save_csv


def _read_ndjson(path: str) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInput(f"{path}:{line_no}: invalid JSON ({e.msg})") from e
            if not isinstance(record, dict) or "id" not in record:
                raise InvalidInput(f"{path}:{line_no}: expected an object with an 'id' field")
            yield line_no, record


def _observation_count(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
        raise InvalidInput(f"{what} must be a whole number of observations, got {value!r}")
    if value < 1:
        raise InvalidInput(f"{what} must be positive, got {value!r}")
    return int(value)


def _numeric_matrix(value: Any, what: str) -> np.ndarray:
    try:
        matrix = np.array(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise InvalidInput(f"{what} is not a rectangular numeric matrix") from e
    if matrix.ndim != 2:
        raise InvalidInput(f"{what} must be a matrix, got {matrix.ndim} dimensions")
    if not np.all(np.isfinite(matrix)):
        raise InvalidInput(f"{what} contains non-finite values")
    return matrix


def load_covariates(covariates_path: str) -> tuple[dict[str, tuple[np.ndarray, np.ndarray]], list[str], list[str]]:
    """
    Read the covariates CSV

    Args:
        covariates_path: CSV with an id column, expert columns named x* and gating columns named w*

    Returns:
        Mapping id -> (x, w) with intercepts prepended, expert names and gating names
    """
    frame = pd.read_csv(covariates_path, dtype={"id": str})
    if "id" not in frame.columns:
        raise InvalidInput(f"{covariates_path}: missing 'id' column")

    x_columns = [c for c in frame.columns if c.startswith("x")]
    w_columns = [c for c in frame.columns if c.startswith("w")]
    unknown = [c for c in frame.columns if c != "id" and c not in x_columns and c not in w_columns]
    if unknown:
        raise InvalidInput(f"{covariates_path}: columns must be named x* or w*, got {unknown}")

    duplicated = frame["id"][frame["id"].duplicated()]
    if not duplicated.empty:
        raise DuplicateSubject(str(duplicated.iloc[0]), covariates_path)

    values = frame[x_columns + w_columns].apply(pd.to_numeric, errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        row, col = (int(v[0]) for v in np.nonzero(bad))
        raise InvalidInput(
            f"{covariates_path}: non-numeric or missing cell in column '{values.columns[col]}' "
            f"for subject '{frame['id'].iloc[row]}'"
        )

    covariates: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    x_values = values[x_columns].to_numpy(dtype=float)
    w_values = values[w_columns].to_numpy(dtype=float)
    for row, subject_id in enumerate(frame["id"]):
        x = np.concatenate([[1.0], x_values[row]])
        w = np.concatenate([[1.0], w_values[row]])
        covariates[str(subject_id)] = (x, w)
    return covariates, ["intercept", *x_columns], ["intercept", *w_columns]


def _build_dataset(
    records: dict[str, dict[str, Any]],
    covariates_path: str,
    source: str,
) -> Dataset:
    covariates, x_names, w_names = load_covariates(covariates_path)

    subjects = []
    p: Optional[int] = None
    for subject_id in sorted(records):
        if subject_id not in covariates:
            raise MissingCovariates(subject_id)
        x, w = covariates[subject_id]
        record = records[subject_id]
        if "Y" in record:
            Y = _numeric_matrix(record["Y"], f"{source}: Y of subject '{subject_id}'")
            dim = Y.shape[1]
        else:
            S = _numeric_matrix(record["S"], f"{source}: S of subject '{subject_id}'")
            T = _observation_count(record["T"], f"{source}: T of subject '{subject_id}'")
            dim = S.shape[1]
        if p is None:
            p = dim
        elif dim != p:
            raise DimensionMismatch(f"{source}: subject '{subject_id}' has p={dim}, expected p={p}")

        try:
            if "Y" in record:
                subjects.append(SubjectRecord.from_observations(subject_id, Y, x, w))
            else:
                subjects.append(SubjectRecord(id=subject_id, x=x, w=w, S=S, T=T))
        except ValueError as e:
            raise InvalidInput(f"{source}: {e}") from e

    extra = sorted(set(covariates) - set(records))
    if extra:
        logger.warning(f"{len(extra)} covariate rows have no matching subject and are ignored")

    if not subjects:
        raise InvalidInput(f"{source}: no subjects found")
    dataset = Dataset(subjects=subjects, x_names=x_names, w_names=w_names)
    logger.info(f"Loaded {dataset.n} subjects (p={dataset.p}, q1={dataset.q1}, q2={dataset.q2}) from {source}")
    return dataset


def load_dataset(timeseries_path: str, covariates_path: str) -> Dataset:
    """
    Load raw time series and covariates; sample covariances use divisor T

    Args:
        timeseries_path: NDJSON time-series file
        covariates_path: covariates CSV

    Returns:
        Dataset ordered by subject id
    """
    records: dict[str, dict[str, Any]] = {}
    for line_no, record in _read_ndjson(timeseries_path):
        subject_id = str(record["id"])
        if subject_id in records:
            raise DuplicateSubject(subject_id, timeseries_path)
        if "Y" not in record:
            raise InvalidInput(f"{timeseries_path}:{line_no}: subject '{subject_id}' has no 'Y' field")
        records[subject_id] = record
    return _build_dataset(records, covariates_path, timeseries_path)


def load_covariances(covariances_path: str, covariates_path: str) -> Dataset:
    """Load precomputed (S, T) pairs; the result has no raw observations"""
    records: dict[str, dict[str, Any]] = {}
    for line_no, record in _read_ndjson(covariances_path):
        subject_id = str(record["id"])
        if subject_id in records:
            raise DuplicateSubject(subject_id, covariances_path)
        if "S" not in record or "T" not in record:
            raise InvalidInput(f"{covariances_path}:{line_no}: subject '{subject_id}' needs 'S' and 'T'")
        records[subject_id] = record
    return _build_dataset(records, covariates_path, covariances_path)


def load_any(data_path: str, covariates_path: str) -> Dataset:
    """Dispatch on the first record: 'Y' means raw time series, otherwise precomputed covariances"""
    for _, record in _read_ndjson(data_path):
        if "Y" in record:
            return load_dataset(data_path, covariates_path)
        return load_covariances(data_path, covariates_path)
    raise InvalidInput(f"{data_path}: no subjects found")


def _covariate_frame(d: Dataset) -> pd.DataFrame:
    x_names = d.x_names[1:]
    w_names = d.w_names[1:]
    frame = pd.DataFrame({"id": d.ids})
    for j, name in enumerate(x_names, start=1):
        frame[name] = d.X[:, j]
    for j, name in enumerate(w_names, start=1):
        frame[name] = d.W[:, j]
    return frame


def save_dataset(d: Dataset, timeseries_path: str, covariates_path: str) -> None:
    """Write raw observations as NDJSON and covariates as CSV; floats round-trip exactly"""
    if not d.has_raw:
        raise RawDataRequired("save_dataset needs raw observations; use save_covariances instead")
    ensure_directory_exists(os.path.dirname(timeseries_path))
    with open(timeseries_path, "w") as f:
        for subject in d.subjects:
            f.write(dumps_json({"id": subject.id, "Y": subject.Y}, indent=None) + "\n")
    save_csv(_covariate_frame(d), covariates_path)


def save_covariances(d: Dataset, covariances_path: str, covariates_path: str) -> None:
    ensure_directory_exists(os.path.dirname(covariances_path))
    with open(covariances_path, "w") as f:
        for subject in d.subjects:
            f.write(dumps_json({"id": subject.id, "T": subject.T, "S": subject.S}, indent=None) + "\n")
    save_csv(_covariate_frame(d), covariates_path)


def center_scale(d: Dataset, unit_variance: bool = True) -> Dataset:
    """
    Remove each subject's column means and, optionally, scale columns to unit variance

    Args:
        d: Dataset with raw observations
        unit_variance: divide every column by its standard deviation (divisor T)

    Returns:
        New dataset with recomputed covariances
    """
    if not d.has_raw:
        raise RawDataRequired("center_scale needs raw observations")

    subjects = []
    for subject in d.subjects:
        Y = subject.Y
        assert Y is not None
        if subject.T < 2:
            raise InvalidInput(f"subject '{subject.id}' needs at least two observations to center")
        mean = Y.mean(axis=0)
        centered = Y - mean
        if unit_variance:
            std = Y.std(axis=0)
            flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
            if flat.any():
                raise ZeroVariance(subject.id, int(np.argmax(flat)))
            centered = centered / std
        subjects.append(SubjectRecord.from_observations(subject.id, centered, subject.x, subject.w))
    return Dataset(subjects=subjects, x_names=list(d.x_names), w_names=list(d.w_names))


def check_positive_definite(H: np.ndarray, what: str = "H") -> np.ndarray:
    """
    Verify H is positive definite relative to its scale

    Returns:
        Ascending eigenvalues of H
    """
    eigenvalues = np.linalg.eigvalsh(H)
    p = H.shape[0]
    trace = float(np.trace(H))
    if not np.isfinite(trace) or trace <= 0.0 or eigenvalues[0] <= PD_RELATIVE_TOL * trace / p:
        raise SingularPooled(
            f"{what} is not positive definite (smallest eigenvalue {eigenvalues[0]:.3e}, trace {trace:.3e})"
        )
    return eigenvalues


def pooled_covariance(d: Dataset) -> np.ndarray:
    """
    Pooled covariance H = sum_i T_i S_i / sum_i T_i

    Args:
        d: Dataset

    Returns:
        Symmetric positive definite p x p matrix
    """
    H = np.einsum("i,ijk->jk", d.T, d.S) / d.total_T
    H = (H + H.T) / 2.0
    check_positive_definite(H, "pooled covariance")
    return H


def eigenstructure_agreement(d: Dataset, threshold: float = EIGENVECTOR_MATCH_THRESHOLD) -> pd.DataFrame:
    """
    Share of subjects whose own eigenvectors reproduce each pooled eigenvector

    A pooled eigenvector counts as shared by a subject when the largest absolute inner product
    with one of the subject's eigenvectors exceeds the threshold.

    Returns:
        Frame with columns eigenvector (1-based, descending eigenvalue), eigenvalue, share
    """
    eigenvalues, vectors = np.linalg.eigh(d.pooled)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, vectors = eigenvalues[order], vectors[:, order]

    _, subject_vectors = np.linalg.eigh(d.S)
    overlap = np.abs(vectors.T @ subject_vectors)
    shared = overlap.max(axis=2) > threshold
    return pd.DataFrame(
        {
            "eigenvector": np.arange(1, d.p + 1),
            "eigenvalue": eigenvalues,
            "share": shared.mean(axis=0),
        }
    )
