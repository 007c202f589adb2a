# src/capclust/models/structures.py
from typing import Annotated, Any, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import (
    BaseModel,
    ConfigDict,
    PlainSerializer,
    PlainValidator,
    PrivateAttr,
    model_validator,
)

from ..utils.constants import PD_RELATIVE_TOL


def _as_float_array(value: Any) -> np.ndarray:
    array = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(array)):
        raise ValueError("array contains non-finite entries")
    return array


def _as_int_array(value: Any) -> np.ndarray:
    array = np.asarray(value)
    if array.size and not np.issubdtype(array.dtype, np.integer):
        if not np.all(np.equal(np.mod(array, 1), 0)):
            raise ValueError("labels must be integers")
    return array.astype(int)


def _to_list(array: np.ndarray) -> list:
    return array.tolist()


FloatArray = Annotated[
    np.ndarray,
    PlainValidator(_as_float_array),
    PlainSerializer(_to_list, return_type=list, when_used="json"),
]
IntArray = Annotated[
    np.ndarray,
    PlainValidator(_as_int_array),
    PlainSerializer(_to_list, return_type=list, when_used="json"),
]


class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class SubjectRecord(ArrayModel):
    """One subject: observations Y (optional), covariates x and w, sample covariance S over T rows"""

    id: str
    Y: Optional[FloatArray] = None
    x: FloatArray
    w: FloatArray
    S: FloatArray
    T: int

    @model_validator(mode="after")
    def check_subject(self) -> "SubjectRecord":
        if self.T < 1:
            raise ValueError(f"subject '{self.id}': T must be positive")
        if self.x.ndim != 1 or self.w.ndim != 1 or self.x.size < 1 or self.w.size < 1:
            raise ValueError(f"subject '{self.id}': x and w must be non-empty vectors")
        if self.x[0] != 1.0 or self.w[0] != 1.0:
            raise ValueError(f"subject '{self.id}': x[0] and w[0] must be the intercept 1")
        S = self.S
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"subject '{self.id}': S must be square, got shape {S.shape}")
        if not np.allclose(S, S.T, rtol=0.0, atol=1e-12):
            raise ValueError(f"subject '{self.id}': S is not symmetric")
        scale = max(1.0, float(np.trace(S)) / S.shape[0])
        if np.linalg.eigvalsh(S)[0] < -PD_RELATIVE_TOL * scale:
            raise ValueError(f"subject '{self.id}': S has a negative eigenvalue")
        if self.Y is not None and self.Y.shape != (self.T, S.shape[0]):
            raise ValueError(f"subject '{self.id}': Y shape {self.Y.shape} does not match (T, p)")
        return self

    @classmethod
    def from_observations(cls, subject_id: str, Y: Any, x: Any, w: Any) -> "SubjectRecord":
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] < 1:
            raise ValueError(f"subject '{subject_id}': Y must be a non-empty T x p matrix")
        S = Y.T @ Y / Y.shape[0]
        S = (S + S.T) / 2.0
        return cls(id=subject_id, Y=Y, x=x, w=w, S=S, T=Y.shape[0])

    @property
    def p(self) -> int:
        return int(self.S.shape[0])


class Dataset(ArrayModel):
    """Subjects sharing p, q1 and q2; stacked views and the pooled covariance are cached"""

    subjects: list[SubjectRecord]
    x_names: list[str] = []
    w_names: list[str] = []

    _pooled: Optional[np.ndarray] = PrivateAttr(default=None)
    _stack: Optional[dict[str, np.ndarray]] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def check_dimensions(self) -> "Dataset":
        if not self.subjects:
            raise ValueError("a dataset needs at least one subject")
        first = self.subjects[0]
        for subject in self.subjects[1:]:
            if subject.p != first.p or subject.x.size != first.x.size or subject.w.size != first.w.size:
                raise ValueError(
                    f"subject '{subject.id}' has dimensions (p={subject.p}, q1={subject.x.size}, "
                    f"q2={subject.w.size}), expected (p={first.p}, q1={first.x.size}, q2={first.w.size})"
                )
        if not self.x_names:
            self.x_names = ["intercept"] + [f"x{j}" for j in range(1, first.x.size)]
        if not self.w_names:
            self.w_names = ["intercept"] + [f"w{j}" for j in range(1, first.w.size)]
        return self

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].p

    @property
    def q1(self) -> int:
        return int(self.subjects[0].x.size)

    @property
    def q2(self) -> int:
        return int(self.subjects[0].w.size)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    @property
    def has_raw(self) -> bool:
        return all(s.Y is not None for s in self.subjects)

    def _stacked(self) -> dict[str, np.ndarray]:
        if self._stack is None:
            self._stack = {
                "S": np.stack([s.S for s in self.subjects]),
                "X": np.stack([s.x for s in self.subjects]),
                "W": np.stack([s.w for s in self.subjects]),
                "T": np.array([s.T for s in self.subjects], dtype=float),
            }
        return self._stack

    @property
    def S(self) -> np.ndarray:
        """(n, p, p) stack of sample covariances"""
        return self._stacked()["S"]

    @property
    def X(self) -> np.ndarray:
        return self._stacked()["X"]

    @property
    def W(self) -> np.ndarray:
        return self._stacked()["W"]

    @property
    def T(self) -> np.ndarray:
        return self._stacked()["T"]

    @property
    def total_T(self) -> float:
        return float(self.T.sum())

    @property
    def pooled(self) -> np.ndarray:
        """Pooled covariance H, checked for positive definiteness on first access"""
        if self._pooled is None:
            from ..dataset import pooled_covariance

            self._pooled = pooled_covariance(self)
        return self._pooled

    def subset(self, indices: Any) -> "Dataset":
        """Dataset over the given subject positions; repeats are allowed (bootstrap resamples)"""
        chosen = [self.subjects[int(i)] for i in indices]
        return Dataset(subjects=chosen, x_names=list(self.x_names), w_names=list(self.w_names))


class ModelParams(ArrayModel):
    """Projection gamma (p), expert coefficients beta (K, q1), gating coefficients alpha (K, q2) with alpha[0] = 0"""

    gamma: FloatArray
    beta: FloatArray
    alpha: FloatArray

    @model_validator(mode="after")
    def check_params(self) -> "ModelParams":
        if self.gamma.ndim != 1:
            raise ValueError("gamma must be a vector")
        if self.beta.ndim != 2 or self.alpha.ndim != 2 or self.beta.shape[0] != self.alpha.shape[0]:
            raise ValueError(f"beta {self.beta.shape} and alpha {self.alpha.shape} must be (K, q) matrices")
        if self.beta.shape[0] < 1:
            raise ValueError("K must be at least 1")
        if np.any(self.alpha[0] != 0.0):
            raise ValueError("alpha[0] must be exactly zero (reference cluster)")
        return self

    @property
    def K(self) -> int:
        return int(self.beta.shape[0])

    def permuted(self, order: Any) -> "ModelParams":
        """
        Relabel clusters: new cluster j is old cluster order[j]

        Gating coefficients are re-referenced so the new cluster 1 keeps alpha = 0.
        """
        order = np.asarray(order, dtype=int)
        alpha = self.alpha[order]
        alpha = alpha - alpha[0]
        alpha[0] = 0.0
        return ModelParams(gamma=self.gamma.copy(), beta=self.beta[order].copy(), alpha=alpha)


class Responsibilities(ArrayModel):
    eta: FloatArray

    @model_validator(mode="after")
    def check_rows(self) -> "Responsibilities":
        if self.eta.ndim != 2:
            raise ValueError("eta must be an n x K matrix")
        if np.any(self.eta < 0.0) or np.any(self.eta > 1.0):
            raise ValueError("responsibilities must lie in [0, 1]")
        if not np.allclose(self.eta.sum(axis=1), 1.0, rtol=0.0, atol=1e-10):
            raise ValueError("responsibility rows must sum to one")
        return self

    @property
    def labels(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. the smallest index on ties
        return np.argmax(self.eta, axis=1)


class FitResult(ArrayModel):
    params: ModelParams
    resp: Responsibilities
    labels: IntArray
    loglik: float
    trace: list[float]
    iterations: int
    converged: bool
    restart_index: int = 0
    fixed_gamma: bool = False

    def summary(self) -> dict[str, Any]:
        return {
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "restart_index": self.restart_index,
            "cluster_sizes": np.bincount(self.labels, minlength=self.params.K).tolist(),
        }


class ComponentSet(ArrayModel):
    """
    Sequentially extracted projections in original coordinates

    The last component may be rejected (its DfD exceeded the threshold); it is kept for
    diagnostics only.
    """

    K: int
    gammas: list[FloatArray] = []
    fits: list[FitResult] = []
    dfd_trace: list[float] = []
    accepted: list[bool] = []
    dfd_threshold: float = 2.0
    errors: list[str] = []

    @property
    def r(self) -> int:
        return len(self.gammas)

    @property
    def n_accepted(self) -> int:
        return int(sum(self.accepted))

    @property
    def accepted_fits(self) -> list[FitResult]:
        return [fit for fit, ok in zip(self.fits, self.accepted) if ok]

    @property
    def accepted_gammas(self) -> list[np.ndarray]:
        return [g for g, ok in zip(self.gammas, self.accepted) if ok]


class BicReport(BaseModel):
    per_component: dict[int, list[float]]
    average: dict[int, float]
    chosen_K: int
    warnings: list[str] = []

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"K": K, "component": j + 1, "bic": value}
            for K, values in sorted(self.per_component.items())
            for j, value in enumerate(values)
        ]
        return pd.DataFrame(rows, columns=["K", "component", "bic"])


class CoefficientInterval(BaseModel):
    component: int
    cluster: int
    parameter: Literal["beta", "alpha", "contrast"]
    term: str
    estimate: float
    lower: float
    upper: float
    successes: int


class BootstrapReport(BaseModel):
    B: int
    level: float
    rows: list[CoefficientInterval]
    successes: dict[int, int]
    failures: list[str] = []

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=list(CoefficientInterval.model_fields))


class SimilarityRow(BaseModel):
    dim: int
    mean: float
    se: float
    n: int


class CoefficientRow(BaseModel):
    dim: int
    cluster: int
    bias: float
    mse: float
    n: int


class ClusteringRow(BaseModel):
    method: str
    dim: int
    jaccard: float
    ari: float
    error: float
    n: int
    jaccard_se: float = 0.0
    ari_se: float = 0.0
    error_se: float = 0.0


class EvalSummary(BaseModel):
    similarity: list[SimilarityRow] = []
    coefficients: list[CoefficientRow] = []
    clustering: list[ClusteringRow] = []


class FeatureMatrix(ArrayModel):
    values: FloatArray
    construction: Literal["fisher_z_lowtri", "log_projected"]

    @model_validator(mode="after")
    def check_shape(self) -> "FeatureMatrix":
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be two-dimensional")
        if self.construction == "log_projected" and self.values.shape[1] != 1:
            raise ValueError("log_projected features have exactly one column")
        return self

    @property
    def n(self) -> int:
        return int(self.values.shape[0])


class SimGroundTruth(ArrayModel):
    """True eigenvectors, memberships (1-based labels per structured dim) and coefficients of a simulation"""

    Pi: FloatArray
    subject_bases: Optional[FloatArray] = None
    structured_dims: list[int]
    memberships: dict[int, IntArray]
    log_eigenvalues: FloatArray
    alpha_true: list[list[list[float]]]
    beta_true: list[list[list[float]]]

    @model_validator(mode="after")
    def check_truth(self) -> "SimGroundTruth":
        p = self.Pi.shape[0]
        if self.Pi.shape != (p, p) or not np.allclose(self.Pi.T @ self.Pi, np.eye(p), rtol=0.0, atol=1e-10):
            raise ValueError("Pi must be a p x p orthonormal matrix")
        for dim, labels in self.memberships.items():
            if labels.size and labels.min() < 1:
                raise ValueError(f"membership labels of dimension {dim} must start at 1")
        return self

    def projection(self, dim: int) -> np.ndarray:
        """True direction pi_dim (1-based column of Pi)"""
        return self.Pi[:, dim - 1]

    def beta_for(self, dim: int) -> np.ndarray:
        return np.asarray(self.beta_true[self.structured_dims.index(dim)], dtype=float)

    def covariance(self, i: int) -> np.ndarray:
        basis = self.Pi if self.subject_bases is None else self.subject_bases[i]
        return (basis * np.exp(self.log_eigenvalues[i])) @ basis.T


class RunManifest(BaseModel):
    command: str
    config: dict[str, Any]
    seed: int
    version: str
    input_digests: dict[str, str] = {}
    started: str
    wall_clock_seconds: float = 0.0
    stage_timings: dict[str, float] = {}
