# src/capclust/models/config.py
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..utils.constants import (
    DEFAULT_DFD_THRESHOLD,
    DEFAULT_EMPTY_CLUSTER_TOL,
    DEFAULT_GATING_MAX_ITER,
    DEFAULT_GATING_TOL,
    DEFAULT_MAX_HALVINGS,
    DEFAULT_MAX_ITER,
    DEFAULT_N_RESTARTS,
    DEFAULT_NEWTON_MAX_ITER,
    DEFAULT_NEWTON_TOL,
    DEFAULT_RIDGE,
    DEFAULT_TOL,
)

Method = Literal["capclust", "kmeans_lowtri", "kmeans_log", "hierarchical_lowtri", "hierarchical_log"]
ALL_METHODS: tuple[Method, ...] = ("capclust", "kmeans_lowtri", "kmeans_log", "hierarchical_lowtri", "hierarchical_log")


class EmConfig(BaseModel):
    """Settings of the EM fit, restarts and component extraction"""

    model_config = ConfigDict(extra="forbid")

    tol: float = Field(DEFAULT_TOL, gt=0)
    max_iter: int = Field(DEFAULT_MAX_ITER, ge=1)
    n_restarts: int = Field(DEFAULT_N_RESTARTS, ge=1)
    seed: int = Field(0, ge=0)
    h_matrix: Literal["pooled", "identity"] = "pooled"
    newton_max_iter: int = Field(DEFAULT_NEWTON_MAX_ITER, ge=1)
    newton_tol: float = Field(DEFAULT_NEWTON_TOL, gt=0)
    gating_max_iter: int = Field(DEFAULT_GATING_MAX_ITER, ge=1)
    gating_tol: float = Field(DEFAULT_GATING_TOL, gt=0)
    ridge: float = Field(DEFAULT_RIDGE, ge=0)
    max_halvings: int = Field(DEFAULT_MAX_HALVINGS, ge=0)
    empty_cluster_tol: float = Field(DEFAULT_EMPTY_CLUSTER_TOL, ge=0)
    spectral_init: bool = True
    threads: int = Field(1, ge=1)
    dfd_threshold: float = Field(DEFAULT_DFD_THRESHOLD, ge=1.0)
    max_components: int = Field(3, ge=1)
    progress: bool = False


class SimConfig(BaseModel):
    """
    Simulation design with common (or partially common) eigenstructure

    Structured dimensions are 1-based. For every structured dimension, alpha_true holds the
    K-1 gating vectors of clusters 2..K (cluster 1 is the reference) and beta_true holds the
    K variance-model vectors.
    """

    model_config = ConfigDict(extra="forbid")

    p: int = Field(50, ge=2)
    n: int = Field(100, ge=2)
    T: int = Field(100, ge=2)
    K: int = Field(2, ge=1)
    structured_dims: list[int] = [2, 4]
    alpha_true: list[list[list[float]]] = [[[0.5, -1.0]], [[-0.25, 0.5]]]
    beta_true: list[list[list[float]]] = [
        [[1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]],
        [[0.5, 0.5, -0.5], [0.5, -0.5, 0.5]],
    ]
    eigen_mean_high: float = 3.0
    eigen_mean_low: float = -1.0
    eigen_sd: float = Field(0.2, ge=0)
    misspec: Literal["none", "variance_interaction", "both_interactions"] = "none"
    interaction_coef: float = 0.5
    eigenstructure: Literal["common", "partial_common"] = "common"
    shared_count: int = Field(3, ge=1)
    noise: Literal["gaussian", "student_t"] = "gaussian"
    df: float = Field(5.0, gt=2.0)
    intercept_only_gating: bool = False
    seed: int = Field(0, ge=0)

    @property
    def q1(self) -> int:
        return 3

    @property
    def q2(self) -> int:
        return 1 if self.intercept_only_gating else 2

    @model_validator(mode="after")
    def check_design(self) -> "SimConfig":
        dims = self.structured_dims
        if len(set(dims)) != len(dims):
            raise ValueError(f"structured_dims must be distinct, got {dims}")
        if any(d < 1 or d > self.p for d in dims):
            raise ValueError(f"structured_dims must lie in [1, {self.p}], got {dims}")
        if len(self.alpha_true) != len(dims) or len(self.beta_true) != len(dims):
            raise ValueError("alpha_true and beta_true need one entry per structured dimension")
        for j, (alphas, betas) in enumerate(zip(self.alpha_true, self.beta_true)):
            if len(alphas) != self.K - 1:
                raise ValueError(f"alpha_true[{j}] needs K-1={self.K - 1} vectors, got {len(alphas)}")
            if len(betas) != self.K:
                raise ValueError(f"beta_true[{j}] needs K={self.K} vectors, got {len(betas)}")
            if any(len(a) != 2 for a in alphas):
                raise ValueError(f"alpha_true[{j}] vectors must have length 2 (intercept, w1)")
            if any(len(b) != self.q1 for b in betas):
                raise ValueError(f"beta_true[{j}] vectors must have length {self.q1} (intercept, x1, x2)")
        if self.eigenstructure == "partial_common" and self.shared_count > self.p:
            raise ValueError("shared_count cannot exceed p")
        return self


class BenchmarkConfig(BaseModel):
    """Monte-Carlo study: replications of simulate -> fit every method -> score"""

    model_config = ConfigDict(extra="forbid")

    sim: SimConfig = SimConfig()
    em: EmConfig = EmConfig()
    replications: int = Field(5, ge=1)
    methods: list[Method] = list(ALL_METHODS)
    external_commands: dict[str, str] = {}
    select_k: Optional[tuple[int, int]] = None
    max_components: Optional[int] = None
    linkage: Literal["ward", "complete", "average", "single"] = "ward"
    kmeans_n_init: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_selection_range(self) -> "BenchmarkConfig":
        if self.select_k is not None:
            k_min, k_max = self.select_k
            if k_min < 1 or k_max < k_min:
                raise ValueError(f"select_k must satisfy 1 <= k_min <= k_max, got {self.select_k}")
        return self


class RunConfig(BaseModel):
    """Top-level configuration of the command line tool"""

    model_config = ConfigDict(extra="forbid")

    em: EmConfig = EmConfig()
    k: int = Field(2, ge=1)
    k_min: int = Field(1, ge=1)
    k_max: int = Field(4, ge=1)
    bootstrap_B: int = Field(200, ge=2)
    level: float = Field(0.05, gt=0, lt=1)
    unit_variance: bool = True
    center: bool = True
    restarts_per_replicate: int = Field(0, ge=0)
    contrasts: dict[str, list[float]] = {}
