# src/capclust/simgen.py
"""
Synthetic subjects with a common (or partially common) eigenstructure

Subject i has covariance Sigma_i = B_i diag(lambda_i) B_i'. On every structured dimension the
log-eigenvalue follows the expert model of the subject's drawn cluster; the remaining
log-eigenvalues are normal around a grid decreasing linearly from eigen_mean_high to
eigen_mean_low.
"""

from typing import Optional

import numpy as np
from scipy.special import softmax
from scipy.stats import ortho_group

from .models.config import SimConfig
from .models.structures import Dataset, SimGroundTruth, SubjectRecord
from .utils.errors import InvalidInput
from .utils.helpers import derive_rng, logger


def random_orthonormal(p: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed p x p orthonormal matrix; [[1.0]] when p = 1"""
    if p < 1:
        raise InvalidInput(f"p must be positive, got {p}")
    if p == 1:
        return np.ones((1, 1))
    return ortho_group.rvs(dim=p, random_state=rng)


def _draw_subject(
    cfg: SimConfig, i: int, Pi: np.ndarray, background: np.ndarray
) -> tuple[SubjectRecord, np.ndarray, list[int], Optional[np.ndarray]]:
    rng = derive_rng(cfg.seed, "subject", i)
    x = np.array([1.0, float(rng.binomial(1, 0.5)), rng.standard_normal()])
    w_full = np.array([1.0, float(rng.binomial(1, 0.5))])
    w = w_full[:1] if cfg.intercept_only_gating else w_full

    structured = [d - 1 for d in cfg.structured_dims]
    log_eigenvalues = np.empty(cfg.p)
    free = [d for d in range(cfg.p) if d not in structured]
    log_eigenvalues[free] = background + cfg.eigen_sd * rng.standard_normal(len(free))

    memberships = []
    for j, dim in enumerate(structured):
        alphas = np.asarray(cfg.alpha_true[j], dtype=float).reshape(-1, 2)
        logits = np.concatenate([[0.0], alphas[:, : w.size] @ w])
        if cfg.misspec == "both_interactions":
            logits[1:] += cfg.interaction_coef * w_full[1] * x[1]
        k = int(rng.choice(cfg.K, p=softmax(logits)))
        memberships.append(k + 1)
        log_eigenvalues[dim] = x @ np.asarray(cfg.beta_true[j][k], dtype=float)
        if cfg.misspec != "none":
            log_eigenvalues[dim] += cfg.interaction_coef * x[1] * x[2]

    basis: Optional[np.ndarray] = None
    mixing = Pi
    if cfg.eigenstructure == "partial_common":
        basis = Pi.copy()
        shared = cfg.shared_count
        if shared < cfg.p:
            basis[:, shared:] = Pi[:, shared:] @ random_orthonormal(cfg.p - shared, rng)
        mixing = basis

    scale = np.exp(0.5 * log_eigenvalues)
    Y = (rng.standard_normal((cfg.T, cfg.p)) * scale) @ mixing.T
    if cfg.noise == "student_t":
        Y *= np.sqrt((cfg.df - 2.0) / rng.chisquare(cfg.df, size=cfg.T))[:, None]

    subject = SubjectRecord.from_observations(f"s{i:04d}", Y, x, w)
    return subject, log_eigenvalues, memberships, basis


def generate_dataset(cfg: SimConfig) -> tuple[Dataset, SimGroundTruth]:
    """
    Draw a dataset and its ground truth

    Covariates are x = (1, Bernoulli(0.5), N(0, 1)) and w = (1, Bernoulli(0.5)), or w = (1) for
    intercept-only gating. Every subject owns the random stream (seed, "subject", i); the common
    basis comes from (seed, "basis").

    Args:
        cfg: Simulation design

    Returns:
        (Dataset, SimGroundTruth)
    """
    Pi = random_orthonormal(cfg.p, derive_rng(cfg.seed, "basis"))
    n_free = cfg.p - len(cfg.structured_dims)
    background = np.linspace(cfg.eigen_mean_high, cfg.eigen_mean_low, n_free) if n_free else np.empty(0)

    subjects = []
    log_eigenvalues = np.empty((cfg.n, cfg.p))
    labels = np.empty((cfg.n, len(cfg.structured_dims)), dtype=int)
    bases = []
    for i in range(cfg.n):
        subject, log_eigenvalues[i], labels[i], basis = _draw_subject(cfg, i, Pi, background)
        subjects.append(subject)
        if basis is not None:
            bases.append(basis)

    w_names = ["intercept"] if cfg.intercept_only_gating else ["intercept", "w1"]
    dataset = Dataset(subjects=subjects, x_names=["intercept", "x1", "x2"], w_names=w_names)
    truth = SimGroundTruth(
        Pi=Pi,
        subject_bases=np.stack(bases) if bases else None,
        structured_dims=list(cfg.structured_dims),
        memberships={dim: labels[:, j] for j, dim in enumerate(cfg.structured_dims)},
        log_eigenvalues=log_eigenvalues,
        alpha_true=cfg.alpha_true,
        beta_true=cfg.beta_true,
    )
    logger.debug(f"Simulated {cfg.n} subjects (p={cfg.p}, T={cfg.T}, K={cfg.K}, seed={cfg.seed})")
    return dataset, truth
