# src/capclust/mixture.py
"""
Single-component mixture-of-experts EM

The projected series z_it = gamma' y_it of subject i is modelled as a K-member mixture of
zero-mean normals whose log-variance is linear in the expert covariates x_i and whose
mixing proportions are a softmax in the gating covariates w_i.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh, solve
from scipy.special import logsumexp, softmax
from tqdm import tqdm

from .models.config import EmConfig
from .models.structures import Dataset, FitResult, ModelParams, Responsibilities, SubjectRecord
from .utils.constants import LOG_2PI, PD_RELATIVE_TOL, RESPONSIBILITY_FLOOR
from .utils.errors import (
    AllRestartsFailed,
    DegenerateResponsibility,
    DimensionMismatch,
    EmptyCluster,
    GatingDiverged,
    InvalidInput,
    NumericOverflow,
    RestartableError,
    SingularPooled,
)
from .utils.helpers import derive_rng, logger

# slack for objective comparisons in line searches, relative to the objective's magnitude
_ROUNDING_SLACK = 1e-12


def quad_forms(d: Dataset, gamma: np.ndarray) -> np.ndarray:
    """gamma' S_i gamma for every subject"""
    return np.einsum("j,ijk,k->i", gamma, d.S, gamma)


def constraint_matrix(d: Dataset, h_matrix: str = "pooled") -> np.ndarray:
    if h_matrix == "identity":
        return np.eye(d.p)
    return d.pooled


def _log_expert_densities(quad: np.ndarray, X: np.ndarray, T: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Log-densities per subject and expert; -inf where the density underflows to zero"""
    xb = X @ beta.T
    with np.errstate(over="ignore", invalid="ignore"):
        log_phi = -0.5 * T[:, None] * (LOG_2PI + xb + np.exp(-xb) * quad[:, None])
    if np.any(np.isnan(log_phi) | (log_phi == np.inf)):
        raise NumericOverflow("expert log-density is not finite")
    return log_phi


def _log_gating(W: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    logits = W @ alpha.T
    return logits - logsumexp(logits, axis=1, keepdims=True)


def log_expert_density(subject: SubjectRecord, gamma: np.ndarray, beta_k: np.ndarray) -> float:
    """
    Log-density of subject's projected series under one expert

    Args:
        subject: Subject with sample covariance S and T observations
        gamma: Projection, length p
        beta_k: Expert coefficients, length q1

    Returns:
        -(T/2) [log 2pi + x'beta + exp(-x'beta) gamma'S gamma]
    """
    gamma = np.asarray(gamma, dtype=float)
    beta_k = np.asarray(beta_k, dtype=float)
    if gamma.shape != (subject.p,) or beta_k.shape != subject.x.shape:
        raise DimensionMismatch(
            f"gamma {gamma.shape} / beta {beta_k.shape} do not match p={subject.p}, q1={subject.x.size}"
        )
    quad = np.array([gamma @ subject.S @ gamma])
    log_phi = _log_expert_densities(quad, subject.x[None, :], np.array([float(subject.T)]), beta_k[None, :])
    return float(log_phi[0, 0])


def _log_joint(d: Dataset, params: ModelParams, quad: np.ndarray) -> np.ndarray:
    return _log_gating(d.W, params.alpha) + _log_expert_densities(quad, d.X, d.T, params.beta)


def _posterior(d: Dataset, params: ModelParams, quad: np.ndarray) -> tuple[np.ndarray, float]:
    log_joint = _log_joint(d, params, quad)
    row_max = log_joint.max(axis=1)
    dead = np.nonzero(~np.isfinite(row_max))[0]
    if dead.size:
        raise DegenerateResponsibility(int(dead[0]))
    log_norm = logsumexp(log_joint, axis=1)
    loglik = float(log_norm.sum())
    if not np.isfinite(loglik):
        raise NumericOverflow("observed log-likelihood is not finite")
    eta = np.maximum(np.exp(log_joint - log_norm[:, None]), RESPONSIBILITY_FLOOR)
    eta /= eta.sum(axis=1, keepdims=True)
    return eta, loglik


def _check_params(d: Dataset, params: ModelParams) -> None:
    if params.gamma.shape != (d.p,) or params.beta.shape[1] != d.q1 or params.alpha.shape[1] != d.q2:
        raise DimensionMismatch(
            f"parameters (p={params.gamma.size}, q1={params.beta.shape[1]}, q2={params.alpha.shape[1]}) "
            f"do not match dataset (p={d.p}, q1={d.q1}, q2={d.q2})"
        )


def e_step(d: Dataset, params: ModelParams) -> Responsibilities:
    """
    Posterior cluster probabilities, computed in the log domain

    Args:
        d: Dataset
        params: Current parameters

    Returns:
        Responsibilities with rows summing to one
    """
    _check_params(d, params)
    eta, _ = _posterior(d, params, quad_forms(d, params.gamma))
    return Responsibilities(eta=eta)


def observed_loglik(d: Dataset, params: ModelParams) -> float:
    """Sum over subjects of logsumexp_k [log pi_k(w_i) + log phi_k(z_i | x_i)]"""
    _check_params(d, params)
    log_joint = _log_joint(d, params, quad_forms(d, params.gamma))
    loglik = float(logsumexp(log_joint, axis=1).sum())
    if not np.isfinite(loglik):
        raise NumericOverflow("observed log-likelihood is not finite")
    return loglik


def predict_membership(w_new: np.ndarray, params: ModelParams) -> np.ndarray:
    """
    Cluster probabilities for new gating covariates

    Args:
        w_new: Gating covariates including the intercept, shape (q2,) or (m, q2)

    Returns:
        Softmax probabilities, shape (K,) or (m, K)
    """
    w_new = np.asarray(w_new, dtype=float)
    if w_new.ndim not in (1, 2):
        raise DimensionMismatch(f"w must be a vector or a matrix of rows, got {w_new.ndim} dimensions")
    if w_new.shape[-1] != params.alpha.shape[1]:
        raise DimensionMismatch(f"w has length {w_new.shape[-1]}, expected q2={params.alpha.shape[1]}")
    return softmax(w_new @ params.alpha.T, axis=-1)


def gating_objective(
    alpha: np.ndarray, eta: np.ndarray, W: np.ndarray, T: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    T-weighted multinomial log-likelihood in the free coefficients alpha[1:]

    Returns:
        value, gradient (flattened (K-1)*q2) and negative Hessian
    """
    K, q2 = alpha.shape
    log_pi = _log_gating(W, alpha)
    value = float(np.sum(T[:, None] * eta * log_pi))
    pi = np.exp(log_pi)
    residual = T[:, None] * (eta - pi)
    grad = (residual[:, 1:].T @ W).ravel()
    free = pi[:, 1:]
    curvature = np.einsum("ik,kl->ikl", free, np.eye(K - 1)) - np.einsum("ik,il->ikl", free, free)
    hess = np.einsum("i,ikl,ia,ib->kalb", T, curvature, W, W).reshape((K - 1) * q2, (K - 1) * q2)
    return value, grad, hess


def fit_gating(
    resp: Responsibilities,
    d: Dataset,
    alpha_init: Optional[np.ndarray] = None,
    cfg: Optional[EmConfig] = None,
) -> np.ndarray:
    """
    Weighted multinomial logistic regression of responsibilities on w with alpha[0] = 0

    Damped Newton with a ridge on the Hessian; stops when the gradient max-norm reaches
    cfg.gating_tol or after cfg.gating_max_iter iterations.

    Args:
        resp: Responsibilities (n x K)
        d: Dataset supplying W and T
        alpha_init: Starting point, zeros when omitted
        cfg: EM settings

    Returns:
        alpha, shape (K, q2)
    """
    cfg = cfg or EmConfig()
    eta = resp.eta
    K = eta.shape[1]
    W, T = d.W, d.T
    alpha = np.zeros((K, d.q2)) if alpha_init is None else np.array(alpha_init, dtype=float)
    alpha[0] = 0.0
    if K == 1:
        return alpha

    value, grad, hess = gating_objective(alpha, eta, W, T)
    ridge = cfg.ridge * np.eye(hess.shape[0])
    for iteration in range(cfg.gating_max_iter):
        if np.max(np.abs(grad)) <= cfg.gating_tol:
            break
        try:
            step = solve(hess + ridge, grad, assume_a="pos")
        except LinAlgError as e:
            raise GatingDiverged(f"gating Hessian is singular at iteration {iteration}") from e

        accepted = False
        t = 1.0
        for _ in range(cfg.max_halvings + 1):
            candidate = alpha.copy()
            candidate[1:] += t * step.reshape(K - 1, d.q2)
            new_value, new_grad, new_hess = gating_objective(candidate, eta, W, T)
            if np.isfinite(new_value) and new_value >= value - _ROUNDING_SLACK * (1.0 + abs(value)):
                accepted = True
                break
            t /= 2.0
        if not accepted:
            if np.max(np.abs(grad)) > np.sqrt(cfg.gating_tol) * (1.0 + float(T.sum())):
                raise GatingDiverged(f"gating line search stalled with gradient {np.max(np.abs(grad)):.3e}")
            break
        alpha, value, grad, hess = candidate, new_value, new_grad, new_hess

    if not np.all(np.isfinite(alpha)):
        raise GatingDiverged("gating coefficients are not finite")
    return alpha


def beta_objective(
    beta_k: np.ndarray, weights: np.ndarray, X: np.ndarray, quad: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Expert objective of one cluster (to be minimized) with its gradient and Hessian

    sum_i c_i [x_i'beta + exp(-x_i'beta) q_i] where c_i = T_i eta_ik / 2 and q_i = gamma'S_i gamma.
    """
    xb = X @ beta_k
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = np.exp(-xb) * quad
        value = float(np.sum(weights * (xb + scaled)))
    grad = X.T @ (weights * (1.0 - scaled))
    hess = (X * (weights * scaled)[:, None]).T @ X
    return value, grad, hess


def update_beta_newton(
    resp: Responsibilities,
    d: Dataset,
    gamma: np.ndarray,
    beta_init: np.ndarray,
    cfg: Optional[EmConfig] = None,
    quad: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Newton-Raphson update of every cluster's variance model with step-halving

    Args:
        resp: Responsibilities
        d: Dataset
        gamma: Current projection
        beta_init: Starting coefficients, shape (K, q1)
        cfg: EM settings
        quad: Precomputed gamma' S_i gamma (optional)

    Returns:
        Updated beta, shape (K, q1)
    """
    cfg = cfg or EmConfig()
    quad = quad_forms(d, gamma) if quad is None else quad
    if np.any(quad <= 0.0):
        raise NumericOverflow("projected variance gamma'S gamma is not positive for every subject")
    X = d.X
    beta = np.array(beta_init, dtype=float)
    for k in range(beta.shape[0]):
        weights = 0.5 * d.T * resp.eta[:, k]
        current = beta[k].copy()
        value, grad, hess = beta_objective(current, weights, X, quad)
        iterations = 0
        for iterations in range(1, cfg.newton_max_iter + 1):
            if not np.isfinite(value):
                raise NumericOverflow(f"expert objective of cluster {k + 1} is not finite")
            if np.max(np.abs(grad)) <= cfg.newton_tol:
                break
            try:
                step = cho_solve(cho_factor(hess), grad)
            except LinAlgError as e:
                raise EmptyCluster(k + 1) from e

            t = 1.0
            accepted = False
            for _ in range(cfg.max_halvings + 1):
                candidate = current - t * step
                new_value, new_grad, new_hess = beta_objective(candidate, weights, X, quad)
                if np.isfinite(new_value) and new_value <= value + _ROUNDING_SLACK * (1.0 + abs(value)):
                    accepted = True
                    break
                t /= 2.0
            if not accepted:
                break
            current, value, grad, hess = candidate, new_value, new_grad, new_hess
        logger.debug(f"beta Newton for cluster {k + 1}: {iterations} iterations, |grad| {np.max(np.abs(grad)):.2e}")
        beta[k] = current
    return beta


def gamma_matrix(resp: Responsibilities, d: Dataset, beta: np.ndarray) -> np.ndarray:
    """A = sum_i sum_k (T_i/2) eta_ik exp(-x_i'beta_k) S_i"""
    with np.errstate(over="ignore"):
        a = 0.5 * d.T * np.sum(resp.eta * np.exp(-(d.X @ beta.T)), axis=1)
    if not np.all(np.isfinite(a)):
        raise NumericOverflow("weights of the projection update are not finite")
    A = np.einsum("i,ijk->jk", a, d.S)
    return (A + A.T) / 2.0


def _inverse_sqrt(H: np.ndarray) -> np.ndarray:
    eigenvalues, vectors = eigh(H)
    trace = float(np.sum(eigenvalues))
    if trace <= 0.0 or eigenvalues[0] <= PD_RELATIVE_TOL * trace / H.shape[0]:
        raise SingularPooled(f"constraint matrix is not positive definite (smallest eigenvalue {eigenvalues[0]:.3e})")
    return (vectors / np.sqrt(eigenvalues)) @ vectors.T


def _fix_sign(gamma: np.ndarray) -> np.ndarray:
    return -gamma if gamma[np.argmax(np.abs(gamma))] < 0 else gamma


def update_gamma(A: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, float]:
    """
    Minimize gamma'A gamma subject to gamma'H gamma = 1

    Solved through the symmetric transform B = H^{-1/2} A H^{-1/2}: its eigenvector for the
    smallest eigenvalue, mapped back by H^{-1/2}.

    Args:
        A: Symmetric PSD matrix
        H: Symmetric positive definite matrix

    Returns:
        (gamma, lambda) with the largest-magnitude entry of gamma positive
    """
    root = _inverse_sqrt(H)
    B = root @ A @ root
    B = (B + B.T) / 2.0
    eigenvalues, vectors = eigh(B)
    gamma = root @ vectors[:, 0]
    gamma /= np.sqrt(gamma @ H @ gamma)
    return _fix_sign(gamma), float(eigenvalues[0])


def random_init(d: Dataset, K: int, rng: np.random.Generator, H: np.ndarray) -> ModelParams:
    """
    Gaussian direction normalized to gamma'H gamma = 1; beta intercepts at the log projected
    variance of randomly chosen subjects; alpha = 0
    """
    gamma = rng.standard_normal(d.p)
    gamma /= np.sqrt(gamma @ H @ gamma)
    quad = quad_forms(d, gamma)
    positive = np.nonzero(quad > 0.0)[0]
    if positive.size == 0:
        raise NumericOverflow("every subject has zero projected variance")
    picks = rng.choice(positive, size=K, replace=positive.size < K)
    beta = np.zeros((K, d.q1))
    beta[:, 0] = np.log(quad[picks])
    return ModelParams(gamma=_fix_sign(gamma), beta=beta, alpha=np.zeros((K, d.q2)))


def spectral_init(d: Dataset, K: int, H: np.ndarray) -> ModelParams:
    """
    Deterministic start from the pencil (sum_i T_i S_i / 2, H)

    With H the pooled covariance that pencil is a multiple of H, so the leading eigenvector of
    the whitened dispersion sum_i T_i (H^{-1/2} S_i H^{-1/2} - I)^2 is used instead. Beta
    intercepts sit at the logs of evenly spaced quantiles of the projected variances.
    """
    root = _inverse_sqrt(H)
    A = np.einsum("i,ijk->jk", 0.5 * d.T, d.S)
    B = root @ A @ root
    eigenvalues, vectors = eigh((B + B.T) / 2.0)
    spread = (eigenvalues[-1] - eigenvalues[0]) / max(abs(eigenvalues[-1]), np.finfo(float).tiny)
    if spread > 1e-8:
        direction = vectors[:, 0]
    else:
        whitened = root @ d.S @ root - np.eye(d.p)
        dispersion = np.einsum("i,iab->ab", d.T, whitened @ whitened)
        _, dispersion_vectors = eigh((dispersion + dispersion.T) / 2.0)
        direction = dispersion_vectors[:, -1]
    gamma = root @ direction
    gamma /= np.sqrt(gamma @ H @ gamma)
    quad = quad_forms(d, gamma)
    if np.any(quad <= 0.0):
        raise NumericOverflow("spectral start has zero projected variance for some subject")
    beta = np.zeros((K, d.q1))
    beta[:, 0] = np.log(np.quantile(quad, (np.arange(K) + 0.5) / K))
    return ModelParams(gamma=_fix_sign(gamma), beta=beta, alpha=np.zeros((K, d.q2)))


def em_fit(
    d: Dataset,
    K: int,
    init: ModelParams,
    cfg: Optional[EmConfig] = None,
    fix_gamma: bool = False,
    restart_index: int = 0,
) -> FitResult:
    """
    EM for one projection: E-step, gating fit, expert Newton update, projection update

    Args:
        d: Dataset
        K: Number of clusters
        init: Starting parameters
        cfg: EM settings
        fix_gamma: Keep gamma at init.gamma (bootstrap replicates)
        restart_index: Recorded in the result

    Returns:
        FitResult; converged is False when cfg.max_iter was reached
    """
    cfg = cfg or EmConfig()
    if init.K != K:
        raise DimensionMismatch(f"initial parameters have K={init.K}, expected K={K}")
    _check_params(d, init)
    H = None if fix_gamma else constraint_matrix(d, cfg.h_matrix)

    params = init
    quad = quad_forms(d, params.gamma)
    eta, loglik = _posterior(d, params, quad)
    trace = [loglik]
    converged = False
    iteration = 0

    for iteration in range(1, cfg.max_iter + 1):
        heaviest = eta.max(axis=0)
        empty = np.nonzero(heaviest < cfg.empty_cluster_tol)[0]
        if empty.size:
            raise EmptyCluster(int(empty[0]) + 1)
        resp = Responsibilities.model_construct(eta=eta)

        alpha = fit_gating(resp, d, params.alpha, cfg)
        beta = update_beta_newton(resp, d, params.gamma, params.beta, cfg, quad=quad)
        gamma = params.gamma
        if H is not None:
            gamma, _ = update_gamma(gamma_matrix(resp, d, beta), H)
            quad = quad_forms(d, gamma)
        params = ModelParams(gamma=gamma, beta=beta, alpha=alpha)

        eta, new_loglik = _posterior(d, params, quad)
        trace.append(new_loglik)
        if new_loglik < loglik - 1e-8:
            logger.warning(f"EM log-likelihood decreased by {loglik - new_loglik:.3e} at iteration {iteration}")
        logger.debug(f"EM iteration {iteration}: loglik {new_loglik:.10g}")

        change = abs(new_loglik - loglik) / (1.0 + abs(loglik))
        loglik = new_loglik
        if change < cfg.tol:
            converged = True
            break

    if not converged:
        logger.warning(f"EM did not converge within {cfg.max_iter} iterations (K={K}, restart {restart_index})")

    resp = Responsibilities(eta=eta)
    return FitResult(
        params=params,
        resp=resp,
        labels=resp.labels,
        loglik=loglik,
        trace=trace,
        iterations=iteration,
        converged=converged,
        restart_index=restart_index,
        fixed_gamma=fix_gamma,
    )


def fit_with_restarts(
    d: Dataset,
    K: int,
    n_restarts: Optional[int] = None,
    seed: Optional[int] = None,
    cfg: Optional[EmConfig] = None,
) -> FitResult:
    """
    Best of several EM runs: n_restarts random starts plus one spectral start

    Restart r draws from the stream (seed, "restart", r); the spectral start has index
    n_restarts. The highest observed log-likelihood wins, ties going to the lower index.

    Args:
        d: Dataset
        K: Number of clusters
        n_restarts: Random starts (cfg.n_restarts when omitted)
        seed: Stream seed (cfg.seed when omitted)
        cfg: EM settings

    Returns:
        Best FitResult
    """
    cfg = cfg or EmConfig()
    n_restarts = cfg.n_restarts if n_restarts is None else n_restarts
    seed = cfg.seed if seed is None else seed
    if n_restarts < 1:
        raise InvalidInput("n_restarts must be at least 1")
    H = constraint_matrix(d, cfg.h_matrix)

    def make_job(index: int) -> Callable[[], FitResult]:
        def job() -> FitResult:
            if index < n_restarts:
                init = random_init(d, K, derive_rng(seed, "restart", index), H)
            else:
                init = spectral_init(d, K, H)
            return em_fit(d, K, init, cfg, restart_index=index)

        return job

    n_jobs = n_restarts + (1 if cfg.spectral_init else 0)
    jobs = [make_job(index) for index in range(n_jobs)]
    outcomes: list[object] = []

    def run(job: Callable[[], FitResult]) -> object:
        try:
            return job()
        except RestartableError as e:
            return e

    if cfg.threads > 1 and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
            futures = [executor.submit(run, job) for job in jobs]
            for future in tqdm(futures, desc=f"EM restarts (K={K})", disable=not cfg.progress):
                outcomes.append(future.result())
    else:
        for job in tqdm(jobs, desc=f"EM restarts (K={K})", disable=not cfg.progress):
            outcomes.append(run(job))

    best: Optional[FitResult] = None
    errors: list[str] = []
    for index, outcome in enumerate(outcomes):
        if isinstance(outcome, FitResult):
            if best is None or outcome.loglik > best.loglik:
                best = outcome
        else:
            message = f"restart {index}: {type(outcome).__name__}: {outcome}"
            errors.append(message)
            logger.warning(f"EM {message}")

    if best is None:
        raise AllRestartsFailed(errors)
    logger.debug(f"Best of {n_jobs} starts: restart {best.restart_index}, loglik {best.loglik:.10g}")
    return best
