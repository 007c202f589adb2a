# src/capclust/components.py
"""
Higher-order components: deflation onto the orthogonal complement of the identified
projections, deviation from diagonality (DfD) and the DfD stopping rule.
"""

from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import qr

from .mixture import constraint_matrix, fit_with_restarts, observed_loglik
from .models.config import EmConfig
from .models.structures import ComponentSet, Dataset, FitResult, ModelParams, SubjectRecord
from .utils.errors import (
    CapclustError,
    DegenerateProjections,
    DfDSingular,
    InvalidInput,
    NoComplementLeft,
    RawDataRequired,
)
from .utils.helpers import derive_seed, format_error_message, logger


def _as_columns(Gamma: Sequence[np.ndarray]) -> np.ndarray:
    if len(Gamma) == 0:
        raise InvalidInput("at least one projection is required")
    return np.column_stack([np.asarray(g, dtype=float) for g in Gamma])


def orthonormal_basis(Gamma: Sequence[np.ndarray]) -> np.ndarray:
    """Euclidean-orthonormal basis of span(Gamma); raises if the columns are dependent"""
    G = _as_columns(Gamma)
    basis, R = qr(G, mode="economic")
    diagonal = np.abs(np.diag(R))
    if diagonal.min() <= 1e-10 * max(diagonal.max(), np.finfo(float).tiny):
        raise DegenerateProjections(f"the {G.shape[1]} projections are linearly dependent")
    return basis


def complement_basis(Gamma: Sequence[np.ndarray]) -> np.ndarray:
    """Orthonormal p x (p - r) basis of the orthogonal complement of span(Gamma)"""
    G = _as_columns(Gamma)
    p, r = G.shape
    if r >= p:
        raise NoComplementLeft(f"{r} projections leave no complement in p={p} dimensions")
    basis = orthonormal_basis(Gamma)
    full, _ = qr(basis, mode="full")
    return full[:, r:]


def project_out(Y: np.ndarray, Gamma: Sequence[np.ndarray]) -> np.ndarray:
    """Y - Y G G' with G the orthonormalized projections"""
    G = orthonormal_basis(Gamma)
    return Y - (Y @ G) @ G.T


def deflate(d: Dataset, Gamma: Sequence[np.ndarray]) -> tuple[Dataset, np.ndarray]:
    """
    Remove identified projections and reduce to the complement coordinates

    Args:
        d: Dataset with raw observations
        Gamma: Identified projections in original coordinates

    Returns:
        (reduced dataset with observations Y Q, complement basis Q)
    """
    if not d.has_raw:
        raise RawDataRequired("deflation needs raw observations")
    Q = complement_basis(Gamma)
    subjects = []
    for subject in d.subjects:
        assert subject.Y is not None
        subjects.append(SubjectRecord.from_observations(subject.id, subject.Y @ Q, subject.x, subject.w))
    return Dataset(subjects=subjects, x_names=list(d.x_names), w_names=list(d.w_names)), Q


def dfd(Gamma: Sequence[np.ndarray], d: Dataset) -> float:
    """
    Deviation from diagonality of the projected covariances

    prod_i [det(diag(G'S_i G)) / det(G'S_i G)]^(T_i / sum T), evaluated in the log domain.

    Args:
        Gamma: r projections
        d: Dataset

    Returns:
        DfD value, exactly 1 when r = 1
    """
    G = _as_columns(Gamma)
    if G.shape[1] == 1:
        return 1.0
    projected = np.einsum("ja,ijk,kb->iab", G, d.S, G)
    projected = (projected + np.swapaxes(projected, 1, 2)) / 2.0
    weights = d.T / d.total_T
    log_ratio = np.empty(d.n)
    for i, P in enumerate(projected):
        diagonal = np.diag(P)
        if np.any(diagonal <= 0.0):
            raise DfDSingular(i)
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError as e:
            raise DfDSingular(i) from e
        log_ratio[i] = np.sum(np.log(diagonal)) - 2.0 * np.sum(np.log(np.diag(L)))
    return float(np.exp(weights @ log_ratio))


def _to_original_space(d: Dataset, fit: FitResult, Q: np.ndarray, H0: np.ndarray) -> FitResult:
    """Express a fit from reduced coordinates with gamma = c Q gamma_reduced and gamma'H0 gamma = 1"""
    direction = Q @ fit.params.gamma
    scale = 1.0 / np.sqrt(direction @ H0 @ direction)
    gamma = scale * direction
    if gamma[np.argmax(np.abs(gamma))] < 0:
        gamma = -gamma
    beta = fit.params.beta.copy()
    beta[:, 0] += 2.0 * np.log(scale)
    params = ModelParams(gamma=gamma, beta=beta, alpha=fit.params.alpha.copy())
    loglik = observed_loglik(d, params)
    shift = loglik - fit.loglik
    return fit.model_copy(update={"params": params, "loglik": loglik, "trace": [v + shift for v in fit.trace]})


def extract_components(d: Dataset, K: int, r_max: int, cfg: Optional[EmConfig] = None) -> ComponentSet:
    """
    Sequentially fit projections, deflating after each accepted one

    Component 1 uses cfg.seed; component j > 1 draws its restarts from (seed, "component", j).
    Extraction stops after r_max components or at the first component whose DfD exceeds
    cfg.dfd_threshold (kept in the set but marked rejected).

    Args:
        d: Dataset
        K: Number of clusters, shared by every component
        r_max: Maximum number of components
        cfg: EM settings

    Returns:
        ComponentSet in original coordinates
    """
    cfg = cfg or EmConfig()
    if r_max < 1 or r_max > d.p - 1:
        raise InvalidInput(f"r_max must lie in [1, {d.p - 1}], got {r_max}")
    if r_max > 1 and not d.has_raw:
        raise RawDataRequired("extracting more than one component needs raw observations")

    H0 = constraint_matrix(d, cfg.h_matrix)
    components = ComponentSet(K=K, dfd_threshold=cfg.dfd_threshold)
    current, Q = d, None
    for j in range(1, r_max + 1):
        seed = cfg.seed if j == 1 else derive_seed(cfg.seed, "component", j)
        try:
            fit = fit_with_restarts(current, K, cfg.n_restarts, seed, cfg)
        except CapclustError as e:
            message = f"component {j}: {format_error_message(e)}"
            components.errors.append(message)
            logger.warning(f"Component extraction stopped at {message}")
            break

        if Q is not None:
            fit = _to_original_space(d, fit, Q, H0)
        components.gammas.append(fit.params.gamma)
        components.fits.append(fit)

        value = dfd(components.gammas, d)
        accepted = value <= cfg.dfd_threshold
        components.dfd_trace.append(value)
        components.accepted.append(accepted)
        status = "accepted" if accepted else "rejected"
        logger.info(f"Component {j} (K={K}) {status}: DfD {value:.4f}, loglik {fit.loglik:.6g}")
        if not accepted:
            break
        if j < r_max:
            current, Q = deflate(d, components.gammas)
    return components


def select_num_components(cs: ComponentSet, threshold: float = 2.0) -> int:
    """Largest r with DfD(Gamma^(r)) <= threshold"""
    if not cs.dfd_trace:
        raise InvalidInput("the component set has no DfD values")
    qualifying = [r for r, value in enumerate(cs.dfd_trace, start=1) if value <= threshold]
    return max(qualifying) if qualifying else 0


def components_payload(cs: ComponentSet) -> dict:
    """JSON document of a component set: per component gamma, dfd, acceptance and fit"""
    return {
        "K": cs.K,
        "dfd_threshold": cs.dfd_threshold,
        "errors": cs.errors,
        "components": [
            {
                "component": j,
                "gamma": gamma.tolist(),
                "dfd": value,
                "accepted": accepted,
                "summary": fit.summary(),
                "fit": fit.model_dump(mode="json"),
            }
            for j, (gamma, value, accepted, fit) in enumerate(
                zip(cs.gammas, cs.dfd_trace, cs.accepted, cs.fits), start=1
            )
        ],
    }


def components_from_payload(payload: dict) -> ComponentSet:
    entries = payload["components"]
    return ComponentSet(
        K=payload["K"],
        dfd_threshold=payload["dfd_threshold"],
        errors=payload.get("errors", []),
        gammas=[np.asarray(entry["gamma"], dtype=float) for entry in entries],
        fits=[FitResult.model_validate(entry["fit"]) for entry in entries],
        dfd_trace=[entry["dfd"] for entry in entries],
        accepted=[entry["accepted"] for entry in entries],
    )


def dfd_frame(cs: ComponentSet) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "component": np.arange(1, cs.r + 1),
            "dfd": cs.dfd_trace,
            "accepted": cs.accepted,
        }
    )


def loadings_frame(cs: ComponentSet) -> pd.DataFrame:
    rows = [
        {"component": j, "variable": v + 1, "loading": value}
        for j, gamma in enumerate(cs.gammas, start=1)
        for v, value in enumerate(gamma)
    ]
    return pd.DataFrame(rows, columns=["component", "variable", "loading"])


def labels_frame(cs: ComponentSet, d: Dataset) -> pd.DataFrame:
    """Hard labels (1-based clusters) with the maximal responsibility, per subject and component"""
    rows = []
    for j, fit in enumerate(cs.fits, start=1):
        strength = fit.resp.eta.max(axis=1)
        for i, subject_id in enumerate(d.ids):
            rows.append(
                {
                    "subject": subject_id,
                    "component": j,
                    "cluster": int(fit.labels[i]) + 1,
                    "responsibility": float(strength[i]),
                }
            )
    return pd.DataFrame(rows, columns=["subject", "component", "cluster", "responsibility"])


def polar_frame(cs: ComponentSet, d: Dataset) -> pd.DataFrame:
    """
    Polar coordinates for cluster plots

    Subjects are ordered by cluster then id around the circle; the radius is the log
    projected variance log(gamma' S_i gamma).
    """
    rows = []
    for j, (gamma, fit) in enumerate(zip(cs.gammas, cs.fits), start=1):
        radius = np.log(np.einsum("j,ijk,k->i", gamma, d.S, gamma))
        order = sorted(range(d.n), key=lambda i: (int(fit.labels[i]), d.ids[i]))
        for position, i in enumerate(order):
            rows.append(
                {
                    "subject": d.ids[i],
                    "component": j,
                    "cluster": int(fit.labels[i]) + 1,
                    "angle": 2.0 * np.pi * position / d.n,
                    "radius": float(radius[i]),
                }
            )
    return pd.DataFrame(rows, columns=["subject", "component", "cluster", "angle", "radius"])
