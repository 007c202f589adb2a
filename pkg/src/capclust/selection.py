# src/capclust/selection.py
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .components import extract_components
from .models.config import EmConfig
from .models.structures import BicReport, ComponentSet, Dataset, FitResult
from .utils.errors import InvalidInput, NoAcceptedComponents
from .utils.helpers import logger


def parameter_count(K: int, q1: int, q2: int, p: int) -> int:
    """M = K q1 + (K - 1) q2 + p"""
    return K * q1 + (K - 1) * q2 + p


def bic(fit: FitResult, d: Dataset) -> float:
    """
    Bayesian information criterion of one component fit

    Args:
        fit: Fitted component
        d: Dataset the fit was computed on

    Returns:
        M log(sum_i T_i) - 2 loglik
    """
    M = parameter_count(fit.params.K, d.q1, d.q2, d.p)
    return M * float(np.log(d.total_T)) - 2.0 * fit.loglik


def bic_report(component_sets: dict[int, ComponentSet], d: Dataset) -> BicReport:
    """Average BIC over accepted components per K; the smallest average wins, ties to the smaller K"""
    per_component: dict[int, list[float]] = {}
    average: dict[int, float] = {}
    warnings: list[str] = []
    for K in sorted(component_sets):
        fits = component_sets[K].accepted_fits
        if not fits:
            message = f"K={K} skipped: no accepted components"
            warnings.append(message)
            logger.warning(message)
            continue
        per_component[K] = [bic(fit, d) for fit in fits]
        average[K] = float(np.mean(per_component[K]))

    if not average:
        raise NoAcceptedComponents("no candidate K produced an accepted component")
    chosen = min(average, key=lambda K: (average[K], K))
    logger.info(f"Average BIC selects K={chosen}")
    return BicReport(per_component=per_component, average=average, chosen_K=chosen, warnings=warnings)


def select_num_clusters(
    d: Dataset,
    k_range: tuple[int, int],
    cfg: Optional[EmConfig] = None,
    r_max: Optional[int] = None,
    component_sets: Optional[dict[int, ComponentSet]] = None,
) -> BicReport:
    """
    Choose K by the average BIC over accepted components, rerunning extraction per K

    Args:
        d: Dataset
        k_range: Inclusive (k_min, k_max)
        cfg: EM settings; candidate K values run in parallel when cfg.threads > 1
        r_max: Maximum components per K (cfg.max_components when omitted)
        component_sets: Optional dict that receives the ComponentSet of every K

    Returns:
        BicReport
    """
    cfg = cfg or EmConfig()
    k_min, k_max = k_range
    if k_min < 1 or k_max < k_min or k_max > d.n:
        raise InvalidInput(f"K range must satisfy 1 <= k_min <= k_max <= n={d.n}, got {k_range}")
    r_max = min(cfg.max_components if r_max is None else r_max, d.p - 1)
    candidates = list(range(k_min, k_max + 1))

    if cfg.threads > 1 and len(candidates) > 1:
        inner = cfg.model_copy(update={"threads": 1, "progress": False})
        with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
            futures = [executor.submit(extract_components, d, K, r_max, inner) for K in candidates]
            results = [future.result() for future in futures]
    else:
        results = [extract_components(d, K, r_max, cfg) for K in candidates]

    sets = dict(zip(candidates, results))
    if component_sets is not None:
        component_sets.update(sets)
    return bic_report(sets, d)
