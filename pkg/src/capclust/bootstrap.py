# src/capclust/bootstrap.py
"""
Nonparametric bootstrap for the expert and gating coefficients with every projection held at
its full-data estimate. Replicate clusters are matched to the full-data clusters by
coefficient distance before percentile intervals are formed.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from tqdm import tqdm

from .mixture import constraint_matrix, em_fit, random_init
from .models.config import EmConfig
from .models.structures import BootstrapReport, CoefficientInterval, ComponentSet, Dataset, ModelParams
from .utils.errors import BootstrapUnstable, CapclustError, DimensionMismatch, InvalidInput
from .utils.helpers import derive_rng, format_error_message, logger

Resampler = Callable[[np.random.Generator, int], np.ndarray]


def draw_with_replacement(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def align_to_reference(params: ModelParams, reference: ModelParams) -> ModelParams:
    """
    Relabel clusters to minimize sum_k ||beta_k - beta_ref_perm(k)||^2

    The gating coefficients follow the same permutation and are re-referenced to the aligned
    cluster 1.
    """
    cost = ((params.beta[:, None, :] - reference.beta[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    order = np.empty(params.K, dtype=int)
    order[cols] = rows
    return params.permuted(order)


def _replicate_fit(
    d: Dataset,
    start: ModelParams,
    reference: ModelParams,
    cfg: EmConfig,
    rng: np.random.Generator,
    restarts: int,
) -> ModelParams:
    K = reference.K
    best = em_fit(d, K, start, cfg, fix_gamma=True)
    if restarts:
        H = constraint_matrix(d, cfg.h_matrix)
        for restart in range(restarts):
            drawn = random_init(d, K, rng, H)
            drawn = ModelParams(gamma=start.gamma, beta=drawn.beta, alpha=drawn.alpha)
            try:
                candidate = em_fit(d, K, drawn, cfg, fix_gamma=True, restart_index=restart + 1)
            except CapclustError:
                continue
            if candidate.loglik > best.loglik:
                best = candidate
    return align_to_reference(best.params, reference)


def _interval(values: np.ndarray, level: float) -> tuple[float, float]:
    lower, upper = np.quantile(values, [level / 2.0, 1.0 - level / 2.0], method="linear")
    return float(lower), float(upper)


def bootstrap_inference(
    d: Dataset,
    cs: ComponentSet,
    B: int,
    level: float = 0.05,
    seed: int = 0,
    cfg: Optional[EmConfig] = None,
    contrasts: Optional[dict[str, list[float]]] = None,
    restarts_per_replicate: int = 0,
    resample: Resampler = draw_with_replacement,
) -> BootstrapReport:
    """
    Percentile bootstrap intervals for the coefficients of every accepted component

    Args:
        d: Dataset the components were extracted from
        cs: ComponentSet
        B: Number of replicates
        level: Significance level; intervals span the level/2 and 1 - level/2 quantiles
        seed: Replicate b resamples from the stream (seed, "bootstrap", b)
        cfg: EM settings (threads, progress, tolerances)
        contrasts: Named linear combinations c'beta reported per cluster
        restarts_per_replicate: Extra random starts per replicate besides the warm start
        resample: Draws the resampled subject positions

    Returns:
        BootstrapReport
    """
    cfg = cfg or EmConfig()
    contrasts = contrasts or {}
    if B < 2:
        raise InvalidInput("the bootstrap needs at least two replicates")
    if not 0.0 < level < 1.0:
        raise InvalidInput(f"level must lie in (0, 1), got {level}")
    for name, vector in contrasts.items():
        if len(vector) != d.q1:
            raise DimensionMismatch(f"contrast '{name}' has length {len(vector)}, expected q1={d.q1}")

    components = [(j, fit) for j, (fit, ok) in enumerate(zip(cs.fits, cs.accepted), start=1) if ok]
    if not components:
        raise InvalidInput("the component set has no accepted component")

    # point estimates: fixed-gamma EM on the full data from the component estimates
    starts = {j: fit.params for j, fit in components}
    points = {j: em_fit(d, cs.K, starts[j], cfg, fix_gamma=True).params for j, _ in components}

    def replicate(b: int) -> dict[int, object]:
        rng = derive_rng(seed, "bootstrap", b)
        indices = resample(rng, d.n)
        sample = d.subset(indices)
        outcome: dict[int, object] = {}
        for j, _ in components:
            try:
                outcome[j] = _replicate_fit(sample, starts[j], points[j], cfg, rng, restarts_per_replicate)
            except CapclustError as e:
                outcome[j] = f"replicate {b}, component {j}: {format_error_message(e)}"
        return outcome

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
            futures = [executor.submit(replicate, b) for b in range(B)]
            outcomes = [future.result() for future in tqdm(futures, desc="Bootstrap", disable=not cfg.progress)]
    else:
        outcomes = [replicate(b) for b in tqdm(range(B), desc="Bootstrap", disable=not cfg.progress)]

    rows: list[CoefficientInterval] = []
    successes: dict[int, int] = {}
    failures: list[str] = []
    for j, _ in components:
        draws = []
        for outcome in outcomes:
            result = outcome[j]
            if isinstance(result, ModelParams):
                draws.append(result)
            else:
                failures.append(str(result))
                logger.warning(f"Excluded bootstrap {result}")
        successes[j] = len(draws)
        if len(draws) < 0.5 * B:
            raise BootstrapUnstable(len(draws), B)

        point = points[j]
        betas = np.stack([p.beta for p in draws])
        alphas = np.stack([p.alpha for p in draws])
        for k in range(cs.K):
            for t, term in enumerate(d.x_names):
                lower, upper = _interval(betas[:, k, t], level)
                rows.append(
                    CoefficientInterval(
                        component=j,
                        cluster=k + 1,
                        parameter="beta",
                        term=term,
                        estimate=float(point.beta[k, t]),
                        lower=lower,
                        upper=upper,
                        successes=len(draws),
                    )
                )
            if k > 0:
                for t, term in enumerate(d.w_names):
                    lower, upper = _interval(alphas[:, k, t], level)
                    rows.append(
                        CoefficientInterval(
                            component=j,
                            cluster=k + 1,
                            parameter="alpha",
                            term=term,
                            estimate=float(point.alpha[k, t]),
                            lower=lower,
                            upper=upper,
                            successes=len(draws),
                        )
                    )
            for name, vector in contrasts.items():
                c = np.asarray(vector, dtype=float)
                lower, upper = _interval(betas[:, k, :] @ c, level)
                rows.append(
                    CoefficientInterval(
                        component=j,
                        cluster=k + 1,
                        parameter="contrast",
                        term=name,
                        estimate=float(point.beta[k] @ c),
                        lower=lower,
                        upper=upper,
                        successes=len(draws),
                    )
                )
        logger.info(f"Bootstrap component {j}: {len(draws)} of {B} replicates succeeded")

    return BootstrapReport(B=B, level=level, rows=rows, successes=successes, failures=failures)
