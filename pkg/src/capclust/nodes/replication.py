# src/capclust/nodes/replication.py
from typing import Any, Optional, TypedDict

import numpy as np

from ..baselines import (
    fisher_z_features,
    hierarchical,
    kmeans,
    log_projected_features,
    run_external_clusterer,
)
from ..components import extract_components
from ..metrics import (
    adjusted_rand_index,
    classification_error,
    coefficient_bias_mse,
    jaccard_index,
    match_components,
    projection_similarity,
)
from ..models.config import BenchmarkConfig, EmConfig
from ..models.structures import ComponentSet, Dataset, FeatureMatrix, FitResult, SimGroundTruth
from ..selection import select_num_clusters
from ..simgen import generate_dataset
from ..utils.errors import CapclustError, ExternalMethodFailed
from ..utils.helpers import derive_seed, format_error_message, logger


class ReplicationState(TypedDict, total=False):
    benchmark: BenchmarkConfig
    index: int
    seed: int
    dataset: Dataset
    truth: SimGroundTruth
    components: ComponentSet
    matched: dict[int, FitResult]
    labels: dict[str, dict[int, np.ndarray]]
    chosen_K: Optional[int]
    notes: list[str]
    similarity: list[dict[str, Any]]
    coefficients: list[dict[str, Any]]
    clustering: list[dict[str, Any]]


def _em_config(state: ReplicationState) -> EmConfig:
    cfg = state["benchmark"]
    threads = 1 if cfg.threads > 1 else cfg.em.threads
    return cfg.em.model_copy(update={"seed": state["seed"], "threads": threads, "progress": False})


def _r_max(state: ReplicationState) -> int:
    cfg = state["benchmark"]
    r_max = cfg.max_components or len(cfg.sim.structured_dims)
    return min(r_max, state["dataset"].p - 1)


def simulate_node(state: ReplicationState) -> dict[str, Any]:
    """Draw the replication's dataset from its own seed"""
    cfg = state["benchmark"]
    seed = derive_seed(cfg.seed, "replication", state["index"])
    dataset, truth = generate_dataset(cfg.sim.model_copy(update={"seed": seed}))
    return {"seed": seed, "dataset": dataset, "truth": truth, "labels": {}, "notes": []}


def capclust_node(state: ReplicationState) -> dict[str, Any]:
    """
    Extract components and pair them with the structured dimensions

    Args:
        state: Replication state holding the dataset and truth

    Returns:
        Component set, the fit matched to every structured dimension and its labels
    """
    cfg = state["benchmark"]
    if "capclust" not in cfg.methods:
        return {}
    components = extract_components(state["dataset"], cfg.sim.K, _r_max(state), _em_config(state))
    fits = components.accepted_fits or components.fits
    gammas = [fit.params.gamma for fit in fits]
    matched = {dim: fits[j] for dim, j in match_components(gammas, state["truth"]).items()}
    labels = {**state["labels"], "capclust": {dim: fit.labels for dim, fit in matched.items()}}
    notes = state["notes"] + components.errors
    return {"components": components, "matched": matched, "labels": labels, "notes": notes}


def baselines_node(state: ReplicationState) -> dict[str, Any]:
    """K-means and hierarchical clustering on Fisher-z and log projected variance features"""
    cfg = state["benchmark"]
    methods = [m for m in cfg.methods if m != "capclust"]
    if not methods:
        return {}
    dataset, truth = state["dataset"], state["truth"]
    K = cfg.sim.K
    dims = truth.structured_dims
    kmeans_seed = derive_seed(state["seed"], "kmeans")

    lowtri: Optional[FeatureMatrix] = None
    if any(m.endswith("lowtri") for m in methods):
        lowtri = fisher_z_features(dataset)
    log_features = {dim: log_projected_features(dataset, truth.projection(dim)) for dim in dims}

    labels = dict(state["labels"])
    for method in methods:
        if method == "kmeans_lowtri":
            assert lowtri is not None
            shared = kmeans(lowtri, K, kmeans_seed, cfg.kmeans_n_init)
            labels[method] = {dim: shared for dim in dims}
        elif method == "hierarchical_lowtri":
            assert lowtri is not None
            shared = hierarchical(lowtri, K, cfg.linkage)
            labels[method] = {dim: shared for dim in dims}
        elif method == "kmeans_log":
            labels[method] = {dim: kmeans(log_features[dim], K, kmeans_seed, cfg.kmeans_n_init) for dim in dims}
        elif method == "hierarchical_log":
            labels[method] = {dim: hierarchical(log_features[dim], K, cfg.linkage) for dim in dims}
    return {"labels": labels}


def external_node(state: ReplicationState) -> dict[str, Any]:
    cfg = state["benchmark"]
    if not cfg.external_commands:
        return {}
    features = fisher_z_features(state["dataset"])
    dims = state["truth"].structured_dims
    labels = dict(state["labels"])
    notes = list(state["notes"])
    for name, command in cfg.external_commands.items():
        try:
            result = run_external_clusterer(command, features, cfg.sim.K)
        except ExternalMethodFailed as e:
            notes.append(f"{name}: {e}")
            logger.warning(f"Replication {state['index']}: external method {name} failed: {e}")
            continue
        labels[name] = {dim: result for dim in dims}
    return {"labels": labels, "notes": notes}


def selection_node(state: ReplicationState) -> dict[str, Any]:
    """Average-BIC choice of K over the configured range"""
    cfg = state["benchmark"]
    if cfg.select_k is None:
        return {}
    try:
        report = select_num_clusters(state["dataset"], cfg.select_k, _em_config(state), _r_max(state))
    except CapclustError as e:
        message = f"selection: {format_error_message(e)}"
        logger.warning(f"Replication {state['index']}: {message}")
        return {"chosen_K": None, "notes": state["notes"] + [message]}
    return {"chosen_K": report.chosen_K}


def score_node(state: ReplicationState) -> dict[str, Any]:
    """Similarity, coefficient error and clustering agreement rows for this replication"""
    truth = state["truth"]
    index = state["index"]
    matched = state.get("matched", {})

    similarity = [
        {"replication": index, "dim": dim, "similarity": projection_similarity(fit.params.gamma, truth.projection(dim))}
        for dim, fit in sorted(matched.items())
    ]
    coefficients = [
        {"replication": index, **row.model_dump()}
        for dim, fit in sorted(matched.items())
        if fit.params.K == len(truth.beta_for(dim))
        for row in coefficient_bias_mse([fit], truth, dim)
    ]
    clustering = []
    for method, per_dim in state["labels"].items():
        for dim, labels in sorted(per_dim.items()):
            reference = truth.memberships[dim]
            clustering.append(
                {
                    "replication": index,
                    "method": method,
                    "dim": dim,
                    "jaccard": jaccard_index(labels, reference),
                    "ari": adjusted_rand_index(labels, reference),
                    "error": classification_error(labels, reference),
                }
            )
    return {"similarity": similarity, "coefficients": coefficients, "clustering": clustering}
