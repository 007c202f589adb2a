# src/capclust/pipeline.py
import json
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional, TypeVar

import numpy as np
import pandas as pd
from langgraph.graph import END, START, StateGraph
from pydantic import BaseModel, ValidationError
from tqdm import tqdm

from .metrics import (
    adjusted_rand_index,
    classification_error,
    coefficient_bias_mse,
    jaccard_index,
    match_components,
    projection_similarity,
    summarize_similarity,
)
from .models.config import BenchmarkConfig, RunConfig
from .models.structures import (
    ClusteringRow,
    CoefficientRow,
    ComponentSet,
    EvalSummary,
    SimGroundTruth,
)
from .nodes.replication import (
    ReplicationState,
    baselines_node,
    capclust_node,
    external_node,
    score_node,
    selection_node,
    simulate_node,
)
from .utils.errors import CapclustError, InvalidInput
from .utils.helpers import format_error_message, logger

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def _merge(defaults: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(
    config_path: Optional[str] = None,
    kind: type[ConfigT] = RunConfig,  # type: ignore[assignment]
    defaults: Optional[dict[str, Any]] = None,
) -> ConfigT:
    """
    Load configuration from a JSON file merged over the defaults

    Args:
        config_path: Path to a JSON configuration file
        kind: Configuration model (RunConfig, BenchmarkConfig, SimConfig)
        defaults: Overrides of the model defaults that the file may still replace

    Returns:
        Validated configuration
    """
    default_config = _merge(kind().model_dump(), defaults or {})
    if not config_path:
        return kind.model_validate(default_config)

    try:
        with open(config_path) as f:
            config = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidInput(f"{config_path}: invalid JSON ({e.msg})") from e
    if not isinstance(config, dict):
        raise InvalidInput(f"{config_path}: the configuration must be a JSON object")

    # Merge with default config to ensure all settings exist
    merged_config = _merge(default_config, config)
    try:
        return kind.model_validate(merged_config)
    except ValidationError as e:
        raise InvalidInput(f"{config_path}: {_first_error(e)}") from e


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    return f"{location}: {first['msg']}" if location else first["msg"]


def validate_config(config: dict[str, Any], kind: type[BaseModel] = RunConfig) -> tuple[bool, str]:
    """
    Validate a configuration dictionary

    Args:
        config: Configuration dictionary
        kind: Configuration model to validate against

    Returns:
        Tuple of (is_valid, error_message)
    """
    try:
        kind.model_validate(config)
    except ValidationError as e:
        return False, _first_error(e)
    return True, ""


def build_replication_graph() -> Any:
    """
    Build the per-replication benchmark graph

    Returns:
        Compiled langgraph graph
    """
    graph = StateGraph(ReplicationState)

    graph.add_node("simulate", simulate_node)
    graph.add_node("capclust", capclust_node)
    graph.add_node("baselines", baselines_node)
    graph.add_node("external", external_node)
    graph.add_node("selection", selection_node)
    graph.add_node("score", score_node)

    graph.add_edge(START, "simulate")
    graph.add_edge("simulate", "capclust")
    graph.add_edge("capclust", "baselines")
    graph.add_edge("baselines", "external")
    graph.add_edge("external", "selection")
    graph.add_edge("selection", "score")
    graph.add_edge("score", END)

    return graph.compile()


class BenchmarkResult(BaseModel):
    """Per-replication rows of a Monte-Carlo study"""

    replications: int
    completed: int = 0
    similarity: list[dict[str, Any]] = []
    coefficients: list[dict[str, Any]] = []
    clustering: list[dict[str, Any]] = []
    selection: list[dict[str, Any]] = []
    failures: list[str] = []
    notes: list[str] = []


def run_replication(cfg: BenchmarkConfig, index: int, graph: Any = None) -> dict[str, Any]:
    """Run one replication; domain errors are returned under 'error' instead of raised"""
    graph = graph or build_replication_graph()
    try:
        return graph.invoke({"benchmark": cfg, "index": index})
    except CapclustError as e:
        return {"index": index, "error": format_error_message(e)}


def run_benchmark(cfg: BenchmarkConfig, progress: bool = False) -> BenchmarkResult:
    """
    Run cfg.replications replications of simulate, fit every method and score

    Replications run in a thread pool of cfg.threads workers; results are collected in
    replication order. Failed replications are logged, counted and excluded.
    """
    graph = build_replication_graph()
    indices = range(cfg.replications)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
            futures = [executor.submit(run_replication, cfg, index, graph) for index in indices]
            states = [future.result() for future in tqdm(futures, desc="Replications", disable=not progress)]
    else:
        states = [run_replication(cfg, index, graph) for index in tqdm(indices, desc="Replications", disable=not progress)]

    result = BenchmarkResult(replications=cfg.replications)
    for state in states:
        index = state["index"]
        if "error" in state:
            result.failures.append(f"replication {index}: {state['error']}")
            logger.warning(f"Replication {index} excluded: {state['error']}")
            continue
        result.completed += 1
        result.similarity.extend(state.get("similarity", []))
        result.coefficients.extend(state.get("coefficients", []))
        result.clustering.extend(state.get("clustering", []))
        result.notes.extend(f"replication {index}: {note}" for note in state.get("notes", []))
        if cfg.select_k is not None:
            result.selection.append({"replication": index, "chosen_K": state.get("chosen_K")})

    logger.info(f"Benchmark finished: {result.completed} of {cfg.replications} replications completed")
    return result


def _mean_se(values: pd.Series) -> tuple[float, float]:
    array = values.to_numpy(dtype=float)
    se = float(array.std(ddof=1) / np.sqrt(array.size)) if array.size > 1 else 0.0
    return float(array.mean()), se


def summarize(result: BenchmarkResult) -> EvalSummary:
    """Average the per-replication rows into recovery and clustering-accuracy summaries"""
    summary = EvalSummary()

    similarity = pd.DataFrame(result.similarity, columns=["replication", "dim", "similarity"])
    for dim, group in similarity.groupby("dim"):
        summary.similarity.append(summarize_similarity(group["similarity"].tolist(), int(dim)))

    coefficients = pd.DataFrame(result.coefficients, columns=["replication", "dim", "cluster", "bias", "mse", "n"])
    for (dim, cluster), group in coefficients.groupby(["dim", "cluster"]):
        summary.coefficients.append(
            CoefficientRow(
                dim=int(dim),
                cluster=int(cluster),
                bias=float(group["bias"].mean()),
                mse=float(group["mse"].mean()),
                n=len(group),
            )
        )

    clustering = pd.DataFrame(result.clustering, columns=["replication", "method", "dim", "jaccard", "ari", "error"])
    for (method, dim), group in clustering.groupby(["method", "dim"], sort=False):
        jaccard, jaccard_se = _mean_se(group["jaccard"])
        ari, ari_se = _mean_se(group["ari"])
        error, error_se = _mean_se(group["error"])
        summary.clustering.append(
            ClusteringRow(
                method=str(method),
                dim=int(dim),
                jaccard=jaccard,
                ari=ari,
                error=error,
                n=len(group),
                jaccard_se=jaccard_se,
                ari_se=ari_se,
                error_se=error_se,
            )
        )
    return summary


def recovery_frame(summary: EvalSummary) -> pd.DataFrame:
    """Long-format recovery table: similarity per dim, bias and MSE per dim and cluster"""
    rows: list[dict[str, Any]] = [
        {"dim": row.dim, "quantity": "similarity", "cluster": None, "value": row.mean, "se": row.se, "n": row.n}
        for row in summary.similarity
    ]
    for row in summary.coefficients:
        rows.append({"dim": row.dim, "quantity": "bias", "cluster": row.cluster, "value": row.bias, "se": None, "n": row.n})
        rows.append({"dim": row.dim, "quantity": "mse", "cluster": row.cluster, "value": row.mse, "se": None, "n": row.n})
    frame = pd.DataFrame(rows, columns=["dim", "quantity", "cluster", "value", "se", "n"])
    frame["cluster"] = frame["cluster"].astype("Int64")
    return frame


def clustering_frame(summary: EvalSummary) -> pd.DataFrame:
    columns = ["method", "dim", "jaccard", "jaccard_se", "ari", "ari_se", "error", "error_se", "n"]
    return pd.DataFrame([row.model_dump() for row in summary.clustering], columns=columns)


def selection_frame(result: BenchmarkResult) -> pd.DataFrame:
    """Frequency of every chosen K (failed selections appear as an empty K)"""
    chosen = pd.Series([row["chosen_K"] for row in result.selection], dtype="Int64")
    counts = chosen.value_counts(dropna=False).sort_index()
    total = max(len(chosen), 1)
    return pd.DataFrame({"K": counts.index, "count": counts.to_numpy(), "frequency": counts.to_numpy() / total})


def evaluate_fit(
    cs: ComponentSet,
    truth: SimGroundTruth,
    extra_labels: Optional[dict[str, dict[int, np.ndarray]]] = None,
) -> EvalSummary:
    """
    Score one component set (and optional externally produced labels) against the truth

    Args:
        cs: Fitted components
        truth: Ground truth of the simulated dataset
        extra_labels: method -> structured dim -> labels

    Returns:
        EvalSummary with n = 1 rows
    """
    fits = cs.accepted_fits or cs.fits
    matched = {dim: fits[j] for dim, j in match_components([f.params.gamma for f in fits], truth).items()}
    summary = EvalSummary()
    labels: dict[str, dict[int, np.ndarray]] = {"capclust": {dim: fit.labels for dim, fit in matched.items()}}
    labels.update(extra_labels or {})
    for dim, fit in sorted(matched.items()):
        value = projection_similarity(fit.params.gamma, truth.projection(dim))
        summary.similarity.append(summarize_similarity([value], dim))
        if fit.params.K == len(truth.beta_for(dim)):
            summary.coefficients.extend(coefficient_bias_mse([fit], truth, dim))
    for method, per_dim in labels.items():
        for dim, predicted in sorted(per_dim.items()):
            reference = truth.memberships[dim]
            summary.clustering.append(
                ClusteringRow(
                    method=method,
                    dim=dim,
                    jaccard=jaccard_index(predicted, reference),
                    ari=adjusted_rand_index(predicted, reference),
                    error=classification_error(predicted, reference),
                    n=1,
                )
            )
    return summary

