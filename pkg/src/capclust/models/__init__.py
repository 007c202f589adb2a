from .config import ALL_METHODS, BenchmarkConfig, EmConfig, RunConfig, SimConfig
from .structures import (
    BicReport,
    BootstrapReport,
    ClusteringRow,
    CoefficientInterval,
    CoefficientRow,
    ComponentSet,
    Dataset,
    EvalSummary,
    FeatureMatrix,
    FitResult,
    ModelParams,
    Responsibilities,
    RunManifest,
    SimGroundTruth,
    SimilarityRow,
    SubjectRecord,
)

__all__ = [
    "ALL_METHODS",
    "BenchmarkConfig",
    "BicReport",
    "BootstrapReport",
    "ClusteringRow",
    "CoefficientInterval",
    "CoefficientRow",
    "ComponentSet",
    "Dataset",
    "EmConfig",
    "EvalSummary",
    "FeatureMatrix",
    "FitResult",
    "ModelParams",
    "Responsibilities",
    "RunConfig",
    "RunManifest",
    "SimConfig",
    "SimGroundTruth",
    "SimilarityRow",
    "SubjectRecord",
]
