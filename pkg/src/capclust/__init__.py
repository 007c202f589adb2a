from .bootstrap import bootstrap_inference
from .components import extract_components, select_num_components
from .dataset import center_scale, load_any, load_dataset
from .mixture import e_step, em_fit, fit_with_restarts, observed_loglik
from .pipeline import build_replication_graph, load_config, run_benchmark, summarize
from .selection import select_num_clusters
from .simgen import generate_dataset

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "bootstrap_inference",
    "build_replication_graph",
    "center_scale",
    "e_step",
    "em_fit",
    "extract_components",
    "fit_with_restarts",
    "generate_dataset",
    "load_any",
    "load_config",
    "load_dataset",
    "observed_loglik",
    "run_benchmark",
    "select_num_clusters",
    "select_num_components",
    "summarize",
]
