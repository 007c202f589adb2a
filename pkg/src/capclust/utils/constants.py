import math

LOG_2PI: float = math.log(2.0 * math.pi)

DEFAULT_TOL: float = 1e-6
DEFAULT_MAX_ITER: int = 500
DEFAULT_N_RESTARTS: int = 10
DEFAULT_NEWTON_MAX_ITER: int = 50
DEFAULT_NEWTON_TOL: float = 1e-8
DEFAULT_GATING_MAX_ITER: int = 100
DEFAULT_GATING_TOL: float = 1e-8
DEFAULT_RIDGE: float = 1e-8
DEFAULT_MAX_HALVINGS: int = 30
DEFAULT_EMPTY_CLUSTER_TOL: float = 1e-6
DEFAULT_DFD_THRESHOLD: float = 2.0

# smallest eigenvalue of H must exceed this times trace(H)/p
PD_RELATIVE_TOL: float = 1e-10
RESPONSIBILITY_FLOOR: float = 1e-300
FISHER_Z_CLAMP: float = 1.0 - 1e-12
MAX_PERMUTATION_LABELS: int = 8
EIGENVECTOR_MATCH_THRESHOLD: float = 0.5

LOGGER_NAME: str = "capclust"
ENV_THREADS: str = "CAPCLUST_THREADS"
ENV_LOG_LEVEL: str = "CAPCLUST_LOG_LEVEL"
