from typing import Optional


class CapclustError(Exception):
    """Base class for every domain error raised by capclust"""


class InvalidInput(CapclustError, ValueError):
    """Malformed input file or argument"""


class DimensionMismatch(CapclustError, ValueError):
    """Array shapes disagree with the dataset or model dimensions"""


class DuplicateSubject(InvalidInput):
    def __init__(self, subject_id: str, source: str = "") -> None:
        self.subject_id = subject_id
        where = f" in {source}" if source else ""
        super().__init__(f"Duplicate subject id '{subject_id}'{where}")


class MissingCovariates(CapclustError):
    def __init__(self, subject_id: str) -> None:
        self.subject_id = subject_id
        super().__init__(f"MissingCovariates({subject_id}): no covariate row for subject '{subject_id}'")


class ZeroVariance(CapclustError):
    def __init__(self, subject_id: str, column: int) -> None:
        self.subject_id = subject_id
        self.column = column
        super().__init__(f"ZeroVariance: column {column} of subject '{subject_id}' is constant")


class SingularPooled(CapclustError):
    """The constraint matrix H is not positive definite"""


class RawDataRequired(CapclustError):
    """Operation needs raw observations but the dataset holds covariances only"""


class RestartableError(CapclustError):
    """Aborts one EM run; another initialization may still succeed"""


class NumericOverflow(RestartableError):
    """A density or log-likelihood evaluated to a non-finite value"""


class DegenerateResponsibility(RestartableError):
    def __init__(self, row: int) -> None:
        self.row = row
        super().__init__(f"DegenerateResponsibility({row}): every cluster has zero weight")


class GatingDiverged(RestartableError):
    """The weighted multinomial logistic fit did not converge"""


class EmptyCluster(RestartableError):
    def __init__(self, cluster: int) -> None:
        self.cluster = cluster
        super().__init__(f"EmptyCluster({cluster}): cluster carries no responsibility mass")


class AllRestartsFailed(CapclustError):
    def __init__(self, errors: list[str]) -> None:
        self.errors = errors
        detail = "; ".join(errors)
        super().__init__(f"AllRestartsFailed: {len(errors)} restarts failed ({detail})")


class NoComplementLeft(CapclustError):
    """Deflation requested for r >= p projections"""


class DegenerateProjections(CapclustError):
    """The projections to deflate are linearly dependent"""


class DfDSingular(CapclustError):
    def __init__(self, subject: int) -> None:
        self.subject = subject
        super().__init__(f"DfDSingular({subject}): projected covariance is numerically singular")


class NoAcceptedComponents(CapclustError):
    """No component passed the DfD rule for any candidate cluster count"""


class BootstrapUnstable(CapclustError):
    def __init__(self, successes: int, replicates: int) -> None:
        self.successes = successes
        self.replicates = replicates
        super().__init__(f"BootstrapUnstable: only {successes} of {replicates} replicates succeeded")


class PermutationLimit(CapclustError):
    def __init__(self, n_labels: int, limit: Optional[int] = None) -> None:
        self.n_labels = n_labels
        suffix = f" (limit {limit})" if limit is not None else ""
        super().__init__(f"PermutationLimit: {n_labels} labels{suffix}")


class ExternalMethodFailed(CapclustError):
    """The external clusterer command failed or produced unusable labels"""
