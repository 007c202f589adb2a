from .replication import (
    ReplicationState,
    baselines_node,
    capclust_node,
    external_node,
    score_node,
    selection_node,
    simulate_node,
)

__all__ = [
    "ReplicationState",
    "baselines_node",
    "capclust_node",
    "external_node",
    "score_node",
    "selection_node",
    "simulate_node",
]
