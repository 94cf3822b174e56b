"""Sample-quality metrics and pipeline comparison reports."""

from agd.evaluation.distances import energy_distance, knn_precision_recall
from agd.evaluation.reports import (
    EvalReport,
    endpoint_mse,
    guidance_sweep,
    scheduler_transfer,
)

__all__ = [
    "energy_distance",
    "knn_precision_recall",
    "EvalReport",
    "endpoint_mse",
    "guidance_sweep",
    "scheduler_transfer",
]
