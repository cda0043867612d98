from .benchmark import BenchmarkScenario, ScenarioError, evaluate_state, run_benchmark, strip_labels
from .metrics import (
    REPORT_SCHEMA, ConfusionMatrix, MetricsReport, accuracy, quadratic_weighted_kappa, render_table,
    report_from_predictions, write_reports,
)
from .rotation import rotate90, rotation_pretext_batch

__all__ = [
    "BenchmarkScenario", "ConfusionMatrix", "MetricsReport", "REPORT_SCHEMA", "ScenarioError", "accuracy",
    "evaluate_state", "quadratic_weighted_kappa", "render_table", "report_from_predictions", "rotate90",
    "rotation_pretext_batch", "run_benchmark", "strip_labels", "write_reports",
]
