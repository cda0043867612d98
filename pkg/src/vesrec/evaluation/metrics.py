"""Accuracy, quadratic weighted kappa and the per-scenario metrics report."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..data import NUM_GRADES


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true grade, cols = predicted

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int = NUM_GRADES) -> "ConfusionMatrix":
        y_true, y_pred = np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)
        if y_true.shape != y_pred.shape:
            raise ValueError("y_true and y_pred differ in length")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self, path) -> None:
        k = self.counts.shape[0]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["true\\pred", *range(k)])
            for g in range(k):
                w.writerow([g, *self.counts[g].tolist()])


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts) / cm.total)


def quadratic_weighted_kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa with weights (i - j)^2 / (K - 1)^2.

    On proportions this is 1 - sum(w O) / sum(w E). Multiplying numerator
    and denominator by N^2 (K - 1)^2 turns both into integer sums over the
    raw counts, so the only rounding is the final division.
    """
    if cm.total == 0:
        raise ValueError("kappa of an empty confusion matrix is undefined")
    counts = cm.counts
    k = counts.shape[0]
    i, j = np.indices((k, k))
    w = (i - j) ** 2
    n = int(counts.sum())
    num = n * int((w * counts).sum())
    den = int((w * np.outer(counts.sum(axis=1), counts.sum(axis=0))).sum())
    if den == 0:
        if np.count_nonzero(counts - np.diag(np.diag(counts))) == 0:
            return 1.0
        raise ValueError("kappa undefined: expected disagreement is zero")
    return 1.0 - num / den


REPORT_SCHEMA = {
    "type": "object",
    "required": ["scenario", "method", "accuracy", "qwk", "n", "confusion"],
    "properties": {
        "scenario": {"type": "string"},
        "method": {"type": "string"},
        "finetune_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "qwk": {"type": "number", "minimum": -1, "maximum": 1},
        "n": {"type": "integer", "minimum": 1},
        "confusion": {
            "type": "array", "minItems": NUM_GRADES, "maxItems": NUM_GRADES,
            "items": {"type": "array", "minItems": NUM_GRADES, "maxItems": NUM_GRADES,
                      "items": {"type": "integer", "minimum": 0}},
        },
        "folds": {"type": "array", "items": {"type": "object"}},
    },
}


@dataclass
class MetricsReport:
    accuracy: float
    qwk: float
    confusion: ConfusionMatrix
    scenario: str
    n: int
    method: str = ""
    finetune_fraction: float = 0.0
    folds: list = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, scenario: str, method: str = "",
                       finetune_fraction: float = 0.0) -> "MetricsReport":
        return cls(accuracy(cm), quadratic_weighted_kappa(cm), cm, scenario, cm.total, method, finetune_fraction)

    @classmethod
    def fold_mean(cls, reports: Sequence["MetricsReport"], scenario: str, method: str = "",
                  finetune_fraction: float = 0.0) -> "MetricsReport":
        """Mean accuracy and kappa over folds; confusion counts are summed."""
        cm = reports[0].confusion
        for r in reports[1:]:
            cm = cm + r.confusion
        folds = [{"accuracy": r.accuracy, "qwk": r.qwk, "n": r.n} for r in reports]
        return cls(float(np.mean([r.accuracy for r in reports])), float(np.mean([r.qwk for r in reports])),
                   cm, scenario, cm.total, method, finetune_fraction, folds)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "method": self.method, "finetune_fraction": self.finetune_fraction,
            "accuracy": self.accuracy, "qwk": self.qwk, "n": self.n,
            "confusion": self.confusion.counts.tolist(), "folds": self.folds,
        }


def report_from_predictions(y_true, y_pred, scenario: str, method: str = "",
                            finetune_fraction: float = 0.0) -> MetricsReport:
    return MetricsReport.from_confusion(ConfusionMatrix.from_predictions(y_true, y_pred), scenario, method,
                                        finetune_fraction)


def render_table(reports: Sequence[MetricsReport], title: Optional[str] = None) -> str:
    """Plain-text table: one row per method, Acc. and Q.W. Kappa columns per scenario."""
    scenarios = list(dict.fromkeys(r.scenario for r in reports))
    rows = list(dict.fromkeys(_row_name(r) for r in reports))
    cell = {(_row_name(r), r.scenario): r for r in reports}
    name_w = max([len("Method")] + [len(r) for r in rows])
    col_w = max([len("Q.W. Kappa")] + [len(s) // 2 for s in scenarios])
    lines = []
    if title:
        lines.append(title)
    header = f"{'Method':<{name_w}}"
    sub = " " * name_w
    for s in scenarios:
        header += f" | {s:^{2 * col_w + 3}}"
        sub += f" | {'Acc.':^{col_w}} | {'Q.W. Kappa':^{col_w}}"
    lines += [header, sub, "-" * len(sub)]
    for row in rows:
        line = f"{row:<{name_w}}"
        for s in scenarios:
            r = cell.get((row, s))
            acc = f"{r.accuracy:.3f}" if r else "-"
            kap = f"{r.qwk:.3f}" if r else "-"
            line += f" | {acc:^{col_w}} | {kap:^{col_w}}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def _row_name(r: MetricsReport) -> str:
    if r.finetune_fraction:
        return f"{r.method} + {round(100 * r.finetune_fraction)}%"
    return r.method


def write_reports(reports: Sequence[MetricsReport], out_dir) -> None:
    import json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2), encoding="utf-8")
    (out_dir / "report.txt").write_text(render_table(reports), encoding="utf-8")
    for i, r in enumerate(reports):
        r.confusion.to_csv(out_dir / f"confusion_{i:02d}_{_slug(r)}.csv")


def _slug(r: MetricsReport) -> str:
    s = f"{r.scenario}_{_row_name(r)}"
    return "".join(ch if ch.isalnum() else "_" for ch in s).strip("_")
