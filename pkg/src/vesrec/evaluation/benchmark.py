"""Scenario benchmark: train each method on a source/target pair and score it on target test data."""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from ..config import METHODS, TrainConfig
from ..data import DatasetManifest, split_kfold
from .metrics import MetricsReport, report_from_predictions

log = logging.getLogger(__name__)


class ScenarioError(RuntimeError):
    def __init__(self, scenario: str, method: str, cause: BaseException):
        self.scenario, self.method, self.cause = scenario, method, cause
        super().__init__(f"scenario {scenario!r} ({method}): {cause}")


@dataclass
class BenchmarkScenario:
    name: str
    source: DatasetManifest
    target: DatasetManifest
    method: str = "vesrec_ssl"
    finetune_fraction: float = 0.0
    target_test: Optional[DatasetManifest] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.source.domain == self.target.domain:
            raise ValueError("source and target manifests must come from different domains")
        if not 0.0 <= self.finetune_fraction <= 1.0:
            raise ValueError("finetune_fraction must be in [0, 1]")


def strip_labels(manifest: DatasetManifest) -> DatasetManifest:
    return dataclasses.replace(manifest, entries=[dataclasses.replace(e, label=None) for e in manifest.entries])


def _target_folds(scenario: BenchmarkScenario, cfg: TrainConfig):
    """(train, test) manifest pairs: the declared test split, else stratified k-fold."""
    if scenario.target_test is not None:
        return [(scenario.target, scenario.target_test)]
    if cfg.eval_folds < 2:
        raise ValueError("a target test manifest is required when eval_folds < 2")
    folds = split_kfold(scenario.target, cfg.eval_folds, cfg.seed)
    return [(scenario.target.subset(folds.complement(f)), scenario.target.subset(folds.indices(f)))
            for f in range(folds.k)]


def evaluate_state(state, manifest: DatasetManifest, size: int, scenario: str = "", method: str = "",
                   fraction: float = 0.0) -> MetricsReport:
    from ..trainer import DomainData, predict_grades

    data = DomainData.load(manifest, size)
    idx = data.labeled_idx
    if len(idx) == 0:
        raise ValueError("evaluation manifest has no labelled entries")
    pred = predict_grades(state.net, data.images[idx])
    return report_from_predictions(data.labels[idx].numpy(), pred, scenario, method, fraction)


def run_benchmark(scenarios: Sequence[BenchmarkScenario], cfg: TrainConfig) -> list[MetricsReport]:
    """Train and evaluate every scenario; deterministic for a fixed ``cfg.seed``.

    Runs that differ only in fine-tune fraction share their adaptation run,
    and methods sharing a source set share the phase-1 warm-up.
    """
    from ..trainer import DomainData, finetune, progressive_resize_run

    reports = []
    fold_cache, uda_cache, phase1_cache, data_cache = {}, {}, {}, {}
    for sc in scenarios:
        run_cfg = dataclasses.replace(cfg, method=sc.method)
        size = run_cfg.image_sizes[-1]
        try:
            key = (id(sc.source), id(sc.target), id(sc.target_test))
            if key not in fold_cache:
                fold_cache[key] = [(train, strip_labels(train), test) for train, test in _target_folds(sc, run_cfg)]
            fold_reports = []
            for f, (train, unlabeled, test) in enumerate(fold_cache[key]):
                uda_key = (key, f, sc.method)
                if uda_key not in uda_cache:
                    log.info("training %s on %s fold %d", sc.method, sc.name, f)
                    uda_cache[uda_key] = progressive_resize_run(run_cfg, sc.source, unlabeled,
                                                                phase1_cache=phase1_cache, data_cache=data_cache)
                state = uda_cache[uda_key]
                if sc.finetune_fraction > 0:
                    state = copy.deepcopy(state)
                    finetune(state, DomainData.load(train, size), sc.finetune_fraction, run_cfg)
                fold_reports.append(evaluate_state(state, test, size, sc.name, sc.method, sc.finetune_fraction))
        except Exception as e:
            raise ScenarioError(sc.name, sc.method, e) from e
        if len(fold_reports) == 1:
            reports.append(fold_reports[0])
        else:
            reports.append(MetricsReport.fold_mean(fold_reports, sc.name, sc.method, sc.finetune_fraction))
    return reports
