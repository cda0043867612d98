import json
import math

import jsonschema
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _oracles import brute_qwk
from vesrec.config import TrainConfig
from vesrec.data import DomainShift, SynthConfig, synth_two_domain
from vesrec.evaluation import (
    REPORT_SCHEMA, BenchmarkScenario, ConfusionMatrix, MetricsReport, accuracy, quadratic_weighted_kappa,
    render_table, report_from_predictions, rotate90, rotation_pretext_batch, run_benchmark, write_reports,
)


def _cm(true, pred):
    return ConfusionMatrix.from_predictions(true, pred)


class TestAccuracy:
    def test_examples(self):
        assert accuracy(ConfusionMatrix(np.diag([3, 1, 4, 1, 5]))) == 1.0
        assert accuracy(ConfusionMatrix(np.ones((5, 5)) - np.eye(5))) == 0.0
        counts = np.zeros((5, 5), int)
        counts[0, 0], counts[1, 2], counts[3, 4] = 8, 1, 1
        assert accuracy(ConfusionMatrix(counts)) == 0.8

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy(ConfusionMatrix(np.zeros((5, 5), int)))


class TestKappa:
    def test_examples(self):
        assert quadratic_weighted_kappa(_cm([0, 1, 2, 3, 4], [0, 1, 2, 3, 4])) == 1.0
        assert quadratic_weighted_kappa(_cm([0, 1, 2, 3, 4], [4, 3, 2, 1, 0])) == -1.0
        assert quadratic_weighted_kappa(_cm([0, 0, 1, 1], [0, 0, 1, 1])) == 1.0

    def test_degenerate(self):
        assert quadratic_weighted_kappa(_cm([2, 2], [2, 2])) == 1.0
        with pytest.raises(ValueError):
            quadratic_weighted_kappa(ConfusionMatrix(np.zeros((5, 5), int)))

    def test_matches_brute_force(self, rng):
        for _ in range(200):
            counts = rng.integers(0, 20, (5, 5))
            counts[rng.random((5, 5)) < 0.3] = 0
            if counts.sum() == 0:
                continue
            rows, cols = counts.sum(1), counts.sum(0)
            if sum((i - j) ** 2 * rows[i] * cols[j] for i in range(5) for j in range(5)) == 0:
                continue
            got = quadratic_weighted_kappa(ConfusionMatrix(counts))
            assert abs(got - brute_qwk(counts.tolist())) <= 1e-12
            assert abs(quadratic_weighted_kappa(ConfusionMatrix(2 * counts)) - got) <= 1e-12
            assert abs(quadratic_weighted_kappa(ConfusionMatrix(counts.T)) - got) <= 1e-12
            assert -1 - 1e-12 <= got <= 1 + 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 9), min_size=5, max_size=5))
    def test_diagonal_is_one(self, diag):
        assert quadratic_weighted_kappa(ConfusionMatrix(np.diag(diag))) == pytest.approx(1.0, abs=1e-15)


class TestRotation:
    def test_ramp_enumeration(self):
        img = torch.arange(16).reshape(1, 4, 4)
        rot = rotate90(img, 1)
        for r in range(4):
            for c in range(4):
                assert rot[0, r, c] == img[0, c, 3 - r]

    def test_group_property(self):
        x = torch.rand(2, 3, 8, 8)
        assert torch.equal(rotate90(x, 0), x)
        y = x
        for _ in range(4):
            y = rotate90(y, 1)
        assert torch.equal(y, x)

    def test_pretext_batch(self, rng):
        x = torch.rand(16, 3, 8, 8)
        rotated, k = rotation_pretext_batch(x, rng)
        assert k.dtype == torch.long and set(k.tolist()) <= {0, 1, 2, 3}
        for i in range(16):
            assert torch.equal(rotated[i], rotate90(x[i], int(k[i])))
            assert torch.equal(rotated[i].flatten().sort().values, x[i].flatten().sort().values)
        with pytest.raises(ValueError):
            rotation_pretext_batch(torch.rand(1, 3, 8, 6), rng)


class TestReports:
    def test_schema_and_files(self, tmp_path):
        r = report_from_predictions([0, 1, 2, 3, 4, 4], [0, 1, 2, 3, 3, 4], "a->b", "vesrec_ssl")
        jsonschema.validate(json.loads(json.dumps(r.to_dict())), REPORT_SCHEMA)
        write_reports([r], tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        assert data[0]["accuracy"] == pytest.approx(5 / 6)
        assert "Acc." in (tmp_path / "report.txt").read_text()
        assert "Q.W. Kappa" in render_table([r])
        assert list(tmp_path.glob("confusion_*.csv"))

    def test_fold_mean(self):
        a = report_from_predictions([0, 1], [0, 1], "s")
        b = report_from_predictions([0, 1, 2, 3], [0, 1, 3, 3], "s")
        m = MetricsReport.fold_mean([a, b], "s")
        assert m.accuracy == pytest.approx((1.0 + 0.75) / 2)
        assert m.n == 6 and m.confusion.total == 6


def test_empty_scenario_list():
    assert run_benchmark([], TrainConfig(image_sizes=(32,))) == []


def test_scenario_rejects_same_domain(tiny_synth):
    _, src, _ = tiny_synth
    with pytest.raises(ValueError):
        BenchmarkScenario("x", src, src, "source_only")


@pytest.mark.slow
def test_source_only_without_shift_matches_in_domain(tmp_path):
    """With no domain shift, target accuracy should be within sampling noise of validation accuracy."""
    torch.set_num_threads(1)
    identity = DomainShift(0.0, (1.0, 1.0, 1.0), 0.0)
    src, tgt = synth_two_domain(SynthConfig(n_per_domain=300, image_size=32, shift=identity, seed=5), tmp_path)
    cfg = TrainConfig(method="source_only", image_sizes=(32,), seed=5, max_epochs=20, val_fraction=0.2)
    from vesrec.trainer import DomainData, labeled_accuracy, new_state, train_phase1

    state = new_state(cfg)
    source = DomainData.load(src, 32, cfg)
    state = train_phase1(state, source, cfg)
    val_acc = state.best_val_metric
    target = DomainData.load(tgt, 32, cfg)
    tgt_acc = labeled_accuracy(state.net, target)
    noise = math.sqrt(val_acc * (1 - val_acc) * (1 / 60 + 1 / 300))
    assert abs(tgt_acc - val_acc) <= 3 * noise + 1e-9
