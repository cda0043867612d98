import json
import shutil

import jsonschema
import pytest

from vesrec.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, exit_code_for, main
from vesrec.config import TrainConfig
from vesrec.data import load_image, load_manifest
from vesrec.evaluation import REPORT_SCHEMA, ScenarioError
from vesrec.losses import NonFiniteLossError
from vesrec.trainer import TrainState, new_state
from vesrec.vessel import extract_edges, load_vessel_mask


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["synth", "--out", str(out), "-o", "synth.n_per_domain=40", "--seed", "2"]) == 0
    return out


def _config(tmp_path, data_dir, **extra):
    lines = {
        "data.source_manifest": str(data_dir / "source.csv"),
        "data.target_manifest": str(data_dir / "target.csv"),
        "image_sizes": "[32]", "batch_size": "16", "phase1_max_epochs": "2", "phase2_epochs": "3",
    }
    lines.update({k: str(v) for k, v in extra.items()})
    path = tmp_path / "exp.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return str(path)


def _log_rows(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestSynth:
    def test_default_counts(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path)]) == 0
        for domain in ("source", "target"):
            assert len(load_manifest(tmp_path / f"{domain}.csv", domain)) == 600
        assert "source: 600 images" in capsys.readouterr().out

    def test_rerun_byte_identical(self, tmp_path):
        args = ["-o", "synth.n_per_domain=6", "--seed", "11"]
        assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
        assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
        assert len(files) == 24
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_bad_threshold_order(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "-o", "synth.grade_rule=[3,2,5,8]"]) == EXIT_CONFIG
        assert "grade_rule" in capsys.readouterr().err


class TestConfigHandling:
    def test_unknown_key(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "-o", "no_such_key=1"]) == EXIT_CONFIG
        assert "no_such_key" in capsys.readouterr().err

    def test_missing_config_file_is_io(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path)]) == EXIT_IO

    def test_usage_error(self):
        assert main(["synth", "--no-such-flag"]) == EXIT_CONFIG
        assert main(["no-such-command"]) == EXIT_CONFIG

    def test_missing_manifest_key(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_output_dir_created(self, tmp_path):
        out = tmp_path / "deep" / "er"
        assert main(["synth", "--out", str(out), "-o", "synth.n_per_domain=2"]) == 0
        assert (out / "config.txt").exists()

    def test_scenario_error_maps_through_cause(self):
        assert exit_code_for(ScenarioError("s", "m", NonFiniteLossError("l_c", 3))) == EXIT_NUMERIC
        assert exit_code_for(ScenarioError("s", "m", FileNotFoundError("x"))) == EXIT_IO


class TestTrain:
    def test_zero_epochs_is_initialization(self, tmp_path, data_dir):
        cfg_path = _config(tmp_path, data_dir, seed=4)
        assert main(["train", "--config", cfg_path, "-o", "max_epochs=0", "--out", str(tmp_path / "run")]) == 0
        cfg = TrainConfig(image_sizes=(32,), seed=4)
        state = TrainState.load(tmp_path / "run" / "final.npz", cfg)
        assert state.digest() == new_state(cfg).digest()
        assert _log_rows(tmp_path / "run" / "train_log.jsonl") == []

    def test_log_rows_equal_steps_and_eval_matches(self, tmp_path, data_dir):
        cfg_path = _config(tmp_path, data_dir)
        run = tmp_path / "run"
        assert main(["train", "--config", cfg_path, "--out", str(run)]) == 0
        metrics = json.loads((run / "metrics.json").read_text())
        rows = _log_rows(run / "train_log.jsonl")
        assert len(rows) == metrics["steps"] > 0
        assert [r["step"] for r in rows] == list(range(metrics["steps"]))
        jsonschema.validate(metrics["target"], REPORT_SCHEMA)

        ev = tmp_path / "eval"
        args = ["eval", "--config", cfg_path, "--checkpoint", str(run / "final.npz"),
                "--manifest", str(data_dir / "source.csv"), "--domain", "source", "--out", str(ev)]
        assert main(args) == 0
        report = json.loads((ev / "metrics.json").read_text())
        jsonschema.validate(report, REPORT_SCHEMA)
        assert report["accuracy"] == metrics["final_train_accuracy"]
        assert (ev / "confusion.csv").exists()

    def test_resume_reproduces_log(self, tmp_path, data_dir):
        cfg_path = _config(tmp_path, data_dir, seed=1)
        full, resumed = tmp_path / "full", tmp_path / "resumed"
        assert main(["train", "--config", cfg_path, "--out", str(full)]) == 0
        # an interrupted run: the log has rows past the checkpoint that must be dropped
        shutil.copytree(full, resumed)
        ckpt = resumed / "checkpoints" / "stage0_phase2_epoch001.npz"
        assert main(["train", "--config", cfg_path, "--out", str(resumed), "--resume", str(ckpt)]) == 0
        assert _log_rows(full / "train_log.jsonl") == _log_rows(resumed / "train_log.jsonl")
        cfg = TrainConfig(image_sizes=(32,), seed=1)
        digests = [TrainState.load(run / "final.npz", cfg).digest() for run in (full, resumed)]
        assert digests[0] == digests[1]

    def test_non_finite_exit(self, tmp_path, data_dir, capsys):
        cfg_path = _config(tmp_path, data_dir, lr_min=1e20, lr_max=1e30)
        assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "run")]) == EXIT_NUMERIC
        err = capsys.readouterr().err
        assert "l_class" in err and "step" in err


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "init.npz"
    new_state(TrainConfig(image_sizes=(32,))).save(path)
    return path


class TestEval:
    def test_empty_manifest(self, tmp_path, checkpoint):
        empty = tmp_path / "empty.csv"
        empty.write_text("id,image_path,mask_path,label\n")
        args = ["eval", "--checkpoint", str(checkpoint), "--manifest", str(empty), "--out", str(tmp_path)]
        assert main(args) == EXIT_CONFIG

    def test_backbone_mismatch(self, tmp_path, checkpoint, data_dir):
        args = ["eval", "--checkpoint", str(checkpoint), "--manifest", str(data_dir / "target.csv"),
                "--out", str(tmp_path), "-o", "backbone=resnet50_shape"]
        assert main(args) == EXIT_CONFIG

    def test_missing_checkpoint_is_io(self, tmp_path, data_dir):
        args = ["eval", "--checkpoint", str(tmp_path / "nope.npz"), "--manifest", str(data_dir / "target.csv"),
                "--out", str(tmp_path)]
        assert main(args) == EXIT_IO


class TestInspectMasks:
    def _run(self, out, data_dir, *extra):
        return main(["inspect-masks", "--manifest", str(data_dir / "target.csv"), "--out", str(out), *extra])

    def test_zero_writes_nothing(self, tmp_path, data_dir):
        out = tmp_path / "panels"
        assert self._run(out, data_dir, "-o", "inspect.n=0") == 0
        assert not out.exists()

    def test_centers_on_vessel_edges(self, tmp_path, data_dir):
        out = tmp_path / "panels"
        assert self._run(out, data_dir, "-n", "5", "--seed", "3") == 0
        centers = json.loads((out / "centers.json").read_text())
        manifest = load_manifest(data_dir / "target.csv", "target")
        by_id = {e.id: e for e in manifest.entries}
        assert len(centers) == 5
        for sid, rec in centers.items():
            assert rec["mask_source"] == "precomputed" and not rec["fallback_uniform"]
            edges = extract_edges(load_vessel_mask(manifest.resolve(by_id[sid].mask_path))).as_set()
            assert all(tuple(c) in edges for c in rec["centers"])
            panel = load_image(out / f"panel_{sid}.png")
            assert panel.shape == (3, 32, 5 * 32)

    def test_selection_deterministic_per_seed(self, tmp_path, data_dir):
        for name in ("a", "b", "c"):
            seed = "9" if name != "c" else "10"
            assert self._run(tmp_path / name, data_dir, "-n", "4", "--seed", seed) == 0
        read = lambda n: json.loads((tmp_path / n / "centers.json").read_text())
        assert read("a") == read("b")
        assert read("a") != read("c")

    def test_missing_masks_without_fallback(self, tmp_path, data_dir):
        manifest = load_manifest(data_dir / "target.csv", "target")
        lines = ["id,image_path,mask_path,label"]
        lines += [f"{e.id},{manifest.resolve(e.image_path)},,{e.label}" for e in manifest.entries[:3]]
        path = tmp_path / "nomask.csv"
        path.write_text("\n".join(lines) + "\n")
        args = ["inspect-masks", "--manifest", str(path), "--out", str(tmp_path / "p"), "-n", "2"]
        assert main([*args, "-o", "vessel.fallback=false"]) == EXIT_CONFIG
        assert main(args) == 0
        rec = json.loads((tmp_path / "p" / "centers.json").read_text())
        assert {r["mask_source"] for r in rec.values()} == {"fallback"}


def test_benchmark_writes_reports(tmp_path, data_dir, capsys):
    cfg_path = _config(tmp_path, data_dir, eval_folds=2, phase2_epochs=1)
    args = ["benchmark", "--config", cfg_path, "--out", str(tmp_path / "bench"),
            "-o", 'benchmark.methods=["source_only", "vesrec_ssl"]', "-o", "benchmark.finetune_fractions=[0, 0.5]"]
    assert main(args) == 0
    reports = json.loads((tmp_path / "bench" / "report.json").read_text())
    assert [(r["method"], r["finetune_fraction"]) for r in reports] == [
        ("source_only", 0.0), ("source_only", 0.5), ("vesrec_ssl", 0.0), ("vesrec_ssl", 0.5)]
    for r in reports:
        jsonschema.validate(r, REPORT_SCHEMA)
        assert r["n"] == 40 and len(r["folds"]) == 2
    assert "Q.W. Kappa" in capsys.readouterr().out
    assert len(list((tmp_path / "bench").glob("confusion_*.csv"))) == 4
