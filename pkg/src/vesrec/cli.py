"""Command-line entry point: ``vesrec <subcommand> [options]``.

Every subcommand takes ``--config FILE``, repeatable ``--override key=value``,
``--out DIR`` and ``--seed N``. The seed is applied last and sets both
``seed`` and ``synth.seed``.

Exit codes: 0 success, 2 config/validation error, 3 I/O error, 4 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import functools
import json
import logging
from pathlib import Path
from typing import Optional

import click
import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import DatasetManifest, ValidationError, load_image, load_manifest, sample_seed, synth_two_domain
from .losses import NonFiniteLossError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("vesrec")


def exit_code_for(exc: BaseException) -> int:
    from .evaluation import ScenarioError

    if isinstance(exc, ScenarioError):
        return exit_code_for(exc.cause)
    if isinstance(exc, NonFiniteLossError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, ValidationError, ValueError, KeyError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except Exception as e:
            code = exit_code_for(e)
            click.echo(f"error: {e}", err=True)
            raise SystemExit(code)
    return wrapper


def _common(fn):
    fn = click.option("--seed", type=int, default=None, help="Overrides seed and synth.seed.")(fn)
    fn = click.option("--out", "out", type=click.Path(file_okay=False, path_type=Path), default=Path("out"),
                      show_default=True, help="Output directory (created if absent).")(fn)
    fn = click.option("--override", "-o", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Dotted config key; repeatable, last writer wins.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                      help="Config file of key = value lines.")(fn)
    return fn


def _load(config_path, overrides, seed) -> tuple[ExperimentConfig, set]:
    overrides = list(overrides)
    if seed is not None:
        overrides += [f"seed={seed}", f"synth.seed={seed}"]
    if config_path is not None and not Path(config_path).is_file():
        raise FileNotFoundError(f"config file not found: {config_path}")
    cfg = load_config(config_path, overrides)
    explicit = {o.split("=", 1)[0].strip() for o in overrides}
    if config_path is not None:
        from .config import parse_config_text

        explicit |= set(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
    return cfg, explicit


def _prepare_out(out: Path, cfg: ExperimentConfig) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    return out


def _manifest(path: Optional[str], domain: str, key: str) -> DatasetManifest:
    if not path:
        raise ConfigError(f"config key {key!r} is required")
    return load_manifest(path, domain)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Vessel-anchored masked reconstruction for fundus grade domain adaptation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


@cli.command()
@_common
@_guarded
def synth(config_path, overrides, out, seed):
    """Write a synthetic two-domain dataset with manifests and vessel masks."""
    cfg, _ = _load(config_path, overrides, seed)
    _prepare_out(out, cfg)
    src, tgt = synth_two_domain(cfg.synth, out)
    for m in (src, tgt):
        counts = m.counts
        grades = " ".join(f"{g}:{counts.get(g, 0)}" for g in range(5))
        click.echo(f"{m.domain}: {len(m)} images ({out / (m.domain + '.csv')})  grades {grades}")


def _train_state(cfg: ExperimentConfig, out: Path, resume: Optional[Path]):
    from .evaluation import evaluate_state, strip_labels
    from .trainer import TrainLog, TrainState, progressive_resize_run

    tcfg = cfg.train
    source = _manifest(cfg.data.source_manifest, "source", "data.source_manifest")
    target = _manifest(cfg.data.target_manifest, "target", "data.target_manifest")
    state, log_kw = None, {}
    if resume is not None:
        state = TrainState.load(resume, tcfg)
        log_kw = {"truncate_from_step": state.step}
    train_log = TrainLog(out / "train_log.jsonl", **log_kw)
    state = progressive_resize_run(tcfg, source, strip_labels(target), train_log,
                                   checkpoint_dir=out / "checkpoints", resume=state)
    state.save(out / "final.npz")
    size = state.image_size
    metrics = {"steps": state.step, "final_train_accuracy": evaluate_state(state, source, size).accuracy}
    test = cfg.data.target_test_manifest
    test_manifest = load_manifest(test, "target") if test else target
    if test_manifest.labeled:
        report = evaluate_state(state, test_manifest, size, "target", tcfg.method)
        metrics["target"] = report.to_dict()
        click.echo(f"target accuracy {report.accuracy:.3f}  qwk {report.qwk:.3f}  (n={report.n})")
    _write_json(out / "metrics.json", metrics)
    click.echo(f"trained {state.step} steps; checkpoint {out / 'final.npz'}")


@cli.command()
@_common
@click.option("--resume", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Epoch checkpoint to continue from.")
@_guarded
def train(config_path, overrides, out, seed, resume):
    """Phase 1 on labelled source images, then phase 2 adaptation to the target."""
    cfg, _ = _load(config_path, overrides, seed)
    _train_state(cfg, _prepare_out(out, cfg), resume)


@cli.command()
@_common
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--fraction", type=float, default=None, help="Target label fraction (default: finetune_fraction).")
@_guarded
def finetune(config_path, overrides, out, seed, checkpoint, fraction):
    """Fine-tune a trained checkpoint on a stratified fraction of target labels."""
    from .evaluation import evaluate_state
    from .trainer import DomainData, TrainState, finetune as run_finetune

    cfg, _ = _load(config_path, overrides, seed)
    out = _prepare_out(out, cfg)
    fraction = cfg.train.finetune_fraction if fraction is None else fraction
    state = TrainState.load(checkpoint, cfg.train)
    target = _manifest(cfg.data.target_manifest, "target", "data.target_manifest")
    run_finetune(state, DomainData.load(target, state.image_size), fraction, cfg.train)
    state.save(out / "finetuned.npz")
    metrics = {"finetune_fraction": fraction}
    if cfg.data.target_test_manifest:
        test = load_manifest(cfg.data.target_test_manifest, "target")
        report = evaluate_state(state, test, state.image_size, "target", cfg.train.method, fraction)
        metrics["target"] = report.to_dict()
        click.echo(f"target accuracy {report.accuracy:.3f}  qwk {report.qwk:.3f}")
    _write_json(out / "metrics.json", metrics)


@cli.command("eval")
@_common
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--domain", type=click.Choice(["source", "target"]), default="target", show_default=True)
@_guarded
def evaluate(config_path, overrides, out, seed, checkpoint, manifest, domain):
    """Score a checkpoint on a labelled manifest (accuracy, kappa, confusion CSV)."""
    from .evaluation import evaluate_state, render_table
    from .model import load_checkpoint
    from .trainer import TrainState

    cfg, explicit = _load(config_path, overrides, seed)
    _, meta = load_checkpoint(checkpoint)
    if "backbone" in explicit and meta["backbone"] != cfg.train.backbone:
        raise ConfigError(f"checkpoint backbone {meta['backbone']!r} does not match configured "
                          f"{cfg.train.backbone!r}")
    state = TrainState.load(checkpoint, cfg.train)
    m = load_manifest(manifest, domain)
    if not len(m):
        raise ValidationError(f"{manifest}: manifest is empty")
    report = evaluate_state(state, m, state.image_size, domain, cfg.train.method)
    out = _prepare_out(out, cfg)
    _write_json(out / "metrics.json", report.to_dict())
    report.confusion.to_csv(out / "confusion.csv")
    click.echo(render_table([report]), nl=False)


@cli.command()
@_common
@_guarded
def benchmark(config_path, overrides, out, seed):
    """Train and score every configured method (and fine-tune fraction) on the target test data."""
    from .evaluation import BenchmarkScenario, render_table, run_benchmark, write_reports

    cfg, _ = _load(config_path, overrides, seed)
    out = _prepare_out(out, cfg)
    source = _manifest(cfg.data.source_manifest, "source", "data.source_manifest")
    target = _manifest(cfg.data.target_manifest, "target", "data.target_manifest")
    test = cfg.data.target_test_manifest
    test = load_manifest(test, "target") if test else None
    name = f"{Path(cfg.data.source_manifest).stem}->{Path(cfg.data.target_manifest).stem}"
    scenarios = [BenchmarkScenario(name, source, target, method, fraction, test)
                 for method in cfg.benchmark.methods for fraction in cfg.benchmark.finetune_fractions]
    reports = run_benchmark(scenarios, cfg.train)
    write_reports(reports, out)
    click.echo(render_table(reports), nl=False)


@cli.command("inspect-masks")
@_common
@click.option("--manifest", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--domain", type=click.Choice(["source", "target"]), default="target", show_default=True)
@click.option("-n", "n", type=int, default=None, help="Images to render (default: inspect.n).")
@_guarded
def inspect_masks(config_path, overrides, out, seed, manifest, domain, n):
    """Render image | vessel map | mask overlay | masked input | masked target panels."""
    from PIL import Image

    from .masking import render_panel, sample_patch_masks
    from .vessel import anchor_pixels, resolve_vessel_masks

    cfg, _ = _load(config_path, overrides, seed)
    n = cfg.inspect_n if n is None else n
    if n < 0:
        raise ConfigError("inspect.n must be >= 0")
    m = load_manifest(manifest, domain)
    n = min(n, len(m))
    if n == 0:
        click.echo("nothing to render")
        return
    tcfg = cfg.train
    picked = sorted(np.random.default_rng(tcfg.seed).choice(len(m), n, replace=False).tolist())
    sub = m.subset(picked)
    images = np.stack([load_image(sub.resolve(e.image_path)) for e in sub.entries])
    if len({im.shape for im in images}) != 1 or images.shape[-1] != images.shape[-2]:
        raise ValidationError("inspect-masks needs square images of one size")
    size = images.shape[-1]
    vessels = resolve_vessel_masks(sub, size, images, tcfg.vessel.fallback, tcfg.vessel.fallback_radius,
                                   tcfg.vessel.fallback_k)
    out = _prepare_out(out, cfg)
    dump = {}
    for entry, image, vessel in zip(sub.entries, images, vessels):
        anchors = anchor_pixels(vessel, tcfg.mask.mask_anchor)
        maskset = sample_patch_masks(anchors, tcfg.mask, np.random.default_rng(sample_seed(tcfg.seed, entry.id)))
        Image.fromarray(render_panel(image, vessel.mask, maskset)).save(out / f"panel_{entry.id}.png")
        dump[entry.id] = {"centers": [list(c) for c in maskset.centers], "rects": [list(r) for r in maskset.rects],
                          "mask_source": vessel.source, "fallback_uniform": maskset.fallback_uniform}
    _write_json(out / "centers.json", dump)
    click.echo(f"wrote {n} panels to {out}")


def main(argv=None):
    """Console-script entry; returns the process exit code."""
    try:
        cli.main(args=argv, prog_name="vesrec", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return 1
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
