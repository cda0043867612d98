"""Flat key/value experiment configuration.

File format: one ``key = value`` per line, ``#`` starts a comment. Values
are parsed as JSON when possible (numbers, booleans, null, lists, quoted
strings) and kept as bare strings otherwise. Keys are dotted::

    method = vesrec_ssl
    image_sizes = [32, 64]
    loss.lambda_adv = 0.05
    mask.n_patches = 4
    synth.shift.channel_gain = [0.75, 1.15, 1.3]

Overrides (``key=value``) are applied after the file, last writer wins.
Unknown keys are rejected. ``available_keys()`` lists every key.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .data import DomainShift, SynthConfig, ValidationError
from .losses import LossWeights
from .masking import MaskConfig

METHODS = ("vesrec_ssl", "rotation_ssl", "source_only")
LOSS_NAMES = ("class", "rec", "adv", "c", "e", "rot")
_DEFAULT_PHASE2 = {
    "vesrec_ssl": ("class", "rec", "adv", "c", "e"),
    "rotation_ssl": ("class", "rot"),
    "source_only": (),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseSpec:
    active_losses: frozenset
    # which domain feeds each active loss
    data: tuple = ()

    @classmethod
    def of(cls, losses: Sequence[str]) -> "PhaseSpec":
        unknown = set(losses) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss names {sorted(unknown)}")
        feeds = tuple((name, "source" if name == "class" else "target") for name in LOSS_NAMES if name in losses)
        return cls(frozenset(losses), feeds)


@dataclass(frozen=True)
class VesselConfig:
    fallback: bool = True
    fallback_radius: Optional[int] = None
    fallback_k: float = 1.5


@dataclass(frozen=True)
class TrainConfig:
    method: str = "vesrec_ssl"
    backbone: str = "toy"
    image_sizes: tuple = (32, 64)
    lr_min: float = 0.001
    lr_max: float = 0.01
    cycle_length: int = 40
    momentum: float = 0.9
    lr_find: bool = False
    lr_find_steps: int = 100
    lr_find_span: tuple = (1e-5, 1.0)
    batch_size: int = 32
    seed: int = 0
    gen_steps: int = 1
    disc_steps: int = 1
    disc_lr_scale: float = 1.0
    patience: int = 5
    max_epochs: int = 100
    phase1_max_epochs: Optional[int] = None
    phase2_epochs: Optional[int] = 10
    finetune_max_epochs: Optional[int] = None
    finetune_fraction: float = 0.0
    val_fraction: float = 0.1
    class_weights: bool = False
    phase2_losses: Optional[tuple] = None
    rot_weight: float = 1.0
    adv_saturating: bool = False
    pseudo_min_conf: float = 0.0
    pseudo_hard: bool = False
    eval_folds: int = 3
    loss: LossWeights = LossWeights()
    mask: MaskConfig = MaskConfig()
    vessel: VesselConfig = VesselConfig()

    def __post_init__(self):
        sizes = tuple(self.image_sizes)
        object.__setattr__(self, "image_sizes", sizes)
        object.__setattr__(self, "lr_find_span", tuple(self.lr_find_span))
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"image_sizes must be non-empty and strictly increasing, got {list(sizes)}")
        if not 0 <= self.lr_min < self.lr_max:
            raise ConfigError(f"need 0 <= lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.cycle_length < 2 or self.cycle_length % 2:
            raise ConfigError("cycle_length must be an even integer >= 2")
        if self.gen_steps < 1 or self.disc_steps < 1:
            raise ConfigError("alt_ratio (gen_steps, disc_steps) must both be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.finetune_fraction <= 1.0:
            raise ConfigError("finetune_fraction must be in [0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        for name in ("max_epochs", "phase1_max_epochs", "phase2_epochs", "finetune_max_epochs", "patience"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eval_folds < 1:
            raise ConfigError("eval_folds must be >= 1")
        if self.phase2_losses is not None:
            object.__setattr__(self, "phase2_losses", tuple(self.phase2_losses))
        self.phases  # validates phase specs

    @property
    def alt_ratio(self) -> tuple[int, int]:
        return self.gen_steps, self.disc_steps

    @property
    def lr_bounds(self) -> tuple[float, float]:
        return self.lr_min, self.lr_max

    @property
    def phases(self) -> list[PhaseSpec]:
        losses = self.phase2_losses if self.phase2_losses is not None else _DEFAULT_PHASE2[self.method]
        phases = [PhaseSpec.of(("class",))]
        if self.method != "source_only":
            if "class" not in losses:
                raise ConfigError("phase 2 must keep the classification loss active")
            phases.append(PhaseSpec.of(losses))
        return phases

    def epochs_for(self, phase: str) -> int:
        specific = {"phase1": self.phase1_max_epochs, "phase2": self.phase2_epochs,
                    "finetune": self.finetune_max_epochs}[phase]
        # max_epochs caps every phase, so max_epochs=0 turns a run into a no-op
        return self.max_epochs if specific is None else min(specific, self.max_epochs)


@dataclass(frozen=True)
class DataPaths:
    source_manifest: Optional[str] = None
    target_manifest: Optional[str] = None
    target_test_manifest: Optional[str] = None


@dataclass(frozen=True)
class BenchmarkConfig:
    methods: tuple = ("source_only", "rotation_ssl", "vesrec_ssl")
    finetune_fractions: tuple = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "finetune_fractions", tuple(float(f) for f in self.finetune_fractions))
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown benchmark methods {sorted(bad)}")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = TrainConfig()
    data: DataPaths = DataPaths()
    synth: SynthConfig = SynthConfig()
    benchmark: BenchmarkConfig = BenchmarkConfig()
    inspect_n: int = 4


# prefix used in flat keys for each nested dataclass field ("" = no prefix)
_SECTIONS = {"train": "", "data": "data.", "synth": "synth.", "benchmark": "benchmark.", "inspect_n": "inspect.n"}


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out


def _flat_defaults() -> dict:
    cfg = ExperimentConfig()
    flat = {}
    for name, prefix in _SECTIONS.items():
        value = getattr(cfg, name)
        if dataclasses.is_dataclass(value):
            flat.update(_flatten(value, prefix))
        else:
            flat[prefix] = value
    return flat


def available_keys() -> list[str]:
    return sorted(_flat_defaults())


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        lowered = raw.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        if lowered in ("none", "null"):
            return None
        return raw


def parse_assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), parse_value(value)


def parse_config_text(text: str) -> dict:
    flat = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError as e:
            raise ConfigError(f"line {line_no}: {e}") from None
        flat[key] = value
    return flat


def _build(cls, flat: dict, prefix: str):
    kwargs = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), flat, f"{prefix}{f.name}.")
        elif f"{prefix}{f.name}" in flat:
            value = flat[f"{prefix}{f.name}"]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, ValidationError) as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from None


def build_config(flat: dict) -> ExperimentConfig:
    known = set(_flat_defaults())
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    parts = {}
    for name, prefix in _SECTIONS.items():
        default = getattr(ExperimentConfig(), name)
        if dataclasses.is_dataclass(default):
            parts[name] = _build(type(default), flat, prefix)
        elif prefix in flat:
            parts[name] = flat[prefix]
    return ExperimentConfig(**parts)


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    flat = {}
    if path is not None:
        flat.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for item in overrides:
        key, value = parse_assignment(item)
        flat[key] = value
    return build_config(flat)


def config_to_flat(cfg: ExperimentConfig) -> dict:
    flat = {}
    for name, prefix in _SECTIONS.items():
        value = getattr(cfg, name)
        if dataclasses.is_dataclass(value):
            flat.update(_flatten(value, prefix))
        else:
            flat[prefix] = value
    return {k: list(v) if isinstance(v, tuple) else v for k, v in flat.items()}


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(config_to_flat(cfg).items()))


__all__ = [
    "BenchmarkConfig", "ConfigError", "DataPaths", "DomainShift", "ExperimentConfig", "LossWeights",
    "MaskConfig", "PhaseSpec", "SynthConfig", "TrainConfig", "VesselConfig", "available_keys",
    "build_config", "dump_config", "load_config", "parse_config_text",
]
