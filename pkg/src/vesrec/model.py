"""Encoder, decoder, discriminator and grade classifier behind a backbone registry.

All four blocks operate on batched tensors (N x C x H x W). Images are in
[0, 1]; the decoder ends in a sigmoid so reconstructions stay in range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NUM_GRADES

D_EPS = 1e-7
GROUPS = ("theta_e", "theta_d", "theta_ad", "theta_m")
_GROUP_PREFIX = {"encoder.": "theta_e", "decoder.": "theta_d", "discriminator.": "theta_ad", "classifier.": "theta_m"}


def _conv_bn_relu(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _toy_encoder() -> nn.Module:
    return nn.Sequential(
        _conv_bn_relu(3, 32, 2),
        _conv_bn_relu(32, 64, 2),
        _conv_bn_relu(64, 32, 1),
    )


def _resnet50_encoder() -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    return nn.Sequential(*list(net.children())[:-2])


def _densenet121_encoder() -> nn.Module:
    from torchvision.models import densenet121

    return nn.Sequential(densenet121(weights=None).features, nn.ReLU(inplace=True))


@dataclass(frozen=True)
class BackboneSpec:
    id: str
    stride: int
    channels: int
    min_size: int
    build_encoder: Callable[[], nn.Module]
    decoder_widths: tuple[int, ...]  # one width per 2x upsampling stage
    param_count: Optional[int] = None  # declared total over all four blocks

    def check_size(self, size: int) -> None:
        if size < self.min_size or size % self.stride:
            raise ValueError(f"backbone {self.id!r} needs square inputs that are multiples of "
                             f"{self.stride} and >= {self.min_size}, got {size}")


BACKBONES: dict[str, BackboneSpec] = {}


def register_backbone(spec: BackboneSpec) -> None:
    if spec.id in BACKBONES:
        raise ValueError(f"backbone {spec.id!r} already registered")
    BACKBONES[spec.id] = spec


register_backbone(BackboneSpec("toy", 4, 32, 16, _toy_encoder, (64, 32), param_count=129_097))
register_backbone(BackboneSpec("resnet50_shape", 32, 2048, 64, _resnet50_encoder, (512, 256, 128, 64, 32)))
register_backbone(BackboneSpec("densenet121_shape", 32, 1024, 64, _densenet121_encoder, (512, 256, 128, 64, 32)))


def get_backbone(backbone_id: str) -> BackboneSpec:
    try:
        return BACKBONES[backbone_id]
    except KeyError:
        raise ValueError(f"unknown backbone {backbone_id!r}; known: {sorted(BACKBONES)}") from None


def _decoder(spec: BackboneSpec) -> nn.Module:
    widths = spec.decoder_widths
    if 2 ** len(widths) != spec.stride:
        raise ValueError(f"{spec.id}: {len(widths)} upsampling stages cannot undo stride {spec.stride}")
    layers = [nn.ConvTranspose2d(spec.channels, widths[0], 3, stride=1, padding=1, bias=False),
              nn.BatchNorm2d(widths[0]), nn.ReLU(inplace=True)]
    for cin, cout in zip(widths, widths[1:]):
        layers += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False),
                   nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    layers += [nn.ConvTranspose2d(widths[-1], 3, 4, stride=2, padding=1), nn.Sigmoid()]
    return nn.Sequential(*layers)


class Discriminator(nn.Module):
    """Encoder-topology feature stack with its own weights plus a one-unit head."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.features = spec.build_encoder()
        self.head = nn.Linear(spec.channels, 1)

    def forward(self, x):
        logit = self.head(self.features(x).mean(dim=(2, 3))).squeeze(1)
        return torch.sigmoid(logit).clamp(D_EPS, 1 - D_EPS)


class Classifier(nn.Module):
    def __init__(self, channels: int, n_classes: int = NUM_GRADES):
        super().__init__()
        self.fc = nn.Linear(channels, n_classes)

    def forward(self, feat):
        return self.fc(feat.mean(dim=(2, 3)))


class VesRecNet(nn.Module):
    """The four blocks: encoder E, decoder D, discriminator AD and classifier M."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.encoder = spec.build_encoder()
        self.decoder = _decoder(spec)
        self.discriminator = Discriminator(spec)
        self.classifier = Classifier(spec.channels)

    @property
    def backbone_id(self) -> str:
        return self.spec.id

    def encode(self, images):
        if images.shape[-1] != images.shape[-2]:
            raise ValueError(f"square inputs required, got {tuple(images.shape[-2:])}")
        self.spec.check_size(images.shape[-1])
        return self.encoder(images)

    def decode(self, feat):
        if feat.shape[1] != self.spec.channels:
            raise ValueError(f"decoder expects {self.spec.channels} channels, got {feat.shape[1]}")
        return self.decoder(feat)

    def reconstruct(self, images):
        return self.decode(self.encode(images))

    def discriminate(self, images):
        return self.discriminator(images)

    def logits(self, feat):
        return self.classifier(feat)

    def classify(self, feat):
        return F.softmax(self.classifier(feat), dim=1)

    def predict_proba(self, images):
        return self.classify(self.encode(images))

    def partition(self) -> "ParamPartition":
        return ParamPartition.from_module(self)


@dataclass
class ParamPartition:
    theta_e: dict[str, nn.Parameter]
    theta_d: dict[str, nn.Parameter]
    theta_ad: dict[str, nn.Parameter]
    theta_m: dict[str, nn.Parameter]

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamPartition":
        groups = {g: {} for g in GROUPS}
        for name, p in module.named_parameters():
            group = next((g for prefix, g in _GROUP_PREFIX.items() if name.startswith(prefix)), None)
            if group is None:
                raise ValueError(f"parameter {name!r} belongs to no group")
            groups[group][name] = p
        return cls(**groups)

    def groups(self) -> dict[str, dict[str, nn.Parameter]]:
        return {g: getattr(self, g) for g in GROUPS}

    def params(self, *groups: str) -> list[nn.Parameter]:
        return [p for g in groups for p in getattr(self, g).values()]

    def names(self, *groups: str) -> list[str]:
        return [n for g in groups for n in getattr(self, g)]


def _he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_params(spec, seed: int = 0) -> VesRecNet:
    """Seeded He (fan-in) initialisation of all four blocks.

    Output heads use a scaled-down normal so initial predictions stay near
    uniform.
    """
    if isinstance(spec, str):
        spec = get_backbone(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = VesRecNet(spec)
        _he_init(net)
        for head in (net.classifier.fc, net.discriminator.head):
            nn.init.normal_(head.weight, std=1.0 / math.sqrt(head.in_features))
            nn.init.zeros_(head.bias)
    return net


def fuse_features(feat_a: torch.Tensor, feat_b: torch.Tensor) -> torch.Tensor:
    """Average-pool both feature maps and concatenate them as an N x (Ca+Cb) x 1 x 1 map."""
    return torch.cat([feat_a.mean(dim=(2, 3), keepdim=True), feat_b.mean(dim=(2, 3), keepdim=True)], dim=1)


class FusedEncoder(nn.Module):
    """Two backbones run on the same image; their pooled features are concatenated."""

    def __init__(self, spec_a, spec_b):
        super().__init__()
        self.spec_a = get_backbone(spec_a) if isinstance(spec_a, str) else spec_a
        self.spec_b = get_backbone(spec_b) if isinstance(spec_b, str) else spec_b
        self.a = self.spec_a.build_encoder()
        self.b = self.spec_b.build_encoder()

    @property
    def channels(self) -> int:
        return self.spec_a.channels + self.spec_b.channels

    def forward(self, images):
        return fuse_features(self.a(images), self.b(images))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# A checkpoint is an uncompressed .npz archive. Every member is a named
# array: floating tensors are stored as little-endian float32 ('<f4'),
# integer buffers as little-endian int64 ('<i8'). The member "__meta__"
# holds UTF-8 JSON with at least {"format", "version", "backbone",
# "image_size", "seed", "step"}.

CHECKPOINT_FORMAT = "vesrec-checkpoint"
CHECKPOINT_VERSION = 1
META_KEY = "__meta__"


def _to_le_array(t) -> np.ndarray:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype("<f4")
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        return arr.astype("<i8")
    raise TypeError(f"unsupported dtype {arr.dtype}")


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    required = {"backbone", "image_size", "seed", "step"}
    missing = required - set(meta)
    if missing:
        raise ValueError(f"checkpoint meta missing {sorted(missing)}")
    if META_KEY in tensors:
        raise ValueError(f"{META_KEY!r} is reserved")
    record = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **meta}
    arrays = {name: _to_le_array(t) for name, t in tensors.items()}
    arrays[META_KEY] = np.frombuffer(json.dumps(record, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    if META_KEY not in arrays:
        raise ValueError(f"{path}: not a checkpoint (no {META_KEY})")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
    return arrays, meta


def model_arrays(net: nn.Module, prefix: str = "model.") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in net.state_dict().items()}


def load_model_arrays(net: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "model.") -> None:
    state = net.state_dict()
    for k, v in state.items():
        key = prefix + k
        if key not in arrays:
            raise ValueError(f"checkpoint lacks tensor {key!r}")
        src = torch.from_numpy(np.array(arrays[key])).to(v.dtype)
        if src.shape != v.shape:
            raise ValueError(f"{key}: shape {tuple(src.shape)} != {tuple(v.shape)}")
        state[k] = src
    net.load_state_dict(state)


def save_model(path, net: VesRecNet, image_size: int, seed: int, step: int = 0, **extra) -> None:
    save_checkpoint(path, model_arrays(net), {"backbone": net.backbone_id, "image_size": image_size,
                                              "seed": seed, "step": step, **extra})


def load_model(path) -> tuple[VesRecNet, dict]:
    arrays, meta = load_checkpoint(path)
    net = VesRecNet(get_backbone(meta["backbone"]))
    load_model_arrays(net, arrays)
    return net, meta
