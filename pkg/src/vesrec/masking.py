"""Patch masks anchored on vessel pixels and the (masked input, masked target) pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .vessel import ANCHORS, EdgePixelSet

Rect = tuple[int, int, int, int]  # top, left, height, width


@dataclass(frozen=True)
class MaskConfig:
    n_patches: int = 4
    patch_size: Optional[int] = None  # None -> image_size // 8
    mask_anchor: str = "edge"
    patch_size_jitter: int = 0

    def __post_init__(self):
        if self.n_patches < 1:
            raise ValueError(f"n_patches must be >= 1, got {self.n_patches}")
        if self.patch_size is not None and self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.mask_anchor not in ANCHORS:
            raise ValueError(f"mask_anchor must be one of {ANCHORS}")
        if self.patch_size_jitter < 0:
            raise ValueError("patch_size_jitter must be >= 0")

    def size_for(self, image_size: int) -> int:
        s = self.patch_size if self.patch_size is not None else max(1, image_size // 8)
        if s > image_size:
            raise ValueError(f"patch_size {s} exceeds image size {image_size}")
        return s


@dataclass
class PatchMaskSet:
    rects: list[Rect]
    rendered: np.ndarray  # H x W uint8 in {0, 1}
    image_size: int
    centers: list[tuple[int, int]] = field(default_factory=list)  # pre-clamp centers
    fallback_uniform: bool = False

    @property
    def popcount(self) -> int:
        return int(self.rendered.sum())


@dataclass
class SSLPair:
    x_hat: torch.Tensor
    y_hat: torch.Tensor
    mask: PatchMaskSet


def render_mask(rects: Sequence[Rect], height: int, width: int) -> np.ndarray:
    out = np.zeros((height, width), dtype=np.uint8)
    for top, left, h, w in rects:
        if h < 1 or w < 1 or top < 0 or left < 0 or top + h > height or left + w > width:
            raise ValueError(f"rect {(top, left, h, w)} not inside {height}x{width}")
        out[top:top + h, left:left + w] = 1
    return out


def _clamped_rect(center: tuple[int, int], size: int, height: int, width: int) -> Rect:
    top = min(max(center[0] - size // 2, 0), height - size)
    left = min(max(center[1] - size // 2, 0), width - size)
    return int(top), int(left), size, size


def sample_patch_masks(edges: EdgePixelSet, cfg: MaskConfig, rng: np.random.Generator) -> PatchMaskSet:
    """Draw ``cfg.n_patches`` square patches centred on uniformly chosen anchor pixels.

    Rects are shifted inside the image rather than cropped. An empty anchor
    set falls back to uniform centres and sets ``fallback_uniform``.
    """
    height, width = edges.shape
    if height != width:
        raise ValueError("square images expected")
    base = cfg.size_for(height)
    fallback = len(edges) == 0
    rects, centers = [], []
    for _ in range(cfg.n_patches):
        if fallback:
            center = (int(rng.integers(0, height)), int(rng.integers(0, width)))
        else:
            r, c = edges.coords[rng.integers(0, len(edges))]
            center = (int(r), int(c))
        size = base
        if cfg.patch_size_jitter:
            size = int(np.clip(base + rng.integers(-cfg.patch_size_jitter, cfg.patch_size_jitter + 1), 1, height))
        centers.append(center)
        rects.append(_clamped_rect(center, size, height, width))
    return PatchMaskSet(rects, render_mask(rects, height, width), height, centers, fallback)


def make_ssl_pair(image: torch.Tensor, maskset: PatchMaskSet) -> SSLPair:
    if image.shape[-2:] != maskset.rendered.shape:
        raise ValueError(f"image {tuple(image.shape)} and mask {maskset.rendered.shape} disagree")
    b = torch.as_tensor(maskset.rendered, dtype=image.dtype, device=image.device)
    return SSLPair(x_hat=(1 - b) * image, y_hat=b * image, mask=maskset)


def batch_masks(edge_sets: Sequence[EdgePixelSet], cfg: MaskConfig, seeds: Sequence[np.random.SeedSequence]):
    """Sample one mask per image; returns (N x 1 x H x W float tensor, list of PatchMaskSet)."""
    sets = [sample_patch_masks(e, cfg, np.random.default_rng(s)) for e, s in zip(edge_sets, seeds)]
    stacked = torch.from_numpy(np.stack([m.rendered for m in sets]).astype(np.float32))[:, None]
    return stacked, sets


def split_masked(images: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched pair construction: ((1 - B) * x, B * x)."""
    b = b.to(images.dtype)
    return (1 - b) * images, b * images


def render_panel(image: np.ndarray, vessel: np.ndarray, maskset: PatchMaskSet) -> np.ndarray:
    """Side-by-side audit panel: image | vessel map | mask overlay | masked input | masked target.

    Returns an H x 5W x 3 uint8 array.
    """
    img = np.asarray(image, dtype=np.float32).transpose(1, 2, 0)
    b = maskset.rendered.astype(np.float32)[..., None]
    ves = np.repeat(np.asarray(vessel, dtype=np.float32)[..., None], 3, axis=2)
    overlay = img.copy()
    for top, left, h, w in maskset.rects:
        overlay[top, left:left + w] = overlay[top + h - 1, left:left + w] = (0, 1, 0)
        overlay[top:top + h, left] = overlay[top:top + h, left + w - 1] = (0, 1, 0)
    panel = np.concatenate([img, ves, overlay, (1 - b) * img, b * img], axis=1)
    return np.clip(np.rint(panel * 255), 0, 255).astype(np.uint8)
