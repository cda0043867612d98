"""Vessel maps and their boundary pixels.

Masks come from, in order of preference: a precomputed PNG referenced by
the manifest, synthetic ground truth, or a classical black-hat fallback.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.morphology import black_tophat, disk

from .data import DatasetManifest, ValidationError

MASK_SOURCES = ("precomputed", "fallback", "ground_truth_synthetic")
ANCHORS = ("edge", "any_vessel_pixel")


@dataclass
class VesselMask:
    mask: np.ndarray  # H x W bool
    source: str = "precomputed"

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 2:
            raise ValidationError(f"vessel mask must be 2-D, got shape {self.mask.shape}")
        if self.source not in MASK_SOURCES:
            raise ValidationError(f"unknown mask source {self.source!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class EdgePixelSet:
    coords: np.ndarray  # n x 2 int, row-major order
    shape: tuple[int, int]

    def __len__(self):
        return len(self.coords)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.coords}


def load_vessel_mask(path, target_size: Optional[int] = None) -> VesselMask:
    path = Path(path)
    with Image.open(path) as im:
        if len(im.getbands()) != 1:
            raise ValidationError(f"{path}: vessel mask must be single-channel, got mode {im.mode}")
        if target_size is not None and im.size != (target_size, target_size):
            im = im.resize((target_size, target_size), Image.NEAREST)
        arr = np.asarray(im)
    if arr.dtype == bool:
        return VesselMask(arr, "precomputed")
    return VesselMask(arr > 127, "precomputed")


def fallback_vessel_extract(image, radius: Optional[int] = None, k: float = 1.5) -> VesselMask:
    """Green channel -> black-hat (disk) -> threshold at mean + k * std."""
    img = np.asarray(image, dtype=np.float64)
    green = img[1]
    if radius is None:
        radius = max(3, green.shape[0] // 32)
    bh = black_tophat(green, disk(radius))
    std = bh.std()
    if std == 0:
        return VesselMask(np.zeros_like(green, dtype=bool), "fallback")
    return VesselMask(bh > bh.mean() + k * std, "fallback")


_CROSS = ndimage.generate_binary_structure(2, 1)


def extract_edges(mask: VesselMask) -> EdgePixelSet:
    """Vessel pixels with a non-vessel 4-neighbour; pixels on the image border count as edges."""
    m = mask.mask
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    coords = np.argwhere(m & ~interior)
    return EdgePixelSet(coords.astype(np.int64), m.shape)


def anchor_pixels(mask: VesselMask, anchor: str = "edge") -> EdgePixelSet:
    if anchor == "edge":
        return extract_edges(mask)
    if anchor == "any_vessel_pixel":
        return EdgePixelSet(np.argwhere(mask.mask).astype(np.int64), mask.shape)
    raise ValueError(f"mask_anchor must be one of {ANCHORS}, got {anchor!r}")


def resolve_vessel_masks(manifest: DatasetManifest, size: int, images=None, use_fallback: bool = True,
                         fallback_radius: Optional[int] = None, fallback_k: float = 1.5,
                         synthetic: bool = False) -> list[VesselMask]:
    """One mask per manifest entry: mask file when listed, else the classical fallback.

    ``images`` (N x 3 x size x size) is only needed for entries without a mask file.
    """
    masks = []
    for i, entry in enumerate(manifest.entries):
        if entry.mask_path:
            vm = load_vessel_mask(manifest.resolve(entry.mask_path), size)
            if synthetic:
                vm.source = "ground_truth_synthetic"
        elif use_fallback:
            if images is None:
                raise ValueError("images are required to run the fallback extractor")
            vm = fallback_vessel_extract(np.asarray(images[i]), fallback_radius, fallback_k)
        else:
            raise ValidationError(f"{entry.id}: no vessel mask and fallback disabled")
        masks.append(vm)
    return masks
