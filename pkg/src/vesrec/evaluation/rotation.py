"""Four-way rotation pretext task used by the rotation-SSL baseline."""

from __future__ import annotations

import numpy as np
import torch


def rotate90(images: torch.Tensor, k) -> torch.Tensor:
    """Rotate counter-clockwise by k * 90 degrees over the last two dims (exact index permutation)."""
    return torch.rot90(images, int(k) % 4, dims=(-2, -1))


def rotation_pretext_batch(images: torch.Tensor, rng: np.random.Generator):
    """Rotate each image by a uniformly drawn multiple of 90 degrees; labels are the multiples."""
    if images.shape[-1] != images.shape[-2]:
        raise ValueError(f"rotation pretext needs square images, got {tuple(images.shape[-2:])}")
    ks = rng.integers(0, 4, size=images.shape[0])
    rotated = torch.stack([rotate90(img, k) for img, k in zip(images, ks)])
    return rotated, torch.as_tensor(ks, dtype=torch.long)
