"""Objective terms, their weighted combination and the pseudo-label store.

Every loss takes batched tensors and returns the batch mean. Unbatched
inputs (a single probability vector or a single C x H x W image) are
promoted to a batch of one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import NUM_GRADES

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
ADV_EPS = 1e-7
TERMS = ("l_class", "l_rec", "l_adv_g", "l_c", "l_e")


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, step: Optional[int] = None):
        self.term, self.step = term, step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite loss in term {term!r}{where}")


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_adv: float = 0.05
    lambda_c: float = 1.0
    lambda_e: float = 0.1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _batched(x: torch.Tensor, ndim: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == ndim - 1 else x


def loss_rec(prediction: torch.Tensor, y_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked mean squared error: sum((B * pred - y_hat)^2) / (popcount(B) * C) per sample.

    ``mask`` is N x 1 x H x W (or H x W / 1 x H x W for one image). Samples
    with an empty mask contribute 0.
    """
    if prediction.shape != y_hat.shape:
        raise ValueError(f"prediction {tuple(prediction.shape)} vs target {tuple(y_hat.shape)}")
    pred, target = _batched(prediction, 4), _batched(y_hat, 4)
    b = mask.to(pred.dtype)
    while b.dim() < 4:
        b = b.unsqueeze(0)
    if b.shape[-2:] != pred.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match images {tuple(prediction.shape)}")
    channels = pred.shape[1]
    sq = ((b * pred - target) ** 2).sum(dim=(1, 2, 3))
    count = b.expand_as(pred).sum(dim=(1, 2, 3))
    per_sample = torch.where(count > 0, sq / count.clamp_min(1), torch.zeros_like(sq))
    return per_sample.mean()


def loss_adv(d_real: torch.Tensor, d_fake: torch.Tensor, saturating: bool = False):
    """Discriminator and generator sides of the adversarial game.

    l_d = -[log D(x) + log(1 - D(F(x_hat)))]; l_g = -log D(F(x_hat)) or,
    with ``saturating``, log(1 - D(F(x_hat))).
    """
    d_real, d_fake = torch.as_tensor(d_real), torch.as_tensor(d_fake)
    if ((d_real <= 0) | (d_real >= 1)).any() or ((d_fake <= 0) | (d_fake >= 1)).any():
        log.warning("discriminator output outside (0, 1); clamping to [%g, 1 - %g]", ADV_EPS, ADV_EPS)
    d_real = d_real.clamp(ADV_EPS, 1 - ADV_EPS)
    d_fake = d_fake.clamp(ADV_EPS, 1 - ADV_EPS)
    l_d = -(torch.log(d_real) + torch.log1p(-d_fake)).mean()
    l_g = torch.log1p(-d_fake).mean() if saturating else -torch.log(d_fake).mean()
    return l_d, l_g


def loss_class(probs: torch.Tensor, labels, class_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Negative log-likelihood of the true grade (weighted mean when ``class_weights`` is given)."""
    probs = _batched(probs, 2)
    labels = torch.as_tensor(labels, dtype=torch.long, device=probs.device).reshape(-1)
    if labels.numel() != probs.shape[0]:
        raise ValueError("one label per distribution required")
    if ((labels < 0) | (labels >= probs.shape[1])).any():
        raise ValueError(f"labels must lie in 0..{probs.shape[1] - 1}")
    nll = -torch.log(probs.gather(1, labels[:, None]).squeeze(1).clamp_min(PROB_FLOOR))
    if class_weights is None:
        return nll.mean()
    w = class_weights.to(probs.dtype)[labels]
    return (w * nll).sum() / w.sum()


def loss_consistency(p_fixed: torch.Tensor, p_aug: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """KL(p_fixed || p_aug). ``p_fixed`` is always detached; 0 * log(0 / q) = 0.

    ``weight`` (N,) optionally masks per-sample terms; the result is then
    averaged over the unmasked samples.
    """
    p = _batched(p_fixed, 2).detach()
    q = _batched(p_aug, 2).clamp_min(PROB_FLOOR)
    terms = torch.where(p > 0, p * (torch.log(p.clamp_min(PROB_FLOOR)) - torch.log(q)), torch.zeros_like(q))
    kl = terms.sum(dim=1)
    if weight is None:
        return kl.mean()
    w = weight.to(kl.dtype)
    return (w * kl).sum() / w.sum().clamp_min(1.0)


def loss_entropy(probs: torch.Tensor) -> torch.Tensor:
    p = _batched(probs, 2)
    return -(p * torch.log(p.clamp_min(PROB_FLOOR))).sum(dim=1).mean()


def loss_total(parts: dict, w: LossWeights, step: Optional[int] = None):
    """l_class + lambda_rec l_rec + lambda_adv l_adv_g + lambda_c l_c + lambda_e l_e.

    Missing terms count as 0. Raises NonFiniteLossError naming the first
    non-finite term.
    """
    for term in TERMS:
        value = parts.get(term, 0.0)
        if isinstance(value, torch.Tensor):
            value = value.detach()
        if not math.isfinite(float(value)):
            raise NonFiniteLossError(term, step)
    get = lambda t: parts.get(t, 0.0)
    return (get("l_class") + w.lambda_rec * get("l_rec") + w.lambda_adv * get("l_adv_g")
            + w.lambda_c * get("l_c") + w.lambda_e * get("l_e"))


@dataclass
class LossReport:
    step: int
    lr: float
    l_class: float = 0.0
    l_rec: float = 0.0
    l_adv_g: float = 0.0
    l_adv_d: float = 0.0
    l_c: float = 0.0
    l_e: float = 0.0
    l_rot: float = 0.0
    l_total: float = 0.0
    phase: int = 2
    grad_norms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PseudoLabel:
    grade: int
    confidence: float
    step_updated: int


class PseudoLabelStore(dict):
    """sample id -> PseudoLabel, refreshed from the latest predictions."""

    def grades_for(self, ids: Sequence[str], default: Optional[np.ndarray] = None) -> np.ndarray:
        out = np.empty(len(ids), dtype=np.int64)
        for i, sid in enumerate(ids):
            if sid in self:
                out[i] = self[sid].grade
            elif default is not None:
                out[i] = default[i]
            else:
                raise KeyError(sid)
        return out

    def to_records(self) -> list[list]:
        return [[k, v.grade, v.confidence, v.step_updated] for k, v in self.items()]

    @classmethod
    def from_records(cls, records) -> "PseudoLabelStore":
        return cls({k: PseudoLabel(int(g), float(c), int(s)) for k, g, c, s in records})


def update_pseudo_labels(store: PseudoLabelStore, batch_ids: Sequence[str], probs, step: int) -> PseudoLabelStore:
    """Overwrite entries with argmax grade and max probability; ties go to the lower grade."""
    arr = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    arr = np.atleast_2d(arr)
    if arr.shape != (len(batch_ids), NUM_GRADES):
        raise ValueError(f"expected {len(batch_ids)} x {NUM_GRADES} probabilities, got {arr.shape}")
    grades = np.argmax(arr, axis=1)  # first maximum wins
    for sid, g, row in zip(batch_ids, grades, arr):
        store[sid] = PseudoLabel(int(g), float(row[g]), int(step))
    return store
