"""Training engine.

Phase 1 fits the classifier on labelled source images. Phase 2 adds the
target-domain terms and alternates a generator update (encoder, decoder,
classifier) with a discriminator update. Every random choice is derived
from (seed, stage, epoch, step), so a run resumed from an epoch checkpoint
replays the uninterrupted run exactly.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig
from .data import NUM_GRADES, DatasetManifest, load_image, sample_seed, stratified_holdout, subsample_labels
from .evaluation.rotation import rotation_pretext_batch
from .losses import (
    LossReport, NonFiniteLossError, PseudoLabelStore, loss_adv, loss_class, loss_consistency, loss_entropy,
    loss_rec, loss_total, update_pseudo_labels,
)
from .masking import batch_masks, split_masked
from .model import (
    VesRecNet, get_backbone, init_params, load_checkpoint, load_model_arrays, model_arrays, save_checkpoint,
)
from .vessel import EdgePixelSet, anchor_pixels, resolve_vessel_masks

log = logging.getLogger(__name__)

GEN_GROUPS = ("theta_e", "theta_d", "theta_m")
CLS_GROUPS = ("theta_e", "theta_m")


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def cyclical_lr(step: int, lr_min: float, lr_max: float, cycle_length: int) -> float:
    """Triangular cycle: lr_min at the cycle start, lr_max half-way through."""
    if lr_min >= lr_max:
        raise ValueError(f"lr_min ({lr_min}) must be below lr_max ({lr_max})")
    if cycle_length < 2 or cycle_length % 2:
        raise ValueError("cycle_length must be an even integer >= 2")
    p = (step % cycle_length) / (cycle_length / 2)
    return lr_min + (lr_max - lr_min) * (p if p <= 1 else 2 - p)


def lr_range_test(step_fn: Callable[[float], float], lr_span=(1e-5, 1.0), n_steps: int = 100,
                  beta: float = 0.98, diverge_factor: float = 4.0) -> tuple[float, float]:
    """Sweep the learning rate geometrically from low to high, one ``step_fn(lr)`` per value.

    ``step_fn`` performs one optimisation step at ``lr`` and returns the
    loss measured before the update. The loss is smoothed with a
    bias-corrected moving average; ``lr_max`` is where the smoothed loss
    falls fastest against log(lr) and ``lr_min = lr_max / 10``. The sweep
    stops once the smoothed loss exceeds ``diverge_factor`` times its best.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    low, high = lr_span
    if not 0 < low < high:
        raise ValueError(f"need 0 < low < high, got {lr_span}")
    lrs = low * (high / low) ** (np.arange(n_steps) / max(n_steps - 1, 1))
    avg, best, smoothed = 0.0, math.inf, []
    for i, lr in enumerate(lrs):
        loss = float(step_fn(float(lr)))
        if not math.isfinite(loss):
            break
        avg = beta * avg + (1 - beta) * loss
        s = avg / (1 - beta ** (i + 1))
        if i > 0 and s > diverge_factor * best:
            break
        best = min(best, s)
        smoothed.append(s)
    if len(smoothed) < 3:
        log.warning("loss diverged at the start of the range test; using conservative bounds")
        return low, 10 * low
    slopes = np.gradient(np.array(smoothed), np.log(lrs[:len(smoothed)]))
    lr_max = float(lrs[int(np.argmin(slopes))])
    return lr_max / 10, lr_max


# ---------------------------------------------------------------------------
# data held in memory for one image size
# ---------------------------------------------------------------------------

@dataclass
class DomainData:
    manifest: DatasetManifest
    images: torch.Tensor  # N x 3 x S x S float32
    labels: torch.Tensor  # N int64, -1 = unlabeled
    anchors: Optional[list[EdgePixelSet]] = None

    @property
    def ids(self) -> list[str]:
        return self.manifest.ids

    @property
    def size(self) -> int:
        return int(self.images.shape[-1])

    def __len__(self):
        return len(self.manifest)

    @property
    def labeled_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels.numpy() >= 0)

    @classmethod
    def load(cls, manifest: DatasetManifest, size: int, cfg: Optional[TrainConfig] = None,
             with_anchors: bool = False) -> "DomainData":
        images = torch.from_numpy(np.stack([load_image(manifest.resolve(e.image_path), size)
                                            for e in manifest.entries])) if len(manifest) else \
            torch.zeros((0, 3, size, size))
        labels = torch.tensor([-1 if e.label is None else e.label for e in manifest.entries], dtype=torch.long)
        anchors = None
        if with_anchors:
            cfg = cfg or TrainConfig()
            masks = resolve_vessel_masks(manifest, size, images.numpy(), cfg.vessel.fallback,
                                         cfg.vessel.fallback_radius, cfg.vessel.fallback_k)
            anchors = [anchor_pixels(m, cfg.mask.mask_anchor) for m in masks]
        return cls(manifest, images, labels, anchors)

    def subset(self, idx: Sequence[int]) -> "DomainData":
        idx = list(map(int, idx))
        return DomainData(self.manifest.subset(idx), self.images[idx], self.labels[idx],
                          None if self.anchors is None else [self.anchors[i] for i in idx])

    def with_manifest_labels(self, manifest: DatasetManifest) -> "DomainData":
        labels = torch.tensor([-1 if e.label is None else e.label for e in manifest.entries], dtype=torch.long)
        return DomainData(manifest, self.images, labels, self.anchors)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


_STREAM = {"phase1": 1, "phase2_src": 2, "phase2_tgt": 3, "finetune": 4, "rot": 5, "lrfind": 6}


def _cycled_order(rng: np.random.Generator, idx: np.ndarray, length: int) -> np.ndarray:
    if len(idx) == 0:
        raise ValueError("cannot draw batches from an empty set")
    reps = -(-length // len(idx))
    return np.concatenate([idx[rng.permutation(len(idx))] for _ in range(reps)])[:length]


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    net: VesRecNet
    seed: int = 0
    image_size: int = 32
    step: int = 0
    epoch: int = 0
    stage: int = 0
    phase: int = 0  # last phase entered (0 = fresh)
    phase_epoch: int = 0  # epochs completed inside the current phase
    best_val_metric: float = -math.inf
    pseudo: PseudoLabelStore = field(default_factory=PseudoLabelStore)
    optimizers: dict = field(default_factory=dict)
    rot_head: Optional[nn.Linear] = None
    history: list = field(default_factory=list)
    lr_bounds: Optional[list] = None  # set by the range test, reused on resume

    @property
    def params(self):
        return self.net.partition()

    def optimizer(self, name: str, cfg: TrainConfig) -> torch.optim.SGD:
        """SGD with momentum; update v <- mu v + g, theta <- theta - lr v."""
        if name not in self.optimizers:
            part = self.net.partition()
            groups = {"cls": CLS_GROUPS, "finetune": CLS_GROUPS, "gen": GEN_GROUPS, "disc": ("theta_ad",)}[name]
            params = part.params(*groups)
            if name == "gen" and self.rot_head is not None:
                params = params + list(self.rot_head.parameters())
            self.optimizers[name] = torch.optim.SGD(params, lr=cfg.lr_min, momentum=cfg.momentum)
        return self.optimizers[name]

    def ensure_rot_head(self):
        if self.rot_head is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(self.seed + 7919)
                self.rot_head = nn.Linear(self.net.spec.channels, 4)
        return self.rot_head

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.net.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # -- checkpointing ---------------------------------------------------

    def _named_params(self) -> dict[str, nn.Parameter]:
        named = dict(self.net.named_parameters())
        if self.rot_head is not None:
            named.update({f"rot_head.{k}": p for k, p in self.rot_head.named_parameters()})
        return named

    def save(self, path, **extra) -> None:
        tensors = model_arrays(self.net)
        if self.rot_head is not None:
            tensors.update({f"aux.rot_head.{k}": v for k, v in self.rot_head.state_dict().items()})
        ids = {id(p): n for n, p in self._named_params().items()}
        for name, opt in self.optimizers.items():
            for group in opt.param_groups:
                for p in group["params"]:
                    buf = opt.state.get(p, {}).get("momentum_buffer")
                    if buf is not None:
                        tensors[f"opt.{name}.{ids[id(p)]}"] = buf
        meta = {
            "backbone": self.net.backbone_id, "image_size": self.image_size, "seed": self.seed,
            "step": self.step, "epoch": self.epoch, "stage": self.stage, "phase": self.phase,
            "phase_epoch": self.phase_epoch,
            "best_val_metric": None if math.isinf(self.best_val_metric) else self.best_val_metric,
            "optimizers": sorted(self.optimizers), "pseudo": self.pseudo.to_records(),
            "has_rot_head": self.rot_head is not None, "history": self.history, "lr_bounds": self.lr_bounds,
            **extra,
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path, cfg: TrainConfig) -> "TrainState":
        arrays, meta = load_checkpoint(path)
        net = init_params(meta["backbone"], meta["seed"])
        load_model_arrays(net, arrays)
        state = cls(net=net, seed=meta["seed"], image_size=meta["image_size"], step=meta["step"],
                    epoch=meta.get("epoch", 0), stage=meta.get("stage", 0), phase=meta.get("phase", 0),
                    phase_epoch=meta.get("phase_epoch", 0),
                    best_val_metric=-math.inf if meta.get("best_val_metric") is None else meta["best_val_metric"],
                    pseudo=PseudoLabelStore.from_records(meta.get("pseudo", [])),
                    history=meta.get("history", []), lr_bounds=meta.get("lr_bounds"))
        if meta.get("has_rot_head"):
            head = state.ensure_rot_head()
            head.load_state_dict({k: torch.from_numpy(np.array(arrays[f"aux.rot_head.{k}"]))
                                  for k in head.state_dict()})
        named = state._named_params()
        for name in meta.get("optimizers", []):
            opt = state.optimizer(name, cfg)
            for group in opt.param_groups:
                for p in group["params"]:
                    key = f"opt.{name}.{next(n for n, q in named.items() if q is p)}"
                    if key in arrays:
                        opt.state[p]["momentum_buffer"] = torch.from_numpy(np.array(arrays[key])).to(p.dtype)
        return state


def new_state(cfg: TrainConfig) -> TrainState:
    spec = get_backbone(cfg.backbone)
    for s in cfg.image_sizes:
        spec.check_size(s)
    state = TrainState(net=init_params(spec, cfg.seed), seed=cfg.seed, image_size=cfg.image_sizes[0])
    if cfg.method == "rotation_ssl":
        state.ensure_rot_head()
    return state


@contextlib.contextmanager
def frozen(params: Sequence[nn.Parameter]):
    """Temporarily exclude ``params`` from autograd so they receive no gradient."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


@contextlib.contextmanager
def frozen_bn_stats(module: nn.Module):
    """Forward passes inside use batch statistics but leave BatchNorm running statistics untouched."""
    bns = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(parts: dict, step: int) -> None:
    for name, value in parts.items():
        if isinstance(value, torch.Tensor):
            value = value.detach()
        if not math.isfinite(float(value)):
            raise NonFiniteLossError(name, step)


def class_weights_for(labels: torch.Tensor) -> torch.Tensor:
    """Inverse-frequency weights N / (K * n_g); absent grades get weight 0."""
    counts = torch.bincount(labels[labels >= 0], minlength=NUM_GRADES).double()
    w = torch.where(counts > 0, counts.sum() / (NUM_GRADES * counts.clamp_min(1)), torch.zeros_like(counts))
    return w.float()


class TrainLog:
    """Newline-delimited JSON log, mirrored in memory."""

    def __init__(self, path=None, truncate_from_step: Optional[int] = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            kept = []
            if truncate_from_step is not None and self.path.exists():
                kept = [json.loads(l) for l in self.path.read_text().splitlines() if l.strip()]
                kept = [r for r in kept if r["step"] < truncate_from_step]
            self.path.write_text("".join(json.dumps(r) + "\n" for r in kept))
            self.rows.extend(kept)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(row) + "\n")


@torch.no_grad()
def predict_proba(net: VesRecNet, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was_training = net.training
    net.eval()
    try:
        out = [net.predict_proba(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    finally:
        net.train(was_training)
    return torch.cat(out) if out else torch.zeros((0, NUM_GRADES))


def predict_grades(net: VesRecNet, images: torch.Tensor) -> np.ndarray:
    return predict_proba(net, images).argmax(dim=1).numpy()


def labeled_accuracy(net: VesRecNet, data: DomainData, idx: Optional[Sequence[int]] = None) -> float:
    idx = data.labeled_idx if idx is None else np.asarray(idx, dtype=int)
    if len(idx) == 0:
        return float("nan")
    pred = predict_grades(net, data.images[idx])
    return float((pred == data.labels[idx].numpy()).mean())


# ---------------------------------------------------------------------------
# supervised phases (phase 1 and fine-tuning)
# ---------------------------------------------------------------------------

def _supervised(state: TrainState, data: DomainData, cfg: TrainConfig, max_epochs: int, opt_name: str,
                stream: str, phase: int, train_log: Optional[TrainLog]) -> TrainState:
    labeled = data.labeled_idx
    if len(labeled) == 0:
        raise ValueError("supervised training needs at least one labelled image")
    if max_epochs == 0:
        return state
    sub = data.subset(labeled)
    tr_rel, val_rel = stratified_holdout(sub.manifest, cfg.val_fraction, cfg.seed)
    if not val_rel:
        val_rel = tr_rel
    tr_idx = np.asarray(tr_rel, dtype=int)
    net, opt = state.net, state.optimizer(opt_name, cfg)
    weights = class_weights_for(sub.labels[tr_idx]) if cfg.class_weights else None
    # the starting weights are a candidate too, so extra epochs never lower validation accuracy
    best_acc, best_state, bad = labeled_accuracy(net, sub, val_rel), copy.deepcopy(net.state_dict()), 0
    for epoch in range(max_epochs):
        order = tr_idx[_rng(cfg.seed, _STREAM[stream], state.stage, epoch).permutation(len(tr_idx))]
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            lr = cyclical_lr(state.step, cfg.lr_min, cfg.lr_max, cfg.cycle_length)
            _set_lr(opt, lr)
            net.train()
            probs = net.predict_proba(sub.images[batch])
            loss = loss_class(probs, sub.labels[batch], weights)
            _check_finite({"l_class": loss.item()}, state.step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if train_log is not None:
                train_log.append(LossReport(step=state.step, lr=lr, l_class=loss.item(),
                                            l_total=loss.item(), phase=phase).to_dict())
            state.step += 1
        state.epoch += 1
        acc = labeled_accuracy(net, sub, val_rel)
        if acc > best_acc:
            best_acc, best_state, bad = acc, copy.deepcopy(net.state_dict()), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    net.load_state_dict(best_state)
    state.best_val_metric = best_acc
    return state


def train_phase1(state: TrainState, source: DomainData, cfg: TrainConfig,
                 train_log: Optional[TrainLog] = None) -> TrainState:
    """Classification loss only, on theta_e and theta_m, with patience-based early stopping."""
    state.phase, state.phase_epoch = 1, 0
    return _supervised(state, source, cfg, cfg.epochs_for("phase1"), "cls", "phase1", 1, train_log)


def finetune(state: TrainState, target: DomainData, fraction: float, cfg: TrainConfig,
             train_log: Optional[TrainLog] = None) -> TrainState:
    """Supervised training on a stratified ``fraction`` of the target labels; 0 leaves the state as is."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    if fraction == 0.0:
        return state
    labeled_manifest = subsample_labels(target.manifest, fraction, cfg.seed)
    data = target.with_manifest_labels(labeled_manifest)
    state.phase, state.phase_epoch = 3, 0
    return _supervised(state, data, cfg, cfg.epochs_for("finetune"), "finetune", "finetune", 3, train_log)


# ---------------------------------------------------------------------------
# phase 2
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: torch.Tensor
    labels: torch.Tensor
    ids: list
    anchors: Optional[list] = None


def _batch(data: DomainData, idx: np.ndarray) -> Batch:
    idx = [int(i) for i in idx]
    return Batch(data.images[idx], data.labels[idx], [data.ids[i] for i in idx],
                 None if data.anchors is None else [data.anchors[i] for i in idx])


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.sqrt(sum(sq))) if sq else 0.0


def generator_losses(state: TrainState, src: Batch, tgt: Batch, cfg: TrainConfig, b_mask=None,
                     class_weights=None) -> tuple[torch.Tensor, dict, dict]:
    """Forward pass of the generator side. Returns (total, scalar parts, tensors for the disc pass)."""
    net, active = state.net, cfg.phases[1].active_losses
    parts, keep = {}, {}
    need_masked = {"rec", "adv", "c"} & active
    # Target-side inputs share one encoder pass, which is also the only pass
    # that updates BatchNorm running statistics; the source pass normalises
    # with its own batch statistics. Evaluation on the target thus uses
    # target statistics, matching how target features looked in training.
    chunks = {}
    if {"c", "e"} & active:
        chunks["tgt"] = tgt.images
    if need_masked:
        x_hat, y_hat = split_masked(tgt.images, b_mask)
        chunks["masked"] = x_hat
    if "rot" in active:
        head = state.ensure_rot_head()
        rotated, k = rotation_pretext_batch(tgt.images, _rng(cfg.seed, _STREAM["rot"], state.step))
        chunks["rot"] = rotated
    feats = {}
    if chunks:
        joint = net.encode(torch.cat(list(chunks.values())))
        feats = dict(zip(chunks, joint.split([len(v) for v in chunks.values()])))
    if "class" in active:
        with frozen_bn_stats(net.encoder):
            parts["l_class"] = loss_class(net.classify(net.encode(src.images)), src.labels, class_weights)
    if need_masked and {"rec", "adv"} & active:
        recon = net.decode(feats["masked"])
        keep["recon"] = recon
        if "rec" in active:
            parts["l_rec"] = loss_rec(recon, y_hat, b_mask)
        if "adv" in active:
            d_fake = net.discriminate(recon)
            parts["l_adv_g"] = loss_adv(torch.full_like(d_fake, 0.5), d_fake, cfg.adv_saturating)[1]
    if {"c", "e"} & active:
        p_t = net.classify(feats["tgt"])
        keep["p_target"] = p_t
        if "c" in active:
            p_fixed = p_t.detach()
            if cfg.pseudo_hard:
                grades = state.pseudo.grades_for(tgt.ids, default=p_fixed.argmax(1).numpy())
                p_fixed = F.one_hot(torch.as_tensor(grades), NUM_GRADES).to(p_t.dtype)
            weight = (p_t.detach().max(dim=1).values >= cfg.pseudo_min_conf) if cfg.pseudo_min_conf > 0 else None
            parts["l_c"] = loss_consistency(p_fixed, net.classify(feats["masked"]), weight)
        if "e" in active:
            parts["l_e"] = loss_entropy(p_t)
    total = loss_total(parts, cfg.loss, state.step)
    if "rot" in active:
        parts["l_rot"] = F.cross_entropy(head(feats["rot"].mean(dim=(2, 3))), k)
        total = total + cfg.rot_weight * parts["l_rot"]
    return total, parts, keep


def alternating_step(state: TrainState, src: Batch, tgt: Batch, cfg: TrainConfig, class_weights=None,
                     isolation_probe: Optional[Callable[[str], None]] = None) -> tuple[TrainState, LossReport]:
    """One phase-2 step.

    (i) generator update of theta_e, theta_d, theta_m with theta_ad frozen;
    (ii) discriminator update of theta_ad on real target images against
    detached reconstructions, everything else frozen; (iii) refresh the
    pseudo labels of the target batch from post-update predictions.
    ``isolation_probe`` is called with "gen" and "disc" after each sub-step.
    """
    net, part = state.net, state.net.partition()
    active = cfg.phases[1].active_losses
    lr = cyclical_lr(state.step, cfg.lr_min, cfg.lr_max, cfg.cycle_length)
    report = LossReport(step=state.step, lr=lr, phase=2)
    b_mask = None
    if {"rec", "adv", "c"} & active:
        if tgt.anchors is None:
            raise ValueError("target batch has no vessel anchors")
        seeds = [sample_seed(cfg.seed, sid, state.stage, state.step) for sid in tgt.ids]
        b_mask, _ = batch_masks(tgt.anchors, cfg.mask, seeds)

    gen_opt = state.optimizer("gen", cfg)
    _set_lr(gen_opt, lr)
    net.train()
    keep, parts = {}, {}
    for _ in range(cfg.gen_steps):
        with frozen(part.params("theta_ad")):
            total, parts, keep = generator_losses(state, src, tgt, cfg, b_mask, class_weights)
            _check_finite({**parts, "l_total": total}, state.step)
            gen_opt.zero_grad(set_to_none=True)
            total.backward()
            report.grad_norms["gen"] = _grad_norm(part.params(*GEN_GROUPS))
            gen_opt.step()
    report.l_total = total.item()
    for name, value in parts.items():
        setattr(report, name, float(value.detach()) if isinstance(value, torch.Tensor) else float(value))
    if isolation_probe:
        isolation_probe("gen")

    if "adv" in active:
        disc_opt = state.optimizer("disc", cfg)
        _set_lr(disc_opt, lr * cfg.disc_lr_scale)
        fake = keep["recon"].detach()
        for _ in range(cfg.disc_steps):
            with frozen(part.params(*GEN_GROUPS)):
                d = net.discriminate(torch.cat([tgt.images, fake]))
                l_d, _ = loss_adv(d[:len(fake)], d[len(fake):])
                _check_finite({"l_adv_d": l_d}, state.step)
                disc_opt.zero_grad(set_to_none=True)
                l_d.backward()
                report.grad_norms["disc"] = _grad_norm(part.params("theta_ad"))
                disc_opt.step()
        report.l_adv_d = l_d.item()
    if isolation_probe:
        isolation_probe("disc")

    update_pseudo_labels(state.pseudo, tgt.ids, predict_proba(net, tgt.images), state.step)
    state.step += 1
    return state, report


def steps_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return -(-max(n_source, n_target) // batch_size)


def train_phase2(state: TrainState, source: DomainData, target: DomainData, cfg: TrainConfig,
                 train_log: Optional[TrainLog] = None, checkpoint_dir=None) -> TrainState:
    """Run ``phase2_epochs`` epochs of alternating steps, resuming at ``state.phase_epoch`` if already in phase 2."""
    if state.phase != 2:
        state.phase, state.phase_epoch = 2, 0
    epochs = cfg.epochs_for("phase2")
    src_idx = source.labeled_idx
    tgt_idx = np.arange(len(target))
    if len(src_idx) == 0 or len(tgt_idx) == 0:
        raise ValueError("phase 2 needs labelled source images and target images")
    n_steps = steps_per_epoch(len(src_idx), len(tgt_idx), cfg.batch_size)
    weights = class_weights_for(source.labels[src_idx]) if cfg.class_weights else None
    bs = cfg.batch_size
    for epoch in range(state.phase_epoch, epochs):
        src_order = _cycled_order(_rng(cfg.seed, _STREAM["phase2_src"], state.stage, epoch), src_idx, n_steps * bs)
        tgt_order = _cycled_order(_rng(cfg.seed, _STREAM["phase2_tgt"], state.stage, epoch), tgt_idx, n_steps * bs)
        for i in range(n_steps):
            sl = slice(i * bs, (i + 1) * bs)
            state, report = alternating_step(state, _batch(source, src_order[sl]), _batch(target, tgt_order[sl]),
                                             cfg, weights)
            if train_log is not None:
                train_log.append(report.to_dict())
        state.epoch += 1
        state.phase_epoch = epoch + 1
        if checkpoint_dir is not None:
            state.save(Path(checkpoint_dir) / f"stage{state.stage}_phase2_epoch{epoch + 1:03d}.npz")
    return state


# ---------------------------------------------------------------------------
# learning-rate range test on the real model
# ---------------------------------------------------------------------------

def find_lr_bounds(state: TrainState, source: DomainData, cfg: TrainConfig) -> tuple[float, float]:
    """Range test on a throwaway copy of the classifier path; ``state`` is left untouched."""
    net = copy.deepcopy(state.net)
    opt = torch.optim.SGD(net.partition().params(*CLS_GROUPS), lr=cfg.lr_find_span[0], momentum=cfg.momentum)
    idx = source.labeled_idx
    order = _cycled_order(_rng(cfg.seed, _STREAM["lrfind"]), idx, cfg.lr_find_steps * cfg.batch_size)
    counter = iter(range(cfg.lr_find_steps))

    def step_fn(lr):
        i = next(counter)
        batch = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
        _set_lr(opt, lr)
        net.train()
        loss = loss_class(net.predict_proba(source.images[batch]), source.labels[batch])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        return loss.item()

    return lr_range_test(step_fn, cfg.lr_find_span, cfg.lr_find_steps)


# ---------------------------------------------------------------------------
# full run with progressive resizing
# ---------------------------------------------------------------------------

def _needs_anchors(cfg: TrainConfig) -> bool:
    return cfg.method != "source_only" and bool({"rec", "adv", "c"} & cfg.phases[-1].active_losses)


def load_stage_data(source_manifest, target_manifest, size: int, cfg: TrainConfig):
    source = DomainData.load(source_manifest, size, cfg)
    target = DomainData.load(target_manifest, size, cfg, with_anchors=_needs_anchors(cfg))
    return source, target


def progressive_resize_run(cfg: TrainConfig, source_manifest: DatasetManifest, target_manifest: DatasetManifest,
                           train_log: Optional[TrainLog] = None, checkpoint_dir=None,
                           resume: Optional[TrainState] = None, phase1_cache: Optional[dict] = None,
                           data_cache: Optional[dict] = None) -> TrainState:
    """Phase 1 (+ phase 2 unless source-only) at each size in ``cfg.image_sizes``, carrying weights forward.

    ``phase1_cache`` maps a key to a finished stage-0 phase-1 state so
    several methods sharing a source set and seed skip the identical
    warm-up. ``data_cache`` holds decoded images per (manifest, size).
    """
    spec = get_backbone(cfg.backbone)
    for s in cfg.image_sizes:
        spec.check_size(s)
    state = resume if resume is not None else new_state(cfg)
    if cfg.method == "rotation_ssl":
        state.ensure_rot_head()
    start_stage = state.stage if resume is not None else 0
    if cfg.lr_find and state.lr_bounds is not None:
        cfg = _with_lr(cfg, *state.lr_bounds)
    for stage, size in enumerate(cfg.image_sizes):
        if stage < start_stage:
            continue
        resuming_here = resume is not None and stage == start_stage and state.phase >= 1
        state.stage, state.image_size = stage, size
        if data_cache is not None:
            key = (id(source_manifest), id(target_manifest), size, _needs_anchors(cfg))
            if key not in data_cache:
                data_cache[key] = load_stage_data(source_manifest, target_manifest, size, cfg)
            source, target = data_cache[key]
        else:
            source, target = load_stage_data(source_manifest, target_manifest, size, cfg)
        entry = {"stage": stage, "size": size, "start_digest": state.digest()}
        if not resuming_here:
            if stage == 0 and cfg.lr_find:
                lo, hi = find_lr_bounds(state, source, cfg)
                cfg = _with_lr(cfg, lo, hi)
                state.lr_bounds = [lo, hi]
                entry["lr_bounds"] = [lo, hi]
            cache_key = (id(source_manifest), cfg.seed, size) if stage == 0 and phase1_cache is not None else None
            if cache_key is not None and cache_key in phase1_cache:
                cached, rows = phase1_cache[cache_key]
                state = copy.deepcopy(cached)
                state.rot_head = None
                if cfg.method == "rotation_ssl":
                    state.ensure_rot_head()
                if train_log is not None:
                    for row in rows:
                        train_log.append(dict(row))
            else:
                rows_before = len(train_log.rows) if train_log is not None else 0
                train_phase1(state, source, cfg, train_log)
                if cache_key is not None:
                    rows = [] if train_log is None else [dict(r) for r in train_log.rows[rows_before:]]
                    phase1_cache[cache_key] = (copy.deepcopy(state), rows)
            entry["phase1_val_acc"] = state.best_val_metric
        if cfg.method != "source_only" and not (resuming_here and state.phase > 2):
            train_phase2(state, source, target, cfg, train_log, checkpoint_dir)
        entry["end_digest"] = state.digest()
        state.history.append(entry)
        state.phase, state.phase_epoch = 0, 0
    state.stage = len(cfg.image_sizes) - 1
    return state


def _with_lr(cfg: TrainConfig, lo: float, hi: float) -> TrainConfig:
    import dataclasses

    return dataclasses.replace(cfg, lr_min=lo, lr_max=hi)


run_training = progressive_resize_run
