"""Dataset ingestion: CSV manifests, stratified folds, label subsampling and
the synthetic two-domain fundus generator used for desk-scale experiments.

Manifest CSV layout (UTF-8, header row required)::

    id,image_path,mask_path,label

``mask_path`` and ``label`` may be empty. Relative paths are resolved
against the directory holding the manifest.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

NUM_GRADES = 5
DOMAINS = ("source", "target")
MANIFEST_COLUMNS = ("id", "image_path", "mask_path", "label")


class ValidationError(ValueError):
    """Input data violates a documented contract."""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: Optional[str] = None
    label: Optional[int] = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    domain: str
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValidationError(f"unknown domain {self.domain!r}")

    def __len__(self):
        return len(self.entries)

    @property
    def counts(self) -> dict[int, int]:
        return dict(sorted(Counter(e.label for e in self.entries if e.label is not None).items()))

    @property
    def labeled(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label is not None]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return replace(self, entries=[self.entries[i] for i in indices])


@dataclass
class FundusSample:
    id: str
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    label: Optional[int]
    domain: str

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] != img.shape[2]:
            raise ValidationError(f"{self.id}: expected square 3xHxW image, got {img.shape}")
        if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise ValidationError(f"{self.id}: pixel values must be finite and in [0, 1]")
        if self.label is not None and not 0 <= self.label < NUM_GRADES:
            raise ValidationError(f"{self.id}: label {self.label} outside 0..4")


@dataclass(frozen=True)
class FoldAssignment:
    folds: tuple[int, ...]
    k: int
    seed: int

    def indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.folds) if f == fold]

    def complement(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.folds) if f != fold]


def _parse_label(raw: str, row: int) -> Optional[int]:
    raw = raw.strip()
    if raw == "":
        return None
    try:
        label = int(raw)
    except ValueError:
        raise ValidationError(f"row {row}: label {raw!r} is not an integer") from None
    if not 0 <= label < NUM_GRADES:
        raise ValidationError(f"row {row}: label {label} outside 0..4")
    return label


def load_manifest(path, domain: str) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise ValidationError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
        entries, seen_ids, seen_paths = [], set(), set()
        # row numbers count the header as row 1
        for row_no, row in enumerate(reader, start=2):
            sample_id = row["id"].strip()
            if not sample_id:
                raise ValidationError(f"row {row_no}: empty id")
            if sample_id in seen_ids:
                raise ValidationError(f"row {row_no}: duplicate id {sample_id!r}")
            image_path = row["image_path"].strip()
            if image_path in seen_paths:
                raise ValidationError(f"row {row_no}: duplicate image path {image_path!r}")
            seen_ids.add(sample_id)
            seen_paths.add(image_path)
            entries.append(ManifestEntry(
                id=sample_id,
                image_path=image_path,
                mask_path=row["mask_path"].strip() or None,
                label=_parse_label(row["label"], row_no),
            ))
    return DatasetManifest(entries=entries, domain=domain, root=path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([e.id, e.image_path, e.mask_path or "", "" if e.label is None else e.label])


def split_kfold(manifest: DatasetManifest, k: int, seed: int) -> FoldAssignment:
    """Stratified k-fold assignment.

    Entries are permuted within each grade, the per-grade lists are laid
    end to end and folds are dealt round-robin along that sequence. Each
    grade then lands floor/ceil(n_g / k) times in every fold and fold sizes
    differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if any(e.label is None for e in manifest.entries):
        raise ValidationError("split_kfold requires every entry to be labeled")
    if k > len(manifest):
        raise ValueError(f"k={k} exceeds number of entries ({len(manifest)})")
    rng = np.random.default_rng(seed)
    order = []
    for grade in range(NUM_GRADES):
        idx = np.array([i for i, e in enumerate(manifest.entries) if e.label == grade], dtype=int)
        order.extend(idx[rng.permutation(len(idx))].tolist())
    folds = [0] * len(manifest)
    for pos, i in enumerate(order):
        folds[i] = pos % k
    return FoldAssignment(folds=tuple(folds), k=k, seed=seed)


def _grade_permutations(manifest: DatasetManifest, seed: int) -> dict[int, list[int]]:
    rng = np.random.default_rng(seed)
    perms = {}
    for grade in range(NUM_GRADES):
        idx = np.array([i for i, e in enumerate(manifest.entries) if e.label == grade], dtype=int)
        perms[grade] = idx[rng.permutation(len(idx))].tolist()
    return perms


def _keep_count(n: int, fraction: float) -> int:
    return min(n, int(math.floor(fraction * n + 0.5)))


def subsample_labels(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Keep labels on a stratified ``fraction`` of entries; the rest become unlabeled.

    The labeled set is a prefix of a seed-fixed per-grade permutation, so
    the labeled sets for increasing fractions are nested.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    keep = set()
    for grade, perm in _grade_permutations(manifest, seed).items():
        keep.update(perm[:_keep_count(len(perm), fraction)])
    entries = [e if (e.label is None or i in keep) else replace(e, label=None)
               for i, e in enumerate(manifest.entries)]
    return replace(manifest, entries=entries)


def stratified_holdout(manifest: DatasetManifest, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Split labeled entry indices into (train, holdout) with ``fraction`` held out per grade.

    Every grade with at least two entries contributes at least one holdout
    entry when ``fraction > 0``.
    """
    train, held = [], []
    for grade, perm in _grade_permutations(manifest, seed).items():
        n_hold = _keep_count(len(perm), fraction)
        if fraction > 0 and n_hold == 0 and len(perm) >= 2:
            n_hold = 1
        held.extend(perm[:n_hold])
        train.extend(perm[n_hold:])
    return sorted(train), sorted(held)


# ---------------------------------------------------------------------------
# image IO
# ---------------------------------------------------------------------------

def load_image(path, size: Optional[int] = None) -> np.ndarray:
    """Read an image as a float32 3xHxW array in [0, 1], resized to ``size`` x ``size``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_samples(manifest: DatasetManifest, size: int) -> list[FundusSample]:
    return [FundusSample(e.id, load_image(manifest.resolve(e.image_path), size), e.label, manifest.domain)
            for e in manifest.entries]


# ---------------------------------------------------------------------------
# synthetic two-domain generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainShift:
    brightness_delta: float = -0.12
    channel_gain: tuple[float, float, float] = (0.75, 1.15, 1.3)
    blur_radius: float = 0.8

    @property
    def is_identity(self) -> bool:
        return self.brightness_delta == 0 and tuple(self.channel_gain) == (1.0, 1.0, 1.0) and self.blur_radius == 0


@dataclass(frozen=True)
class SynthConfig:
    n_per_domain: int = 600
    image_size: int = 32
    grade_rule: tuple[int, int, int, int] = (1, 3, 5, 8)
    shift: DomainShift = DomainShift()
    seed: int = 0
    # both domains share per-index content streams (target_i is shift(source_i))
    paired: bool = False

    def __post_init__(self):
        rule = tuple(self.grade_rule)
        if len(rule) != NUM_GRADES - 1 or any(b <= a for a, b in zip(rule, rule[1:])) or rule[0] < 1:
            raise ValidationError(f"grade_rule must be 4 strictly increasing positive thresholds, got {list(rule)}")
        if self.image_size < 16:
            raise ValidationError(f"image_size must be >= 16, got {self.image_size}")
        if self.n_per_domain < 1:
            raise ValidationError("n_per_domain must be >= 1")
        if len(self.shift.channel_gain) != 3:
            raise ValidationError("shift.channel_gain needs 3 values")
        if self.shift.blur_radius < 0:
            raise ValidationError("shift.blur_radius must be >= 0")


def grade_from_count(count: int, thresholds: Sequence[int]) -> int:
    """Grade = number of thresholds the lesion count reaches."""
    return int(sum(count >= t for t in thresholds))


def _count_for_grade(grade: int, thresholds: Sequence[int], rng: np.random.Generator) -> int:
    lo = 0 if grade == 0 else thresholds[grade - 1]
    hi = thresholds[grade] - 1 if grade < len(thresholds) else thresholds[-1] + 2
    return int(rng.integers(lo, hi + 1))


def point_polyline_distance(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Euclidean distance from each (row, col) point to a polyline."""
    p = np.asarray(points, dtype=np.float64)[..., None, :]
    a, b = vertices[:-1], vertices[1:]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.sqrt(((p - closest) ** 2).sum(-1)).min(-1)


def _random_polyline(size: int, rng: np.random.Generator, n_segments: int = 5) -> np.ndarray:
    hi = size - 1.0
    along = np.linspace(0.0, hi, n_segments + 1)
    along[1:-1] += rng.uniform(-0.3, 0.3, n_segments - 1) * (hi / n_segments)
    across = rng.uniform(0.15 * hi, 0.85 * hi, n_segments + 1)
    verts = np.stack([across, along], axis=1)  # endpoints on left/right borders
    if rng.random() < 0.5:
        verts = verts[:, ::-1]  # endpoints on top/bottom borders
    return np.ascontiguousarray(verts)


_BACKGROUND = np.array([0.80, 0.42, 0.22])
_VESSEL = np.array([0.45, 0.10, 0.06])
_LESION = np.array([0.98, 0.90, 0.35])


def render_synthetic(size: int, grade: int, thresholds: Sequence[int], rng: np.random.Generator) -> dict:
    """Draw one source-style image.

    Returns a dict with ``image`` (3xHxW float32), ``vessel`` (HxW bool
    ground truth), ``vertices``, ``lesion_centers``, ``lesion_radii``,
    ``lesion_count`` and ``grade``.
    """
    d_max = size / 10.0
    width = size / 20.0
    verts = _random_polyline(size, rng)

    rr, cc = np.mgrid[0:size, 0:size]
    pix = np.stack([rr, cc], axis=-1).astype(np.float64)
    dist = point_polyline_distance(pix.reshape(-1, 2), verts).reshape(size, size)

    shade = 1.0 + 0.08 * ((rr - size / 2) * rng.uniform(-1, 1) + (cc - size / 2) * rng.uniform(-1, 1)) / size
    img = _BACKGROUND[:, None, None] * shade[None]
    vessel_alpha = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    img = img * (1 - vessel_alpha) + _VESSEL[:, None, None] * vessel_alpha

    count = _count_for_grade(grade, thresholds, rng)
    seg_len = np.linalg.norm(np.diff(verts, axis=0), axis=1)
    centers, radii = [], []
    for _ in range(count):
        seg = rng.choice(len(seg_len), p=seg_len / seg_len.sum())
        on_line = verts[seg] + rng.uniform() * (verts[seg + 1] - verts[seg])
        angle, r_off = rng.uniform(0, 2 * np.pi), rng.uniform(0, d_max)
        c = np.clip(on_line + r_off * np.array([np.sin(angle), np.cos(angle)]), 0, size - 1)
        radius = rng.uniform(2.0, max(2.0, size / 16.0))
        alpha = np.clip(radius + 0.5 - np.sqrt(((pix - c) ** 2).sum(-1)), 0.0, 1.0)
        img = img * (1 - alpha) + _LESION[:, None, None] * alpha
        centers.append(c.tolist())
        radii.append(float(radius))

    img = img + rng.normal(0.0, 0.015, img.shape)
    return {
        "image": np.clip(img, 0.0, 1.0).astype(np.float32),
        "vessel": dist <= width / 2,
        "vertices": verts,
        "lesion_centers": centers,
        "lesion_radii": radii,
        "lesion_count": count,
        "grade": grade_from_count(count, thresholds),
        "max_lesion_distance": d_max,
    }


def apply_shift(image: np.ndarray, shift: DomainShift) -> np.ndarray:
    out = np.asarray(image, dtype=np.float32)
    if shift.is_identity:
        return out.copy()
    if shift.blur_radius > 0:
        out = np.stack([gaussian_filter(ch, sigma=shift.blur_radius, mode="nearest") for ch in out])
    gain = np.asarray(shift.channel_gain, dtype=np.float32)[:, None, None]
    return np.clip(out * gain + shift.brightness_delta, 0.0, 1.0).astype(np.float32)


def _sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def synth_domain_sample(config: SynthConfig, domain: str, index: int) -> dict:
    """Generate sample ``index`` of ``domain`` in memory (no disk IO)."""
    stream = 0 if (config.paired or domain == "source") else 1
    rng = _sample_rng(config.seed, stream, index)
    grade = int(rng.integers(0, NUM_GRADES))
    sample = render_synthetic(config.image_size, grade, config.grade_rule, rng)
    if domain == "target":
        sample["image"] = apply_shift(sample["image"], config.shift)
    return sample


def synth_two_domain(config: SynthConfig, out_dir) -> tuple[DatasetManifest, DatasetManifest]:
    """Write both synthetic domains (PNG images, PNG vessel masks, CSV manifests).

    Layout under ``out_dir``: ``<domain>/images``, ``<domain>/masks``,
    ``<domain>.csv`` and ``<domain>_ground_truth.jsonl``.
    """
    out_dir = Path(out_dir)
    manifests = []
    for domain in DOMAINS:
        (out_dir / domain / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / domain / "masks").mkdir(parents=True, exist_ok=True)
        entries, truth = [], []
        prefix = "src" if domain == "source" else "tgt"
        for i in range(config.n_per_domain):
            s = synth_domain_sample(config, domain, i)
            sid = f"{prefix}_{i:05d}"
            img_rel = f"{domain}/images/{sid}.png"
            mask_rel = f"{domain}/masks/{sid}.png"
            save_image(s["image"], out_dir / img_rel)
            save_mask(s["vessel"], out_dir / mask_rel)
            entries.append(ManifestEntry(sid, img_rel, mask_rel, s["grade"]))
            truth.append({
                "id": sid, "grade": s["grade"], "lesion_count": s["lesion_count"],
                "vertices": s["vertices"].tolist(), "lesion_centers": s["lesion_centers"],
                "lesion_radii": s["lesion_radii"], "max_lesion_distance": s["max_lesion_distance"],
            })
        manifest = DatasetManifest(entries, domain, root=out_dir)
        write_manifest(manifest, out_dir / f"{domain}.csv")
        with open(out_dir / f"{domain}_ground_truth.jsonl", "w", encoding="utf-8") as f:
            for row in truth:
                f.write(json.dumps(row) + "\n")
        manifests.append(manifest)
    return manifests[0], manifests[1]


def sample_seed(global_seed: int, sample_id: str, *extra: int) -> np.random.SeedSequence:
    """Per-sample seed sequence derived from (global seed, sample id, extra counters)."""
    return np.random.SeedSequence([global_seed, zlib.crc32(sample_id.encode("utf-8")), *extra])
