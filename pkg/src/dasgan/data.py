"""Core value types, class-label conventions and dataset containers.

Label convention (shared by every module):

* 0 = Other (non-epithelium)
* 1 = TC- (PD-L1 negative epithelium)
* 2 = TC+ (PD-L1 positive epithelium)
* 255 = ignore (unannotated; excluded from losses and metrics)

Patches live in ``[0, 1]`` as ``H x W x 3`` float arrays; masks are ``H x W``
integer arrays. Both are frozen after construction so they can be shared
freely between threads.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError, InvalidLabelError

OTHER = 0
TC_NEG = 1
TC_POS = 2
IGNORE = 255
NUM_CLASSES = 3

CLASS_NAMES = {OTHER: "Other", TC_NEG: "TC-", TC_POS: "TC+"}

#: Overlay colors for rendered predictions (Other green, TC- red, TC+ blue).
OVERLAY_COLORS = {OTHER: (80, 170, 80), TC_NEG: (200, 60, 60), TC_POS: (60, 80, 200)}


class Domain(enum.Enum):
    """Stain domain tag: A is PD-L1-like, B is CK-like."""

    A = "A"
    B = "B"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImagePatch:
    """An RGB patch in [0, 1] with a stain-domain tag and an opaque id."""

    pixels: np.ndarray
    domain: Domain
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInputError(f"patch must be HxWx3, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise InvalidInputError("patch pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px.astype(np.float32, copy=False)))

    @property
    def shape(self) -> tuple:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class labels over {0, 1, 2, 255}."""

    labels: np.ndarray
    domain: Domain

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise InvalidInputError(f"mask must be HxW, got shape {lab.shape}")
        lab = lab.astype(np.uint8, copy=False)
        legal = np.isin(lab, (OTHER, TC_NEG, TC_POS, IGNORE))
        if not legal.all():
            bad = np.unique(np.asarray(self.labels)[~legal])
            raise InvalidLabelError(f"mask contains illegal labels {bad.tolist()}")
        object.__setattr__(self, "labels", _freeze(lab))

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def labeled_fraction(self) -> float:
        return float(np.mean(self.labels != IGNORE))


@dataclass(frozen=True)
class ClassPosterior:
    """Per-pixel distribution over {Other, TC-, TC+}, shape H x W x 3."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != NUM_CLASSES:
            raise InvalidInputError(f"posterior must be HxWx3, got shape {p.shape}")
        if p.size:
            if p.min() < 0.0:
                raise InvalidInputError("posterior entries must be non-negative")
            sums = p.sum(axis=2)
            if np.abs(sums - 1.0).max() > 1e-5:
                raise InvalidInputError("per-pixel posterior must sum to 1 within 1e-5")
        object.__setattr__(self, "probs", _freeze(p))


@dataclass(frozen=True)
class DatasetSplit:
    """Train/test/validation partitions of (patch, mask) pairs.

    Domain-A pairs live in ``train_a``; domain-B pairs carry the binary CK
    epithelium mask embedded as class 1 (the conditioned variants are derived
    at sampling time). No patch id may appear in more than one split.
    """

    train_a: list = field(default_factory=list)
    train_b: list = field(default_factory=list)
    test: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def __post_init__(self):
        seen = {}
        for name in ("train_a", "train_b", "test", "validation"):
            for patch, _ in getattr(self, name):
                if patch.id in seen and seen[patch.id] != name:
                    raise InvalidInputError(
                        f"patch id {patch.id!r} appears in both {seen[patch.id]} and {name}"
                    )
                seen[patch.id] = name


def encode_one_hot(mask: LabelMask | np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """One-hot encode a label map; ignore pixels become all-zero rows.

    Channel ``c`` is 1 where ``label == c``. Labels ``>= num_classes`` other
    than the ignore value raise :class:`InvalidLabelError`.
    """
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    bad = (labels >= num_classes) & (labels != IGNORE)
    if bad.any():
        raise InvalidLabelError(
            f"labels {np.unique(labels[bad]).tolist()} exceed num_classes={num_classes}"
        )
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float32)
    for c in range(num_classes):
        out[..., c] = labels == c
    return out


def argmax_mask(posterior: ClassPosterior, domain: Domain = Domain.A) -> LabelMask:
    """Collapse a posterior to hard labels; ties break toward the smallest class."""
    labels = np.argmax(posterior.probs, axis=2).astype(np.uint8)
    return LabelMask(labels=labels, domain=domain)


# ---------------------------------------------------------------------------
# File formats: 8-bit PNGs for patches and masks, CSV manifest for splits.
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.csv"
_MANIFEST_FIELDS = ("image", "mask", "domain", "split")


def save_patch(patch: ImagePatch, path) -> None:
    arr = np.clip(np.rint(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_patch(path, domain: Domain, patch_id: str = "") -> ImagePatch:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return ImagePatch(pixels=arr, domain=domain, id=patch_id or Path(path).stem)


def save_mask(mask: LabelMask, path) -> None:
    Image.fromarray(mask.labels, mode="L").save(path)


def load_mask(path, domain: Domain) -> LabelMask:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    return LabelMask(labels=arr, domain=domain)


def save_overlay(mask: LabelMask, path) -> None:
    """Render a mask as a color overlay image (ignore pixels stay black)."""
    rgb = np.zeros(mask.labels.shape + (3,), dtype=np.uint8)
    for cls, color in OVERLAY_COLORS.items():
        rgb[mask.labels == cls] = color
    Image.fromarray(rgb, mode="RGB").save(path)


def write_manifest(root, rows) -> Path:
    """Write a split manifest: one (image, mask, domain, split) row per pair."""
    root = Path(root)
    path = root / MANIFEST_NAME
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in _MANIFEST_FIELDS})
    return path


def save_split(split: DatasetSplit, root) -> Path:
    """Materialize a split to ``root``: PNG pairs plus a manifest."""
    root = Path(root)
    rows = []
    for name, pairs in (
        ("train_a", split.train_a),
        ("train_b", split.train_b),
        ("test", split.test),
        ("validation", split.validation),
    ):
        sub = root / name
        sub.mkdir(parents=True, exist_ok=True)
        for patch, mask in pairs:
            img_rel = f"{name}/{patch.id}.png"
            msk_rel = f"{name}/{patch.id}_mask.png"
            save_patch(patch, root / img_rel)
            save_mask(mask, root / msk_rel)
            rows.append(
                {"image": img_rel, "mask": msk_rel, "domain": patch.domain.value, "split": name}
            )
    write_manifest(root, rows)
    return root


def load_split(root) -> DatasetSplit:
    """Load a split previously written by :func:`save_split`."""
    root = Path(root)
    buckets = {"train_a": [], "train_b": [], "test": [], "validation": []}
    with open(root / MANIFEST_NAME, newline="") as fh:
        for row in csv.DictReader(fh):
            domain = Domain(row["domain"])
            patch = load_patch(root / row["image"], domain)
            mask = load_mask(root / row["mask"], domain)
            if row["split"] not in buckets:
                raise InvalidInputError(f"unknown split {row['split']!r} in manifest")
            buckets[row["split"]].append((patch, mask))
    return DatasetSplit(**buckets)
