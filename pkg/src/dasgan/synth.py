"""Procedural generator of two unpaired stain domains with exact masks.

Domain B mimics a CK-stained slide: epithelium blobs rendered in the marker
stain on a lightly counterstained background. Domain A mimics a PD-L1
slide: the same kind of blobs are split into marker-stained (positive) and
strongly counterstained (negative) epithelium, and small marker-colored
distractor speckles are sprinkled outside the epithelium to mimic
non-specific staining. Masks are exact by construction.

Every patch is a pure function of (config, domain, index); domain A and B
use disjoint seed streams, so the two domains are unpaired by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .ck import (
    BinaryMask,
    COUNTERSTAIN_CHANNEL,
    MARKER_CHANNEL,
    StainMatrix,
    compose_stains,
    default_stain_matrix,
    morphological_close,
)
from .data import DatasetSplit, Domain, IGNORE, ImagePatch, LabelMask, OTHER, TC_NEG, TC_POS
from .errors import InvalidArgumentError

_DOMAIN_CODE = {"A": 0xA, "B": 0xB, "split": 0xF}


@dataclass(frozen=True)
class Palette:
    """Per-domain stain density ranges (optical density units).

    Wide ranges are deliberate: a small annotated sample cannot cover the
    per-patch staining variability, which is the point of the domain-
    adaptation experiments.
    """

    b_marker: tuple = (0.50, 0.95)
    b_background: tuple = (0.03, 0.11)
    a_positive: tuple = (0.45, 0.95)
    a_negative: tuple = (0.40, 0.92)
    a_background: tuple = (0.03, 0.14)
    texture: float = 0.15


@dataclass(frozen=True)
class SynthConfig:
    patch_size: int = 64
    n_blobs: tuple = (2, 5)
    blob_scale: tuple = (0.10, 0.26)
    positive_fraction: float = 0.5
    distractor_density: float = 10.0
    noise_sigma: float = 0.015
    palette: Palette = field(default_factory=Palette)
    seed: int = 7

    def __post_init__(self):
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise InvalidArgumentError("positive_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class SplitSizes:
    train_a: int = 160
    train_b: int = 160
    test: int = 16
    validation: int = 24
    annotation_fraction: float = 1.0


def _rng_for(config: SynthConfig, domain_code: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, domain_code, index]))


def _texture(rng, size: int, amplitude: float) -> np.ndarray:
    """Smooth multiplicative texture field around 1."""
    f = gaussian_filter(rng.standard_normal((size, size)), sigma=3.0)
    f /= max(np.abs(f).max(), 1e-9)
    return 1.0 + amplitude * f


def _blob(rng, size: int, scale: tuple) -> np.ndarray:
    """One organic blob: a radius-wobbled disk support."""
    margin = scale[0] * size
    cy, cx = rng.uniform(margin, size - margin, size=2)
    radius = rng.uniform(*scale) * size
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    wobble = gaussian_filter(rng.standard_normal((size, size)), sigma=max(radius / 2.0, 1.5))
    wobble /= max(np.abs(wobble).max(), 1e-9)
    support = dist <= radius * (1.0 + 0.3 * wobble)
    support[int(round(cy)) % size, int(round(cx)) % size] = True
    return support


def _blob_layout(rng, config: SynthConfig) -> list:
    lo, hi = config.n_blobs
    count = int(rng.integers(lo, hi + 1))
    return [_blob(rng, config.patch_size, config.blob_scale) for _ in range(count)]


def _distractors(rng, size: int, density: float, keep_out: np.ndarray) -> np.ndarray:
    """Small speckles outside ``keep_out`` (the epithelium support).

    The per-patch count is itself jittered around ``density`` so distractor
    load varies between patches.
    """
    speckles = np.zeros((size, size), dtype=bool)
    count = int(rng.poisson(density * rng.uniform(0.3, 1.8)))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(count):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(1.0, 3.2)
        speckles |= ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
    return speckles & ~keep_out


def _finish_pixels(rng, rgb: np.ndarray, noise_sigma: float) -> np.ndarray:
    if noise_sigma > 0:
        rgb = rgb + rng.normal(0.0, noise_sigma, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def _render_b(rng, config: SynthConfig, support: np.ndarray,
              stains: StainMatrix) -> np.ndarray:
    size = config.patch_size
    pal = config.palette
    densities = np.zeros((size, size, 3))
    densities[..., COUNTERSTAIN_CHANNEL] = (
        rng.uniform(*pal.b_background) * _texture(rng, size, pal.texture))
    marker = rng.uniform(*pal.b_marker) * _texture(rng, size, pal.texture)
    densities[..., MARKER_CHANNEL] = np.where(support, marker, 0.0)
    return _finish_pixels(rng, compose_stains(densities, stains), config.noise_sigma)


def _render_a(rng, config: SynthConfig, labels: np.ndarray, distractors: np.ndarray,
              stains: StainMatrix) -> np.ndarray:
    size = config.patch_size
    pal = config.palette
    densities = np.zeros((size, size, 3))
    background = rng.uniform(*pal.a_background) * _texture(rng, size, pal.texture)
    negative = rng.uniform(*pal.a_negative) * _texture(rng, size, pal.texture)
    positive = rng.uniform(*pal.a_positive) * _texture(rng, size, pal.texture)
    densities[..., COUNTERSTAIN_CHANNEL] = np.where(labels == TC_NEG, negative, background)
    densities[..., MARKER_CHANNEL] = np.where(labels == TC_POS, positive, 0.0)
    densities[..., MARKER_CHANNEL] = np.where(
        distractors, positive * rng.uniform(0.85, 1.0), densities[..., MARKER_CHANNEL])
    return _finish_pixels(rng, compose_stains(densities, stains), config.noise_sigma)


def generate_b(config: SynthConfig, n: int, start_index: int = 0,
               stains: StainMatrix | None = None) -> list:
    """CK-like patches with exact binary epithelium masks."""
    stains = stains or default_stain_matrix()
    out = []
    for i in range(start_index, start_index + n):
        rng = _rng_for(config, _DOMAIN_CODE["B"], i)
        support = np.zeros((config.patch_size, config.patch_size), dtype=bool)
        for blob in _blob_layout(rng, config):
            support |= blob
        # Epithelium is morphologically smooth: pre-close the support so the
        # labeling pipeline's own closing is a no-op on clean patches.
        support = morphological_close(BinaryMask(values=support), 2).values
        pixels = _render_b(rng, config, support, stains)
        out.append((
            ImagePatch(pixels=pixels, domain=Domain.B, id=f"b-{i:05d}"),
            BinaryMask(values=support),
        ))
    return out


def _labels_a(rng, config: SynthConfig) -> np.ndarray:
    labels = np.zeros((config.patch_size, config.patch_size), dtype=np.uint8)
    for blob in _blob_layout(rng, config):
        cls = TC_POS if rng.random() < config.positive_fraction else TC_NEG
        labels[blob] = cls
    return labels


def generate_a(config: SynthConfig, n: int, start_index: int = 0,
               stains: StainMatrix | None = None) -> list:
    """PD-L1-like patches with exact three-class masks.

    Distractor speckles share the positive-stain color but keep label 0.
    """
    stains = stains or default_stain_matrix()
    out = []
    for i in range(start_index, start_index + n):
        rng = _rng_for(config, _DOMAIN_CODE["A"], i)
        labels = _labels_a(rng, config)
        distractors = _distractors(
            rng, config.patch_size, config.distractor_density, labels > 0)
        pixels = _render_a(rng, config, labels, distractors, stains)
        out.append((
            ImagePatch(pixels=pixels, domain=Domain.A, id=f"a-{i:05d}"),
            LabelMask(labels=labels, domain=Domain.A),
        ))
    return out


def true_translation(config: SynthConfig, index: int, positive: bool,
                     stains: StainMatrix | None = None) -> ImagePatch:
    """Upper-bound oracle: the B patch at ``index`` re-rendered as domain A.

    Uses the generator's knowledge of the blob layout; never fed to training.
    """
    stains = stains or default_stain_matrix()
    rng = _rng_for(config, _DOMAIN_CODE["B"], index)
    support = np.zeros((config.patch_size, config.patch_size), dtype=bool)
    for blob in _blob_layout(rng, config):
        support |= blob
    support = morphological_close(BinaryMask(values=support), 2).values
    labels = np.where(support, TC_POS if positive else TC_NEG, OTHER).astype(np.uint8)
    distractors = _distractors(rng, config.patch_size, config.distractor_density, support)
    pixels = _render_a(rng, config, labels, distractors, stains)
    return ImagePatch(pixels=pixels, domain=Domain.A, id=f"b-{index:05d}~truth")


def _binary_to_labelmask(mask: BinaryMask) -> LabelMask:
    return LabelMask(labels=np.where(mask.values, TC_NEG, OTHER).astype(np.uint8),
                     domain=Domain.B)


def make_splits(config: SynthConfig, sizes: SplitSizes) -> DatasetSplit:
    """Disjoint-seed dataset splits; A labels thinned per annotation_fraction.

    The annotation-poor variant keeps full masks on a seeded subset of the
    domain-A training patches and sets every other training mask to the
    ignore label. Domain-B masks embed the binary epithelium as class 1.
    """
    if not 0.0 <= sizes.annotation_fraction <= 1.0:
        raise InvalidArgumentError("annotation_fraction must lie in [0, 1]")
    train_a = generate_a(config, sizes.train_a, start_index=0)
    test = generate_a(config, sizes.test, start_index=sizes.train_a)
    validation = generate_a(config, sizes.validation, start_index=sizes.train_a + sizes.test)
    train_b = [(patch, _binary_to_labelmask(mask))
               for patch, mask in generate_b(config, sizes.train_b, start_index=0)]

    keep = int(round(sizes.annotation_fraction * sizes.train_a))
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _DOMAIN_CODE["split"]]))
    kept = set(rng.permutation(sizes.train_a)[:keep].tolist())
    blank = np.full((config.patch_size, config.patch_size), IGNORE, dtype=np.uint8)
    thinned = []
    for idx, (patch, mask) in enumerate(train_a):
        if idx in kept:
            thinned.append((patch, mask))
        else:
            thinned.append((patch, LabelMask(labels=blank, domain=Domain.A)))

    return DatasetSplit(train_a=thinned, train_b=train_b, test=test, validation=validation)


def with_seed(config: SynthConfig, seed: int) -> SynthConfig:
    return replace(config, seed=seed)
