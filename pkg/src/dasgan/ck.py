"""Heuristic epithelium labeling on CK-like patches.

The chain is classic stain analysis: optical-density color deconvolution,
Otsu thresholding of the marker channel, then morphological closing. The
resulting binary epithelium mask is turned into the two three-class
conditioning variants (negative: epithelium=1, positive: epithelium=2).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Domain, ImagePatch, LabelMask, OTHER, TC_NEG, TC_POS
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    InvalidArgumentError,
    InvalidInputError,
)

#: Floor applied to pixels before the log10 so saturated pixels stay finite.
OD_EPS = 1e-6

#: Row roles in a stain matrix: counterstain, marker (CK/DAB), residual.
COUNTERSTAIN_CHANNEL = 0
MARKER_CHANNEL = 1

#: Blank-tile heuristic: a marker channel whose dynamic range (in OD units)
#: falls below this carries no stain worth thresholding.
MIN_DENSITY_RANGE = 0.15


@dataclass(frozen=True)
class StainMatrix:
    """3x3 matrix of unit-norm optical-density stain vectors (rows)."""

    vectors: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.vectors, dtype=np.float64)
        if m.shape != (3, 3):
            raise ConfigurationError(f"stain matrix must be 3x3, got {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ConfigurationError("stain matrix rows must be unit norm")
        if np.linalg.cond(m) > 1e8:
            raise ConfigurationError("stain matrix is singular or near-singular")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "vectors", m)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.vectors)


def default_stain_matrix() -> StainMatrix:
    """Hematoxylin/DAB optical-density vectors, row-normalized."""
    h = np.array([0.650, 0.704, 0.286])
    dab = np.array([0.268, 0.570, 0.776])
    residual = np.cross(h, dab)
    m = np.stack([h, dab, residual])
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return StainMatrix(vectors=m)


def load_stain_matrix(path) -> StainMatrix:
    """Read a stain matrix from a text file of 3 rows x 3 reals."""
    m = np.loadtxt(path, dtype=np.float64)
    return StainMatrix(vectors=m)


def save_stain_matrix(stains: StainMatrix, path) -> None:
    np.savetxt(path, stains.vectors, fmt="%.10f")


@dataclass(frozen=True)
class BinaryMask:
    """Boolean epithelium mask (True = epithelium)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InvalidInputError(f"binary mask must be HxW, got shape {v.shape}")
        v = v.astype(bool)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple:
        return self.values.shape


def compose_stains(densities: np.ndarray, stains: StainMatrix) -> np.ndarray:
    """Render per-pixel stain densities to RGB via the Beer-Lambert model.

    Exact inverse of :func:`color_deconvolve` for densities in [0, 2].
    Values may exceed 1 when a stain vector has negative components (the
    residual row); callers that build image patches clip afterwards.
    """
    od = densities @ stains.vectors
    return 10.0 ** (-od)


def color_deconvolve(patch: ImagePatch | np.ndarray, stains: StainMatrix) -> np.ndarray:
    """Unmix an RGB patch into per-stain optical densities, clipped at 0."""
    pixels = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
    od = -np.log10(np.maximum(pixels.astype(np.float64), OD_EPS))
    densities = od @ stains.inverse
    return np.maximum(densities, 0.0)


def otsu_threshold(channel: np.ndarray, bins: int = 256) -> float:
    """Bin-edge threshold maximizing between-class histogram variance.

    Ties resolve to the smallest threshold. Raises
    :class:`DegenerateInputError` when the channel is constant.
    """
    values = np.asarray(channel, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if lo == hi:
        raise DegenerateInputError("channel is constant; no threshold exists")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    counts = counts.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0

    # Cumulative weight and mean of the low class at each interior edge.
    # Totals come from the same sequential cumsum so tie patterns are stable.
    cum_counts = np.cumsum(counts)
    cum_mass = np.cumsum(counts * centers)
    w0 = cum_counts[:-1]
    w1 = cum_counts[-1] - w0
    sum0 = cum_mass[:-1]
    sum1 = cum_mass[-1] - sum0
    valid = (w0 > 0) & (w1 > 0)
    variance = np.zeros(bins - 1)
    mu0 = np.divide(sum0, w0, out=np.zeros_like(sum0), where=valid)
    mu1 = np.divide(sum1, w1, out=np.zeros_like(sum1), where=valid)
    variance[valid] = (w0 * w1 * (mu0 - mu1) ** 2)[valid]
    best = int(np.argmax(variance))
    return float(edges[best + 1])


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def morphological_close(mask: BinaryMask, radius: int) -> BinaryMask:
    """Dilate then erode with a disk element; radius 0 is the identity.

    The mask is padded by the radius first, so the result equals the exact
    closing of the mask embedded in an all-false plane (and is idempotent).
    """
    if radius < 0:
        raise InvalidArgumentError(f"closing radius must be >= 0, got {radius}")
    if radius == 0:
        return mask
    disk = _disk(radius)
    padded = np.pad(mask.values, radius, mode="constant", constant_values=False)
    dilated = ndimage.binary_dilation(padded, structure=disk, border_value=0)
    closed = ndimage.binary_erosion(dilated, structure=disk, border_value=0)
    return BinaryMask(values=closed[radius:-radius, radius:-radius])


def segment_ck(
    patch: ImagePatch,
    stains: StainMatrix | None = None,
    close_radius: int = 2,
    on_blank: str = "empty",
    min_density_range: float = MIN_DENSITY_RANGE,
) -> BinaryMask:
    """Segment epithelium in a CK-like patch.

    Deconvolve, take the marker channel, binarize at the Otsu threshold
    (``>=`` is epithelium), then close. Blank tiles (marker dynamic range
    below ``min_density_range``) yield an empty mask, or raise when
    ``on_blank="error"``.
    """
    if patch.domain is not Domain.B:
        raise InvalidInputError("segment_ck expects a domain-B (CK-like) patch")
    if on_blank not in ("empty", "error"):
        raise InvalidArgumentError(f"on_blank must be 'empty' or 'error', got {on_blank!r}")
    stains = stains or default_stain_matrix()
    densities = color_deconvolve(patch, stains)
    marker = densities[..., MARKER_CHANNEL]
    if float(marker.max() - marker.min()) < min_density_range:
        if on_blank == "error":
            raise DegenerateInputError("no marker stain present in patch")
        return BinaryMask(values=np.zeros(marker.shape, dtype=bool))
    threshold = otsu_threshold(marker)
    binary = BinaryMask(values=marker >= threshold)
    return morphological_close(binary, close_radius)


def condition_masks(binary: BinaryMask) -> tuple[LabelMask, LabelMask]:
    """Expand a CK epithelium mask into its two conditioning variants.

    The negative variant labels epithelium 1, the positive variant labels it
    2; non-epithelium is 0 in both.
    """
    negative = np.where(binary.values, TC_NEG, OTHER).astype(np.uint8)
    positive = np.where(binary.values, TC_POS, OTHER).astype(np.uint8)
    return (
        LabelMask(labels=negative, domain=Domain.B),
        LabelMask(labels=positive, domain=Domain.B),
    )
