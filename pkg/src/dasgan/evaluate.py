"""Tiled inference, F1 evaluation, TC scoring and concordance metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import (
    ClassPosterior,
    Domain,
    IGNORE,
    ImagePatch,
    LabelMask,
    NUM_CLASSES,
    OTHER,
    TC_NEG,
    TC_POS,
    argmax_mask,
)
from .errors import InvalidArgumentError, InvalidInputError, NoEpitheliumError, UndefinedMetricError

#: Default tile geometry for large images.
DEFAULT_TILE = 512
DEFAULT_OVERLAP = 64


def _tile_starts(size: int, tile: int, step: int) -> list:
    """Tile origins covering [0, size); the last tile is aligned to the end."""
    if size <= tile:
        return [0]
    starts = list(range(0, size - tile + 1, step))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


def predict_posterior(model, image: ImagePatch, tile: int = DEFAULT_TILE,
                      overlap: int = DEFAULT_OVERLAP) -> ClassPosterior:
    """Tile an image, average class posteriors on overlaps.

    ``model`` needs a ``segment(tensor) -> tensor`` method (N,C,H,W in and
    out). Images smaller than the tile are edge-padded and cropped back.
    """
    if not (tile >= overlap >= 0):
        raise InvalidArgumentError(f"need tile >= overlap >= 0, got {tile}, {overlap}")
    h, w = image.shape
    pixels = image.pixels
    pad_h, pad_w = max(0, tile - h), max(0, tile - w)
    if pad_h or pad_w:
        pixels = np.pad(pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    ph, pw = pixels.shape[:2]

    step = tile - overlap if tile > overlap else tile
    acc = np.zeros((ph, pw, NUM_CLASSES), dtype=np.float64)
    counts = np.zeros((ph, pw, 1), dtype=np.float64)
    with torch.no_grad():
        for y in _tile_starts(ph, tile, step):
            for x in _tile_starts(pw, tile, step):
                window = pixels[y : y + tile, x : x + tile]
                batch = torch.from_numpy(
                    np.ascontiguousarray(window.transpose(2, 0, 1))[None]).float()
                probs = model.segment(batch)[0].permute(1, 2, 0).numpy()
                acc[y : y + tile, x : x + tile] += probs
                counts[y : y + tile, x : x + tile] += 1.0
    probs = acc / counts
    return ClassPosterior(probs=probs[:h, :w])


def predict_mask(model, image: ImagePatch, tile: int = DEFAULT_TILE,
                 overlap: int = DEFAULT_OVERLAP) -> LabelMask:
    """Tiled posterior averaging followed by argmax to hard labels."""
    posterior = predict_posterior(model, image, tile=tile, overlap=overlap)
    return argmax_mask(posterior, domain=image.domain)


# ---------------------------------------------------------------------------
# F1 scores
# ---------------------------------------------------------------------------

REPORTED_CLASSES = (OTHER, TC_NEG, TC_POS)


def confusion_counts(pred: LabelMask, truth: LabelMask) -> dict:
    """(TP, FP, FN) per reported class plus the binary epithelium class."""
    if pred.shape != truth.shape:
        raise InvalidInputError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    keep = truth.labels != IGNORE
    if not keep.any():
        raise UndefinedMetricError("all pixels are ignore-labeled")
    p = pred.labels[keep]
    t = truth.labels[keep]
    counts = {}
    for cls in REPORTED_CLASSES:
        tp = int(np.sum((p == cls) & (t == cls)))
        fp = int(np.sum((p == cls) & (t != cls)))
        fn = int(np.sum((p != cls) & (t == cls)))
        counts[cls] = (tp, fp, fn)
    p_tc = (p == TC_NEG) | (p == TC_POS)
    t_tc = (t == TC_NEG) | (t == TC_POS)
    counts["tc"] = (
        int(np.sum(p_tc & t_tc)),
        int(np.sum(p_tc & ~t_tc)),
        int(np.sum(~p_tc & t_tc)),
    )
    return counts


def f1_from_counts(tp: int, fp: int, fn: int, absent_value: float = 1.0) -> float:
    if tp == 0 and fp == 0 and fn == 0:
        return absent_value
    return 2.0 * tp / (2.0 * tp + fp + fn)


def f1_scores(pred: LabelMask, truth: LabelMask, absent_as_one: bool = True) -> dict:
    """Per-class F1 over {Other, TC-, TC+}, the binary TC F1, and the mean.

    A class absent from both masks scores 1 by default (vacuous perfection);
    with ``absent_as_one=False`` absent classes are dropped from the mean.
    """
    counts = confusion_counts(pred, truth)
    scores = {}
    mean_terms = []
    for cls in REPORTED_CLASSES:
        tp, fp, fn = counts[cls]
        if tp == 0 and fp == 0 and fn == 0 and not absent_as_one:
            scores[cls] = None
        else:
            scores[cls] = f1_from_counts(tp, fp, fn)
            mean_terms.append(scores[cls])
    if not mean_terms:
        raise UndefinedMetricError("no class present in either mask")
    scores["tc"] = f1_from_counts(*counts["tc"])
    scores["mean"] = float(np.mean(mean_terms))
    return scores


def split_f1(model, pairs, tile: int | None = None, overlap: int = 0) -> dict:
    """Pooled-count F1 over a list of (patch, truth mask) pairs.

    Counts are accumulated over the whole split per class before forming F1,
    so tiny fields without a class cannot distort the mean.
    """
    totals = {cls: [0, 0, 0] for cls in (*REPORTED_CLASSES, "tc")}
    any_labeled = False
    for patch, truth in pairs:
        if (truth.labels != IGNORE).any():
            any_labeled = True
        else:
            continue
        t = tile or max(patch.shape)
        pred = predict_mask(model, patch, tile=t, overlap=min(overlap, t))
        for cls, (tp, fp, fn) in confusion_counts(pred, truth).items():
            totals[cls][0] += tp
            totals[cls][1] += fp
            totals[cls][2] += fn
    if not any_labeled:
        raise UndefinedMetricError("no labeled pixels in the split")
    scores = {cls: f1_from_counts(*totals[cls]) for cls in totals}
    scores["mean"] = float(np.mean([scores[c] for c in REPORTED_CLASSES]))
    return scores


# ---------------------------------------------------------------------------
# TC score and concordance
# ---------------------------------------------------------------------------

def tc_score(mask: LabelMask) -> float:
    """Relative area of positive epithelium: TC+ / (TC- + TC+), in [0, 1]."""
    labels = mask.labels[mask.labels != IGNORE]
    pos = int(np.sum(labels == TC_POS))
    neg = int(np.sum(labels == TC_NEG))
    if pos + neg == 0:
        raise NoEpitheliumError("mask contains no epithelial pixels")
    return pos / (pos + neg)


def concordance(pred_scores, true_scores) -> tuple:
    """(Lin's concordance, Pearson correlation, mean absolute error).

    MAE is reported in the units of the inputs (percentage points when the
    scores live in [0, 100]).
    """
    p = np.asarray(pred_scores, dtype=np.float64)
    t = np.asarray(true_scores, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise InvalidInputError("score vectors must be 1-D and equal length")
    if p.size < 2:
        raise InvalidInputError("need at least 2 scores")
    if np.ptp(p) == 0 or np.ptp(t) == 0:
        raise UndefinedMetricError("Pearson correlation undefined for a constant vector")
    mp, mt = p.mean(), t.mean()
    var_p, var_t = ((p - mp) ** 2).mean(), ((t - mt) ** 2).mean()
    cov = ((p - mp) * (t - mt)).mean()
    lcc = 2.0 * cov / (var_p + var_t + (mp - mt) ** 2)
    pcc = cov / np.sqrt(var_p * var_t)
    mae = np.abs(p - t).mean()
    return float(lcc), float(pcc), float(mae)


# ---------------------------------------------------------------------------
# Score binning (reported on the 0..100 percent scale)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreBin:
    label: str
    lo: float
    hi: float  # exclusive, except the final TC=100 bin
    count: int
    mean: float | None
    std: float | None


def _bin_edges() -> list:
    edges = [("TC<1", 0.0, 1.0), ("1<=TC<10", 1.0, 10.0)]
    for n in range(1, 10):
        edges.append((f"{10 * n}<=TC<{10 * (n + 1)}", 10.0 * n, 10.0 * (n + 1)))
    edges.append(("TC=100", 100.0, 100.0))
    return edges


def bin_label(true_score: float) -> str:
    """Bin assignment for a true score in [0, 100]."""
    if not 0.0 <= true_score <= 100.0:
        raise InvalidInputError(f"true score {true_score} outside [0, 100]")
    if true_score == 100.0:
        return "TC=100"
    for label, lo, hi in _bin_edges()[:-1]:
        if lo <= true_score < hi:
            return label
    raise AssertionError("unreachable")


def bin_report(scored) -> list:
    """Mean/std/count of predicted scores grouped by true-score bin.

    ``scored`` is an iterable of (id, predicted, true) on the 0..100 scale;
    entries without a true score are skipped. Empty bins report count 0.
    """
    grouped = {label: [] for label, _, _ in _bin_edges()}
    for _, predicted, true in scored:
        if true is None:
            continue
        grouped[bin_label(float(true))].append(float(predicted))
    bins = []
    for label, lo, hi in _bin_edges():
        values = grouped[label]
        bins.append(ScoreBin(
            label=label, lo=lo, hi=hi, count=len(values),
            mean=float(np.mean(values)) if values else None,
            std=float(np.std(values)) if values else None,
        ))
    return bins


@dataclass(frozen=True)
class TCScoreReport:
    """Per-image TC scores plus cohort-level agreement statistics."""

    per_image: list
    lcc: float
    pcc: float
    mae: float
    bins: list = field(default_factory=list)


def build_tc_report(per_image) -> TCScoreReport:
    """Assemble the cohort report from (id, predicted, true) percent scores.

    Images without a true score are listed but excluded from the agreement
    statistics and binning.
    """
    per_image = [(i, float(p), None if t is None else float(t)) for i, p, t in per_image]
    paired = [(p, t) for _, p, t in per_image if t is not None]
    if len(paired) < 2:
        raise InvalidInputError("need at least 2 scored pairs for concordance")
    preds, trues = zip(*paired)
    lcc, pcc, mae = concordance(preds, trues)
    return TCScoreReport(per_image=per_image, lcc=lcc, pcc=pcc, mae=mae,
                         bins=bin_report(per_image))
