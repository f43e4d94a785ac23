"""Adversarial, cycle and segmentation loss terms with fixed reductions.

Conventions chosen once and used everywhere:

* adversarial terms use the log form with scores clamped to [eps, 1-eps];
  the generator side is the non-saturating ``-mean(log D(fake))``;
* the cycle term is L1, averaged over elements within a domain and summed
  across the two domains;
* segmentation is categorical cross-entropy averaged over labeled (non-255)
  pixels per domain and summed across domains; a domain with no labeled
  pixels contributes exactly zero;
* the combined objective is ``gan_ab + gan_ba + lambda_cycle * cycle +
  lambda_seg * seg``.

Every function accepts torch tensors (differentiable path) or numpy arrays
and returns a scalar tensor. Segmentation inputs are channels-last to match
the datamodel types.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import ClassPosterior, IGNORE, LabelMask
from .errors import InvalidInputError, TrainingDivergenceError

LOG_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_seg: float = 1.0

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.lambda_seg < 0:
            raise InvalidInputError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossReport:
    """The five scalar components logged each iteration (generator side)."""

    gan_ab: float
    gan_ba: float
    cycle: float
    seg: float
    total: float

    @classmethod
    def from_components(cls, gan_ab, gan_ba, cycle, seg, weights: LossWeights):
        total = total_loss(gan_ab, gan_ba, cycle, seg, weights)
        return cls(float(gan_ab), float(gan_ba), float(cycle), float(seg), float(total))

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.gan_ab, self.gan_ba, self.cycle,
                                            self.seg, self.total))

    CSV_FIELDS = ("gan_ab", "gan_ba", "cycle", "seg", "total")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _clamped_log(scores: torch.Tensor) -> torch.Tensor:
    return torch.log(scores.clamp(LOG_EPS, 1.0 - LOG_EPS))


def adversarial_loss_d(real_scores, fake_scores) -> torch.Tensor:
    """Discriminator objective: -[mean log D(real) + mean log(1 - D(fake))]."""
    real = _as_tensor(real_scores)
    fake = _as_tensor(fake_scores)
    return -(_clamped_log(real).mean() + torch.log(
        (1.0 - fake).clamp(LOG_EPS, 1.0 - LOG_EPS)).mean())


def adversarial_loss_g(fake_scores) -> torch.Tensor:
    """Non-saturating generator objective: -mean log D(fake)."""
    return -_clamped_log(_as_tensor(fake_scores)).mean()


def cycle_loss(x_a, cyc_a, x_b, cyc_b) -> torch.Tensor:
    """L1 reconstruction of both domains after a round trip."""
    terms = []
    for original, cycled in ((x_a, cyc_a), (x_b, cyc_b)):
        orig = _as_tensor(original)
        cyc = _as_tensor(cycled)
        if orig.shape != cyc.shape:
            raise InvalidInputError(
                f"cycle shapes differ: {tuple(orig.shape)} vs {tuple(cyc.shape)}")
        terms.append((orig - cyc).abs().mean())
    return terms[0] + terms[1]


def _coerce_labels(labels) -> torch.Tensor:
    if isinstance(labels, LabelMask):
        labels = labels.labels
    if isinstance(labels, torch.Tensor):
        return labels.long()
    return torch.as_tensor(np.asarray(labels), dtype=torch.int64)


def _coerce_probs(probs) -> torch.Tensor:
    if isinstance(probs, ClassPosterior):
        probs = probs.probs
    return _as_tensor(probs)


def cross_entropy_term(labels, probs) -> torch.Tensor:
    """CE of one domain: mean over labeled pixels of -log p[true class].

    ``labels`` is (..., H, W) with 255 = ignore; ``probs`` is channels-last
    (..., H, W, C). Zero labeled pixels give an exact zero.
    """
    lab = _coerce_labels(labels).reshape(-1)
    p = _coerce_probs(probs)
    num_classes = p.shape[-1]
    p = p.reshape(-1, num_classes)
    if p.shape[0] != lab.shape[0]:
        raise InvalidInputError("label and posterior pixel counts differ")
    keep = lab != IGNORE
    if not bool(keep.any()):
        return p.sum() * 0.0
    picked = p[keep].gather(1, lab[keep].unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(LOG_EPS)).mean()


def segmentation_loss(true_a, pred_a, true_b, pred_b) -> torch.Tensor:
    """Cross-entropy summed over the two domains (each averaged per pixel)."""
    return cross_entropy_term(true_a, pred_a) + cross_entropy_term(true_b, pred_b)


def total_loss(gan_ab, gan_ba, cycle, seg, weights: LossWeights):
    """Weighted sum of the four components."""
    parts = [gan_ab, gan_ba, cycle, seg]
    for part in parts:
        value = float(part.detach() if isinstance(part, torch.Tensor) else part)
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"non-finite loss component {value}")
    return gan_ab + gan_ba + weights.lambda_cycle * cycle + weights.lambda_seg * seg
