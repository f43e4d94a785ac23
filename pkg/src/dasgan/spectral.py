"""Spectral weight normalization via power iteration.

Used on every conv weight in the generators and discriminators to keep
their largest singular value near 1 during adversarial training.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import InvalidArgumentError

SIGMA_EPS = 1e-12


def _l2_normalize(v: torch.Tensor) -> torch.Tensor:
    return v / (v.norm() + SIGMA_EPS)


def make_power_state(weight: torch.Tensor) -> torch.Tensor:
    """Fresh power-iteration vector for a weight, drawn from the torch RNG."""
    u = torch.randn(weight.shape[0], dtype=weight.dtype, device=weight.device)
    return _l2_normalize(u)


def _normalized_weight(weight: torch.Tensor, state: torch.Tensor, iters: int) -> torch.Tensor:
    w2d = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        for _ in range(iters):
            v = _l2_normalize(torch.mv(w2d.t(), state))
            state.copy_(_l2_normalize(torch.mv(w2d, v)))
        v = _l2_normalize(torch.mv(w2d.t(), state))
        # Clone so later in-place refinements of the persistent state cannot
        # invalidate graphs that still reference this estimate.
        u = state.clone()
    # sigma keeps the gradient path through the weight; u and v are treated
    # as constants of the current estimate.
    sigma = torch.dot(u, torch.mv(w2d, v))
    return weight / sigma.clamp_min(SIGMA_EPS)


def spectral_normalize(weight: torch.Tensor, iters: int, state: torch.Tensor) -> torch.Tensor:
    """Divide a weight by its power-iteration spectral-norm estimate.

    ``state`` is the persistent left singular vector estimate (length equals
    the weight's leading dimension); it is refined in place. The estimate
    converges to the true largest singular value as ``iters`` grows. A zero
    weight comes back unchanged (the estimate is floored at a tiny epsilon).
    """
    if iters < 1:
        raise InvalidArgumentError(f"power iterations must be >= 1, got {iters}")
    if state.shape != (weight.shape[0],):
        raise InvalidArgumentError(
            f"state length {tuple(state.shape)} does not match weight rows {weight.shape[0]}"
        )
    return _normalized_weight(weight, state, iters)


class SpectralNorm(nn.Module):
    """Wrap a conv/linear module so its weight is spectrally normalized.

    One power iteration refines the persistent estimate per training-mode
    forward; eval-mode forwards reuse the stored direction, so inference is
    deterministic.
    """

    def __init__(self, module: nn.Module, power_iterations: int = 1):
        super().__init__()
        if power_iterations < 1:
            raise InvalidArgumentError("power_iterations must be >= 1")
        self.module = module
        self.power_iterations = power_iterations
        weight = module.weight
        del module._parameters["weight"]
        self.weight_bar = nn.Parameter(weight.data)
        self.register_buffer("power_u", make_power_state(weight.data))

    def forward(self, *args, **kwargs):
        iters = self.power_iterations if self.training else 0
        self.module.weight = _normalized_weight(self.weight_bar, self.power_u, iters)
        return self.module(*args, **kwargs)


def spectral_conv(conv: nn.Module, enabled: bool = True) -> nn.Module:
    return SpectralNorm(conv) if enabled else conv
