"""
Guided selective compression.

A skip map marks, per latent element, whether its quantized residual is
coded (1) or skipped and reconstructed as zero (0). The map starts from a
scale threshold and is refined by a small pointwise network that sees only
information the decoder already has, so encoder and decoder derive the same
map without side information.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
from torch import nn

from .errors import ShapeError, UsageError
from .nn_blocks import conv1x1

SKIP_THRESHOLD = 0.3
EPS_CLAMP = 1e-7


def scale_threshold_init(sigma: torch.Tensor, xi: float = SKIP_THRESHOLD) -> torch.Tensor:
    """1 where ``sigma >= xi`` (code), 0 where the element is presumed zero."""
    return (sigma >= xi).to(sigma.dtype)


def ste_binarize(epsilon: torch.Tensor) -> torch.Tensor:
    """Hard ``epsilon >= 0.5`` forward, identity gradient backward."""
    hard = (epsilon >= 0.5).to(epsilon.dtype)
    return epsilon + (hard - epsilon).detach()


class SkipPredictor(nn.Module):
    """
    Refines the scale-threshold map of one slice phase.

    Input is the concatenation of the initial map, the masked integer
    residuals of already coded phases and the hyperprior. The logit also
    gets ``gain * (2 s_init - 1)``, so an untrained predictor follows the
    threshold map.
    """

    def __init__(
        self,
        slice_channels: int,
        prior_channels: int,
        hyper_channels: int,
        hidden: Optional[int] = None,
        init_gain: float = 4.0,
    ):
        super().__init__()
        self.prior_channels = prior_channels
        in_channels = slice_channels + prior_channels + hyper_channels
        hidden = hidden or max(2 * slice_channels, 16)
        self.layers = nn.Sequential(
            conv1x1(in_channels, hidden),
            nn.GELU(),
            conv1x1(hidden, hidden),
            conv1x1(hidden, slice_channels),
        )
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)
        self.gain = nn.Parameter(torch.tensor(float(init_gain)))

    def forward(
        self,
        init: torch.Tensor,
        priors: Optional[torch.Tensor],
        hyper: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Returns
        -------
        tuple
            ``(epsilon, s)``: code probability in (0, 1) and the binary map.
        """
        got = 0 if priors is None else priors.shape[1]
        if got != self.prior_channels:
            raise UsageError(
                f"skip predictor expects {self.prior_channels} prior channels for this "
                f"phase, got {got}"
            )
        inputs = [init] if priors is None else [init, priors]
        features = torch.cat(inputs + [hyper], dim=1)
        logits = self.layers(features) + self.gain * (2 * init - 1)
        epsilon = torch.sigmoid(logits)
        return epsilon, ste_binarize(epsilon)


def weighted_cross_entropy(epsilon: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """
    Per-element ``0.5 * (|r| + 1) * BCE(epsilon, r != 0)`` in nats.

    The target is "code" for non-zero residuals; mistakes on large residuals
    cost proportionally more.
    """
    if epsilon.shape != residual.shape:
        raise ShapeError(
            f"epsilon {tuple(epsilon.shape)} and residual {tuple(residual.shape)} differ"
        )
    epsilon = epsilon.clamp(EPS_CLAMP, 1 - EPS_CLAMP)
    target = (residual != 0).to(epsilon.dtype)
    ce = -(target * torch.log(epsilon) + (1 - target) * torch.log(1 - epsilon))
    return 0.5 * (residual.abs() + 1) * ce


@dataclass
class SkipLossReport:
    """Training loss of the skip predictors plus per-slice statistics."""
    loss: torch.Tensor
    skip_ratios: List[float] = field(default_factory=list)
    false_skips: int = 0

    def __post_init__(self):
        if float(self.loss) < 0:
            raise ValueError("skip loss must be non-negative")


def skip_loss(
    epsilon_maps: Dict[Tuple[int, str], torch.Tensor],
    residuals: Dict[Tuple[int, str], torch.Tensor],
    masks: Dict[Tuple[int, str], torch.Tensor],
    num_slices: int,
) -> SkipLossReport:
    """
    Phase-wise weighted cross-entropies, averaged per element and per slice.

    Parameters
    ----------
    epsilon_maps, residuals, masks
        Keyed by ``(slice_index, phase)``; masks select the positions coded in
        that phase.
    """
    total = None
    skipped = [0.0] * num_slices
    counted = [0.0] * num_slices
    false_skips = 0
    for key, epsilon in epsilon_maps.items():
        slice_index, _ = key
        mask = masks[key].expand_as(epsilon)
        residual = residuals[key]
        per_element = weighted_cross_entropy(epsilon, residual)[mask]
        term = per_element.mean() if per_element.numel() else per_element.sum()
        total = term if total is None else total + term
        decisions = (epsilon >= 0.5)[mask]
        skipped[slice_index] += float((~decisions).sum())
        counted[slice_index] += float(decisions.numel())
        false_skips += int(((~decisions) & (residual[mask] != 0)).sum())
    if total is None:
        raise UsageError("skip_loss needs at least one phase")
    ratios = [s / c if c else 0.0 for s, c in zip(skipped, counted)]
    return SkipLossReport(loss=total / num_slices, skip_ratios=ratios, false_skips=false_skips)


def apply_skip(q: torch.Tensor, s: Optional[torch.Tensor]) -> torch.Tensor:
    """Zero the quantized residuals where the skip map says "skip" (``s < 0.5``)."""
    if s is None:
        return q
    if s.shape != q.shape:
        raise ShapeError(f"skip map {tuple(s.shape)} does not match residuals {tuple(q.shape)}")
    return q * (s > 0.5).to(q.dtype)
