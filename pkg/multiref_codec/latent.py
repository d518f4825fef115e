"""
Latent slicing, checkerboard phases, quantization and the per-phase
parameter networks (latent residual prediction and entropy parameters).
"""

import enum
import functools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from compressai.ops import LowerBound
from compressai.ops import quantize_ste as ste_round
from torch import nn

from .errors import ConfigError, ShapeError, UsageError
from .nn_blocks import conv1x1, conv3x3

ANCHOR = "anchor"
NON_ANCHOR = "non_anchor"
PHASES = (ANCHOR, NON_ANCHOR)

SIGMA_MIN = 0.11


@dataclass
class GaussianParams:
    """Mean and scale of the discretized Gaussian for one slice."""
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(
                f"mu {tuple(self.mu.shape)} and sigma {tuple(self.sigma.shape)} differ"
            )


def split_slices(y: torch.Tensor, num_slices: int) -> List[torch.Tensor]:
    """Partition the channel axis into ``num_slices`` equal slices, in order."""
    channels = y.shape[1]
    if num_slices < 1 or channels % num_slices:
        raise ConfigError(
            f"{channels} latent channels cannot be split into {num_slices} slices"
        )
    return list(torch.chunk(y, num_slices, dim=1))


def merge_slices(slices: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat(list(slices), dim=1)


def checkerboard_mask(height: int, width: int, device=None) -> torch.Tensor:
    """Boolean (h, w) map, True at anchors where ``(i + j) % 2 == 0``."""
    rows = torch.arange(height, device=device).view(-1, 1)
    cols = torch.arange(width, device=device).view(1, -1)
    return (rows + cols) % 2 == 0


def phase_mask(phase: str, height: int, width: int, device=None) -> torch.Tensor:
    """Boolean (1, 1, h, w) mask of the positions coded in ``phase``."""
    if phase not in PHASES:
        raise UsageError(f"phase must be one of {PHASES}, got '{phase}'")
    anchor = checkerboard_mask(height, width, device)
    mask = anchor if phase == ANCHOR else ~anchor
    return mask.view(1, 1, height, width)


def mask_positions(mask: torch.Tensor) -> torch.Tensor:
    """Flat row-major indices of the True entries of an (h, w) mask."""
    return torch.nonzero(mask.reshape(-1), as_tuple=False).squeeze(1)


def gather_positions(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w) -> (B, L, C) sequence of the positions in ``index``."""
    return x.flatten(2).index_select(2, index).transpose(1, 2)


def scatter_positions(
    seq: torch.Tensor, index: torch.Tensor, height: int, width: int
) -> torch.Tensor:
    """Inverse of ``gather_positions``; unlisted positions are zero."""
    batch, _, channels = seq.shape
    out = seq.new_zeros(batch, channels, height * width)
    out.index_copy_(2, index, seq.transpose(1, 2))
    return out.view(batch, channels, height, width)


class QuantMode(enum.Enum):
    STE = "ste"
    AUN = "aun"
    ROUND = "round"


def mixed_quantize(
    y: torch.Tensor,
    mu: torch.Tensor,
    r: torch.Tensor,
    mode: QuantMode = QuantMode.ROUND,
) -> torch.Tensor:
    """
    Zero-centered quantization of a slice.

    ``STE`` / ``ROUND`` give ``round(y - mu) + mu + r``; ``AUN`` gives
    ``y + u`` with ``u ~ U(-0.5, 0.5)`` and ignores ``mu`` and ``r``.
    """
    if y.shape != mu.shape or y.shape != r.shape:
        raise ShapeError(
            f"y {tuple(y.shape)}, mu {tuple(mu.shape)} and r {tuple(r.shape)} must match"
        )
    mode = QuantMode(mode)
    if mode is QuantMode.AUN:
        return y + torch.empty_like(y).uniform_(-0.5, 0.5)
    if mode is QuantMode.STE:
        return ste_round(y - mu) + mu + r
    return torch.round(y - mu) + mu + r


@functools.lru_cache(maxsize=None)
def _bound_module(bound: float, device: torch.device) -> LowerBound:
    return LowerBound(bound).to(device)


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    """``max(x, bound)`` that still lets gradients push ``x`` upward."""
    return _bound_module(float(bound), x.device)(x)


class LatentResidualPrediction(nn.Module):
    """
    Predicts the rounding residual ``r`` of one slice phase from decoded
    slices, the hyperprior and (non-anchor phase) the decoded anchors.

    The output is bounded to half a quantization bin by ``0.5 * tanh``.
    """

    def __init__(
        self,
        hyper_channels: int,
        prior_channels: int,
        slice_channels: int,
        phase: str,
    ):
        super().__init__()
        self.phase = phase
        self.prior_channels = prior_channels
        anchor_channels = slice_channels if phase == NON_ANCHOR else 0
        in_channels = hyper_channels + prior_channels + anchor_channels
        hidden = max(slice_channels * 2, 8)
        self.layers = nn.Sequential(
            conv3x3(in_channels, hidden),
            nn.GELU(),
            conv3x3(hidden, hidden),
            nn.GELU(),
            conv1x1(hidden, slice_channels),
        )

    def forward(
        self,
        decoded_slices: Sequence[torch.Tensor],
        anchor: Optional[torch.Tensor],
        hyper: torch.Tensor,
    ) -> torch.Tensor:
        if self.phase == ANCHOR and anchor is not None:
            raise UsageError("anchor phase residual prediction cannot see anchors")
        if self.phase == NON_ANCHOR and anchor is None:
            raise UsageError("non-anchor residual prediction needs the decoded anchors")
        inputs = [hyper, *decoded_slices]
        if anchor is not None:
            inputs.append(anchor)
        features = torch.cat(inputs, dim=1)
        expected = self.layers[0].in_channels
        if features.shape[1] != expected:
            raise ShapeError(
                f"residual prediction expects {expected} input channels, got {features.shape[1]}"
            )
        return 0.5 * torch.tanh(self.layers(features))


class EntropyParameters(nn.Module):
    """
    Pointwise aggregator mapping a context bundle to ``(mu, sigma)``.

    One instance per (slice, phase); ``members`` fixes which bundle entries
    it accepts, in concatenation order.
    """

    def __init__(self, members: Sequence[str], channel_counts: Sequence[int], slice_channels: int):
        super().__init__()
        if len(members) != len(channel_counts):
            raise ConfigError("members and channel_counts must have the same length")
        self.members: Tuple[str, ...] = tuple(members)
        in_channels = sum(channel_counts)
        hidden = max(in_channels * 2 // 3, 2 * slice_channels)
        self.layers = nn.Sequential(
            conv1x1(in_channels, hidden),
            nn.GELU(),
            conv1x1(hidden, hidden),
            nn.GELU(),
            conv1x1(hidden, 2 * slice_channels),
        )

    def forward(self, bundle) -> GaussianParams:
        present = bundle.present()
        if present != frozenset(self.members):
            raise UsageError(
                f"context bundle {sorted(present)} is not legal here; "
                f"expected {sorted(self.members)}"
            )
        features = torch.cat([getattr(bundle, name) for name in self.members], dim=1)
        mu, sigma = self.layers(features).chunk(2, dim=1)
        return GaussianParams(mu=mu, sigma=lower_bound(sigma, SIGMA_MIN))


class HyperpriorHead(nn.Module):
    """(mu, sigma) of the whole latent from the hyperprior alone."""

    def __init__(self, hyper_channels: int, latent_channels: int):
        super().__init__()
        self.layers = nn.Sequential(
            conv1x1(hyper_channels, hyper_channels),
            nn.GELU(),
            conv1x1(hyper_channels, 2 * latent_channels),
        )

    def forward(self, hyper: torch.Tensor) -> GaussianParams:
        mu, sigma = self.layers(hyper).chunk(2, dim=1)
        return GaussianParams(mu=mu, sigma=lower_bound(sigma, SIGMA_MIN))


def masked(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x * mask.to(x.dtype)
