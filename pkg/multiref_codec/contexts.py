"""
Context extractors of the multi-reference entropy model.

Inter-slice contexts look at fully decoded earlier slices. Intra-slice
contexts look at the decoded anchors of the current slice (local, windowed
attention) or borrow the anchor/non-anchor correlation of the previous slice
(global, linear attention). Slice 0 has no previous slice, so its global
intra context takes the correlation from the hyperprior instead.

Every branch ends with an optional channel reweighting pass.
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, fields
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .errors import ConfigError, ShapeError, UsageError, ValidationError
from .latent import (
    ANCHOR,
    NON_ANCHOR,
    checkerboard_mask,
    gather_positions,
    mask_positions,
    scatter_positions,
)
from .nn_blocks import GateBlock, conv1x1, conv3x3

ROPE_BASE = 10000.0
BUNDLE_ORDER = ("hyper", "inter_local", "inter_global", "intra_local", "intra_global")


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """
    ``softmax_c(q) @ (softmax_L(k)^T @ v)`` on (..., L, c) sequences.

    Queries are normalized over channels, keys over positions, so the cost is
    linear in the sequence length.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query and key channels differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key and value lengths differ: {k.shape[-2]} vs {v.shape[-2]}")
    q = q.softmax(dim=-1)
    k = k.softmax(dim=-2)
    context = torch.einsum("...lc,...ld->...cd", k, v)
    return torch.einsum("...lc,...cd->...ld", q, context)


def rope_frequencies(channels: int, base: float = ROPE_BASE) -> torch.Tensor:
    """Initial angle of each 2-channel group: ``base ** (-2g / channels)``."""
    if channels % 2:
        raise ConfigError(f"rotary positions need an even channel count, got {channels}")
    groups = torch.arange(channels // 2, dtype=torch.float64)
    return base ** (-2.0 * groups / channels)


def grid_positions(height: int, width: int, device=None) -> torch.Tensor:
    """(h*w, 2) row-major grid of ``(x, y) = (column, row)`` coordinates."""
    rows, cols = torch.meshgrid(
        torch.arange(height, device=device), torch.arange(width, device=device), indexing="ij"
    )
    return torch.stack([cols.reshape(-1), rows.reshape(-1)], dim=-1).float()


def apply_rope2d(
    x: torch.Tensor,
    positions: torch.Tensor,
    theta_x: torch.Tensor,
    theta_y: torch.Tensor,
) -> torch.Tensor:
    """
    Rotate every channel pair of ``x`` by ``m_x * theta_x + m_y * theta_y``.

    Parameters
    ----------
    x : Tensor
        (..., L, c) queries or keys, c even.
    positions : Tensor
        (L, 2) integer ``(m_x, m_y)`` coordinates.
    theta_x, theta_y : Tensor
        (c/2,) positive angles.
    """
    channels = x.shape[-1]
    if channels % 2:
        raise ConfigError(f"rotary positions need an even channel count, got {channels}")
    if positions.shape != (x.shape[-2], 2):
        raise ShapeError(
            f"positions must be ({x.shape[-2]}, 2), got {tuple(positions.shape)}"
        )
    positions = positions.to(x.dtype)
    angles = (
        positions[:, :1] * theta_x.to(x.dtype).view(1, -1)
        + positions[:, 1:] * theta_y.to(x.dtype).view(1, -1)
    )
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return rotated.flatten(-2)


class RoPE2d(nn.Module):
    """Two-axis rotary positions with learnable angles kept in log space."""

    def __init__(self, channels: int, base: float = ROPE_BASE):
        super().__init__()
        log_theta = torch.log(rope_frequencies(channels, base)).float()
        self.log_theta_x = nn.Parameter(log_theta.clone())
        self.log_theta_y = nn.Parameter(log_theta.clone())

    @property
    def theta_x(self) -> torch.Tensor:
        return self.log_theta_x.exp()

    @property
    def theta_y(self) -> torch.Tensor:
        return self.log_theta_y.exp()

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        return apply_rope2d(x, positions, self.theta_x, self.theta_y)


def mean_attention_weights(attention: torch.Tensor, atol: float = 1e-5) -> torch.Tensor:
    """
    Column means of a row-stochastic c x c attention map.

    The result is the average weight each input channel receives; it sums
    to one.

    Raises
    ------
    ValidationError
        If the map is not square, has negative entries, or a row does not
        sum to one
    """
    if attention.dim() < 2 or attention.shape[-1] != attention.shape[-2]:
        raise ValidationError(f"attention map must be square, got {tuple(attention.shape)}")
    if (attention < 0).any():
        raise ValidationError("attention map has negative entries")
    row_sums = attention.sum(dim=-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=atol):
        worst = (row_sums - 1).abs().max().item()
        raise ValidationError(f"attention map is not row-stochastic (max row error {worst:.2e})")
    return attention.mean(dim=-2)


_recorded = threading.local()


@contextmanager
def record_attention() -> Iterator[Dict[nn.Module, torch.Tensor]]:
    """
    Collect the channel attention maps computed by the current thread.

    Inside the block every ``ContextReweight`` forward stores its map in the
    yielded dict, keyed by module; the last call of a module wins. Other
    threads running the same model are not recorded.
    """
    previous = getattr(_recorded, "maps", None)
    _recorded.maps = {}
    try:
        yield _recorded.maps
    finally:
        _recorded.maps = previous


class ContextReweight(nn.Module):
    """
    Channel-wise reweighting of a context feature.

    A c x c attention map ``softmax(Q K^T)`` over channels (query and key
    L2-normalized along positions, scaled by a learnable temperature)
    mixes the value channels; a gate residual follows.
    """

    def __init__(self, channels: int, gate: bool = True):
        super().__init__()
        self.channels = channels
        self.to_q = conv1x1(channels, channels, bias=False)
        self.to_k = conv1x1(channels, channels, bias=False)
        self.to_v = conv1x1(channels, channels, bias=False)
        self.temperature = nn.Parameter(torch.ones(1))
        self.gate = GateBlock(channels) if gate else None

    def attend(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return the reweighted feature (before the gate) and the attention map."""
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"context reweighting expects (B, {self.channels}, h, w), got {tuple(x.shape)}"
            )
        height, width = x.shape[-2:]
        if height * width == 0:
            raise UsageError("context reweighting needs at least one position")
        q = F.normalize(self.to_q(x).flatten(2), dim=-1)
        k = F.normalize(self.to_k(x).flatten(2), dim=-1)
        v = self.to_v(x).flatten(2)
        attention = torch.softmax(self.temperature * q @ k.transpose(1, 2), dim=-1)
        out = rearrange(attention @ v, "b c (h w) -> b c h w", h=height, w=width)
        return out, attention

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, attention = self.attend(x)
        maps = getattr(_recorded, "maps", None)
        if maps is not None:
            maps[self] = attention.detach()
        if self.gate is not None:
            out = out + self.gate(out)
        return out


def _finish(
    out: torch.Tensor, gate: Optional[GateBlock], reweight: Optional[ContextReweight]
) -> torch.Tensor:
    if gate is not None:
        out = out + gate(out)
    if reweight is not None:
        out = reweight(out)
    return out


class InterSliceLocalContext(nn.Module):
    """Stacked bias-free 3x3 convolutions over the concatenated earlier slices."""

    def __init__(
        self, in_channels: int, out_channels: int, reweight: Optional[ContextReweight] = None
    ):
        super().__init__()
        hidden = out_channels * 2
        self.layers = nn.Sequential(
            conv3x3(in_channels, hidden, bias=False),
            nn.GELU(),
            conv3x3(hidden, hidden, bias=False),
            nn.GELU(),
            conv3x3(hidden, out_channels, bias=False),
        )
        self.reweight = reweight

    def forward(self, prev_slices: Sequence[torch.Tensor]) -> torch.Tensor:
        if not prev_slices:
            raise UsageError("inter-slice context needs at least one decoded slice")
        out = self.layers(torch.cat(list(prev_slices), dim=1))
        return self.reweight(out) if self.reweight is not None else out


class InterSliceGlobalContext(nn.Module):
    """Linear self-attention over the concatenated earlier slices."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rope: bool = True,
        gate: bool = True,
        reweight: Optional[ContextReweight] = None,
    ):
        super().__init__()
        self.to_q = nn.Linear(in_channels, out_channels, bias=False)
        self.to_k = nn.Linear(in_channels, out_channels, bias=False)
        self.to_v = nn.Linear(in_channels, out_channels, bias=False)
        self.rope = RoPE2d(out_channels) if rope else None
        self.gate = GateBlock(out_channels) if gate else None
        self.reweight = reweight

    def forward(self, prev_slices: Sequence[torch.Tensor]) -> torch.Tensor:
        if not prev_slices:
            raise UsageError("inter-slice context needs at least one decoded slice")
        x = torch.cat(list(prev_slices), dim=1)
        height, width = x.shape[-2:]
        seq = rearrange(x, "b c h w -> b (h w) c")
        q, k, v = self.to_q(seq), self.to_k(seq), self.to_v(seq)
        if self.rope is not None:
            positions = grid_positions(height, width, x.device)
            q, k = self.rope(q, positions), self.rope(k, positions)
        out = rearrange(linear_attention(q, k, v), "b (h w) c -> b c h w", h=height, w=width)
        return _finish(out, self.gate, self.reweight)


def window_mask(
    height: int, width: int, window: int, overlap: int, device=None
) -> torch.Tensor:
    """
    (L, L) map of the anchor keys each position may attend to.

    Positions are grouped in blocks of ``window - overlap``; a block attends
    to anchors in its block widened by ``overlap / 2`` on every side. When the
    window covers the map, every anchor is visible.
    """
    anchor = checkerboard_mask(height, width, device).reshape(-1)
    length = height * width
    if window >= max(height, width):
        return anchor.view(1, -1).expand(length, length)

    stride = window - overlap
    half = overlap // 2

    def axis_allowed(size: int) -> torch.Tensor:
        index = torch.arange(size, device=device)
        start = (index // stride) * stride - half
        stop = start + stride + 2 * half
        return (index.view(1, -1) >= start.view(-1, 1)) & (index.view(1, -1) < stop.view(-1, 1))

    rows = axis_allowed(height)
    cols = axis_allowed(width)
    allowed = rows[:, None, :, None] & cols[None, :, None, :]
    return allowed.reshape(length, length) & anchor.view(1, -1)


class IntraSliceLocalContext(nn.Module):
    """
    Overlapped window attention from non-anchor positions to decoded anchors.

    Queries come from a 3x3 projection of the anchor-only map, so each
    non-anchor query summarizes the anchor neighbours inside its window.
    """

    def __init__(
        self,
        slice_channels: int,
        out_channels: int,
        window: int = 8,
        overlap: int = 4,
        reweight: Optional[ContextReweight] = None,
    ):
        super().__init__()
        self.window = window
        self.overlap = overlap
        self.out_channels = out_channels
        self.to_q = conv3x3(slice_channels, out_channels, bias=False)
        self.to_k = conv1x1(slice_channels, out_channels, bias=False)
        self.to_v = conv1x1(slice_channels, out_channels, bias=False)
        self.proj = conv1x1(out_channels, out_channels, bias=False)
        self.reweight = reweight

    def query(self, cur_anchor: torch.Tensor) -> torch.Tensor:
        """
        3x3 query projection that never reads past a position's window.

        With a window overlap of at least two, every 3x3 neighbour is already
        inside the visible band. Narrower overlaps project each window block
        on its own, zero padded at the block edges.
        """
        height, width = cur_anchor.shape[-2:]
        if self.window >= max(height, width) or self.overlap >= 2:
            return self.to_q(cur_anchor)
        stride = self.window - self.overlap
        padded = F.pad(cur_anchor, (0, -width % stride, 0, -height % stride))
        rows, cols = padded.shape[-2] // stride, padded.shape[-1] // stride
        blocks = rearrange(padded, "b c (i s) (j t) -> (b i j) c s t", s=stride, t=stride)
        q = rearrange(self.to_q(blocks), "(b i j) c s t -> b c (i s) (j t)", i=rows, j=cols)
        return q[..., :height, :width]

    def window_attention(self, cur_anchor: torch.Tensor) -> torch.Tensor:
        height, width = cur_anchor.shape[-2:]
        q = rearrange(self.query(cur_anchor), "b c h w -> b (h w) c")
        k = rearrange(self.to_k(cur_anchor), "b c h w -> b (h w) c")
        v = rearrange(self.to_v(cur_anchor), "b c h w -> b (h w) c")
        allowed = window_mask(height, width, self.window, self.overlap, cur_anchor.device)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.out_channels)
        scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
        attention = scores.softmax(dim=-1) * allowed.any(dim=-1, keepdim=True).to(scores.dtype)
        out = rearrange(attention @ v, "b (h w) c -> b c h w", h=height, w=width)
        return self.proj(out)

    def forward(self, cur_anchor: torch.Tensor) -> torch.Tensor:
        out = self.window_attention(cur_anchor)
        return self.reweight(out) if self.reweight is not None else out


def _anchor_split(
    height: int, width: int, device
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    anchor = checkerboard_mask(height, width, device)
    positions = grid_positions(height, width, device)
    return mask_positions(anchor), mask_positions(~anchor), positions


class _CrossPhaseAttention(nn.Module):
    """Linear attention from non-anchor queries to anchor keys/values."""

    def __init__(
        self,
        query_channels: int,
        value_channels: int,
        out_channels: int,
        rope: bool,
        gate: bool,
        reweight: Optional[ContextReweight],
    ):
        super().__init__()
        self.to_q = nn.Linear(query_channels, out_channels, bias=False)
        self.to_k = nn.Linear(query_channels, out_channels, bias=False)
        self.to_v = nn.Linear(value_channels, out_channels, bias=False)
        self.rope = RoPE2d(out_channels) if rope else None
        self.gate = GateBlock(out_channels) if gate else None
        self.reweight = reweight

    def attend(
        self, query_map: torch.Tensor, key_map: torch.Tensor, value_map: torch.Tensor
    ) -> torch.Tensor:
        """Attention output scattered to non-anchor positions, before gate and reweighting."""
        height, width = value_map.shape[-2:]
        for name, t in (("query", query_map), ("key", key_map)):
            if t.shape[-2:] != value_map.shape[-2:]:
                raise ShapeError(
                    f"{name} map {tuple(t.shape[-2:])} is not aligned with "
                    f"value map {tuple(value_map.shape[-2:])}"
                )
        anchor_idx, non_anchor_idx, positions = _anchor_split(height, width, value_map.device)
        q = self.to_q(gather_positions(query_map, non_anchor_idx))
        k = self.to_k(gather_positions(key_map, anchor_idx))
        v = self.to_v(gather_positions(value_map, anchor_idx))
        if self.rope is not None:
            q = self.rope(q, positions.index_select(0, non_anchor_idx))
            k = self.rope(k, positions.index_select(0, anchor_idx))
        return scatter_positions(linear_attention(q, k, v), non_anchor_idx, height, width)


class IntraSliceGlobalContext(_CrossPhaseAttention):
    """
    Global context for the non-anchors of slice i >= 1: queries from the
    non-anchors of slice i-1, keys from its anchors, values from the decoded
    anchors of slice i.
    """

    def __init__(
        self,
        slice_channels: int,
        out_channels: int,
        rope: bool = True,
        gate: bool = True,
        reweight: Optional[ContextReweight] = None,
    ):
        super().__init__(slice_channels, slice_channels, out_channels, rope, gate, reweight)

    def forward(
        self,
        prev_anchor: Optional[torch.Tensor],
        prev_nonanchor: Optional[torch.Tensor],
        cur_anchor: torch.Tensor,
    ) -> torch.Tensor:
        if prev_anchor is None or prev_nonanchor is None:
            raise UsageError(
                "intra-slice global context needs a previous slice; "
                "slice 0 uses the hyperprior-guided context"
            )
        out = self.attend(prev_nonanchor, prev_anchor, cur_anchor)
        return _finish(out, self.gate, self.reweight)


class HyperGuidedGlobalContext(_CrossPhaseAttention):
    """
    Global context for the non-anchors of slice 0: queries from the
    hyperprior at non-anchor positions, keys from the hyperprior at anchor
    positions, values from the decoded anchors of slice 0.
    """

    def __init__(
        self,
        hyper_channels: int,
        slice_channels: int,
        out_channels: int,
        rope: bool = True,
        gate: bool = True,
        reweight: Optional[ContextReweight] = None,
    ):
        super().__init__(hyper_channels, slice_channels, out_channels, rope, gate, reweight)

    def forward(self, hyper: torch.Tensor, y0_anchor: torch.Tensor) -> torch.Tensor:
        out = self.attend(hyper, hyper, y0_anchor)
        return _finish(out, self.gate, self.reweight)


@dataclass
class ContextBundle:
    """The contexts available to the entropy parameters of one slice phase."""
    hyper: torch.Tensor
    inter_local: Optional[torch.Tensor] = None
    inter_global: Optional[torch.Tensor] = None
    intra_local: Optional[torch.Tensor] = None
    intra_global: Optional[torch.Tensor] = None

    def __post_init__(self):
        size = self.hyper.shape[-2:]
        for item in fields(self):
            value = getattr(self, item.name)
            if value is not None and value.shape[-2:] != size:
                raise ShapeError(
                    f"context '{item.name}' has spatial size {tuple(value.shape[-2:])}, "
                    f"expected {tuple(size)}"
                )

    def present(self) -> FrozenSet[str]:
        return frozenset(item.name for item in fields(self) if getattr(self, item.name) is not None)


def legal_members(slice_index: int, phase: str, hgcp: bool = True) -> Tuple[str, ...]:
    """Bundle entries a (slice, phase) may condition on, in concatenation order."""
    if phase not in (ANCHOR, NON_ANCHOR):
        raise UsageError(f"unknown phase '{phase}'")
    members: List[str] = ["hyper"]
    if slice_index > 0:
        members += ["inter_local", "inter_global"]
    if phase == NON_ANCHOR:
        members.append("intra_local")
        if slice_index > 0 or hgcp:
            members.append("intra_global")
    return tuple(name for name in BUNDLE_ORDER if name in members)
