"""
Analysis / synthesis transforms and the hyperprior transforms.

g_a downsamples by 16 in four stride-2 stages, each followed by token mixing
blocks; g_s mirrors it. h_a / h_s add two more stride-2 stages for the side
information.
"""

from typing import Tuple

import torch
import torch.nn.functional as F
from compressai.models.utils import conv, deconv
from torch import nn

from .config import CodecConfig
from .errors import ShapeError
from .nn_blocks import ResidualBlock, STMBlock

PAD_MULTIPLE = 64


def _stage_blocks(channels: int, config: CodecConfig) -> nn.Sequential:
    blocks = []
    for _ in range(config.stm_blocks_per_stage):
        if config.ablation.stmt:
            blocks.append(
                STMBlock(channels, config.depthrb_expansion, config.gate_expansion)
            )
        else:
            blocks.append(ResidualBlock(channels))
    return nn.Sequential(*blocks)


class AnalysisTransform(nn.Module):
    """``y = g_a(x)``: (B, 3, H, W) -> (B, M, H/16, W/16)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        N, M = config.N, config.M
        channels = [3, N, N, N, M]
        layers = []
        for stage in range(4):
            layers.append(conv(channels[stage], channels[stage + 1]))
            layers.append(_stage_blocks(channels[stage + 1], config))
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"analysis expects (B, 3, H, W), got {tuple(x.shape)}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(
                f"image size {tuple(x.shape[2:])} is not a multiple of 16; pad it first"
            )
        return self.layers(x)


class SynthesisTransform(nn.Module):
    """``x_hat = g_s(y_hat)``: (B, M, h, w) -> (B, 3, 16h, 16w)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        N, M = config.N, config.M
        self.M = M
        channels = [M, N, N, N, 3]
        layers = []
        for stage in range(4):
            layers.append(_stage_blocks(channels[stage], config))
            layers.append(deconv(channels[stage], channels[stage + 1]))
        self.layers = nn.Sequential(*layers)

    def forward(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.dim() != 4 or y_hat.shape[1] != self.M:
            raise ShapeError(
                f"synthesis expects (B, {self.M}, h, w), got {tuple(y_hat.shape)}"
            )
        return self.layers(y_hat)


class HyperAnalysis(nn.Module):
    """``z = h_a(y)``: (B, M, h, w) -> (B, N, h/4, w/4)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        N, M = config.N, config.M
        self.M = M
        self.layers = nn.Sequential(
            conv(M, N, kernel_size=3, stride=1),
            nn.GELU(),
            conv(N, N),
            nn.GELU(),
            conv(N, N),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4 or y.shape[1] != self.M:
            raise ShapeError(f"hyper analysis expects (B, {self.M}, h, w), got {tuple(y.shape)}")
        if y.shape[2] % 4 or y.shape[3] % 4:
            raise ShapeError(
                f"latent size {tuple(y.shape[2:])} is not divisible by 4"
            )
        return self.layers(y)


class HyperSynthesis(nn.Module):
    """``H = h_s(z_hat)``: (B, N, h, w) -> (B, 2M, 4h, 4w)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        N = config.N
        self.N = N
        mid = N * 3 // 2
        self.layers = nn.Sequential(
            deconv(N, N),
            nn.GELU(),
            deconv(N, mid),
            nn.GELU(),
            conv(mid, config.hyper_out_channels, kernel_size=3, stride=1),
        )

    def forward(self, z_hat: torch.Tensor) -> torch.Tensor:
        if z_hat.dim() != 4 or z_hat.shape[1] != self.N:
            raise ShapeError(
                f"hyper synthesis expects (B, {self.N}, h, w), got {tuple(z_hat.shape)}"
            )
        return self.layers(z_hat)


def padded_size(height: int, width: int, multiple: int = PAD_MULTIPLE) -> Tuple[int, int]:
    return (-(-height // multiple) * multiple, -(-width // multiple) * multiple)


def pad_image(
    x: torch.Tensor, multiple: int = PAD_MULTIPLE
) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """
    Pad an image on the bottom/right to a multiple of ``multiple``.

    Reflective padding is used when the image is large enough for it,
    replicate padding otherwise.

    Returns
    -------
    tuple
        The padded image and the original ``(H, W)``.
    """
    height, width = x.shape[-2:]
    target_h, target_w = padded_size(height, width, multiple)
    pad_h, pad_w = target_h - height, target_w - width
    if pad_h == 0 and pad_w == 0:
        return x, (height, width)
    mode = "reflect" if pad_h < height and pad_w < width else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode), (height, width)


def crop_image(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    height, width = size
    return x[..., :height, :width]
