"""
Neural building blocks shared by the transforms and the entropy model.

All blocks take and return ``(B, C, H, W)`` tensors. Stride-1 blocks keep the
spatial size.
"""

from typing import Callable, Dict, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError, UsageError

LN_EPS = 1e-6


def conv1x1(in_channels: int, out_channels: int, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=bias)


def conv3x3(in_channels: int, out_channels: int, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=bias)


def _check_channels(x: torch.Tensor, channels: int, name: str):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeError(
            f"{name} expects (B, {channels}, H, W) input, got {tuple(x.shape)}"
        )


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis at every spatial position."""

    def __init__(self, channels: int, eps: float = LN_EPS):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "LayerNorm2d")
        mean = x.mean(dim=1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class DepthRB(nn.Module):
    """Depth-wise residual block: expand, depthwise 3x3, GELU, project, add."""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        hidden = channels * expansion
        self.channels = channels
        self.expand = conv1x1(channels, hidden)
        self.depthwise = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.project = conv1x1(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "DepthRB")
        return x + self.project(F.gelu(self.depthwise(self.expand(x))))


class GateBlock(nn.Module):
    """Gated pointwise interaction: ``out(gelu(a(x)) * b(x))``, bias-free."""

    def __init__(self, channels: int, expansion: int = 1, bias: bool = False):
        super().__init__()
        hidden = channels * expansion
        self.channels = channels
        self.proj_a = conv1x1(channels, hidden, bias=bias)
        self.proj_b = conv1x1(channels, hidden, bias=bias)
        self.proj_out = conv1x1(hidden, channels, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "GateBlock")
        return self.proj_out(F.gelu(self.proj_a(x)) * self.proj_b(x))


class STMBlock(nn.Module):
    """
    Simple token mixing block.

    ``x = x + Conv1x1(DWConv5x5(DepthRB(LN(x))))`` followed by
    ``x = x + Gate(LN(x))``.
    """

    def __init__(self, channels: int, depthrb_expansion: int = 2, gate_expansion: int = 1):
        super().__init__()
        self.channels = channels
        self.norm1 = LayerNorm2d(channels)
        self.depthrb = DepthRB(channels, depthrb_expansion)
        self.dwconv = nn.Conv2d(channels, channels, 5, padding=2, groups=channels)
        self.pwconv = conv1x1(channels, channels)
        self.norm2 = LayerNorm2d(channels)
        self.gate = GateBlock(channels, gate_expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "STMBlock")
        if not torch.isfinite(x).all():
            raise NumericError("STMBlock received non-finite input")
        x = x + self.pwconv(self.dwconv(self.depthrb(self.norm1(x))))
        x = x + self.gate(self.norm2(x))
        return x


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a GELU between them and an identity shortcut."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "ResidualBlock")
        return x + self.conv2(F.gelu(self.conv1(x)))


def conv_macs(
    kernel_size: int, in_channels: int, out_channels: int, h: int, w: int, groups: int = 1
) -> int:
    """Multiply-accumulates of a stride-1 'same' convolution on an h x w map."""
    return kernel_size * kernel_size * (in_channels // groups) * out_channels * h * w


def _stm_macs(c: int, h: int, w: int, depthrb_expansion: int, gate_expansion: int) -> int:
    hidden = c * depthrb_expansion
    gate_hidden = c * gate_expansion
    return (
        conv_macs(1, c, hidden, h, w)
        + conv_macs(3, hidden, hidden, h, w, groups=hidden)
        + conv_macs(1, hidden, c, h, w)
        + conv_macs(5, c, c, h, w, groups=c)
        + conv_macs(1, c, c, h, w)
        + 2 * conv_macs(1, c, gate_hidden, h, w)
        + conv_macs(1, gate_hidden, c, h, w)
    )


_MAC_SPECS: Dict[str, Callable[..., int]] = {
    "residual_block_3x3x2": lambda c, h, w, **_: 2 * conv_macs(3, c, c, h, w),
    "stm_block": lambda c, h, w, **kw: _stm_macs(c, h, w, **kw),
    "stm_block_x2": lambda c, h, w, **kw: 2 * _stm_macs(c, h, w, **kw),
    "dwconv5x5": lambda c, h, w, **_: conv_macs(5, c, c, h, w, groups=c),
    "conv1x1": lambda c, h, w, **_: conv_macs(1, c, c, h, w),
}


def count_macs(
    block_spec: str,
    c: int,
    h: int,
    w: int,
    depthrb_expansion: int = 2,
    gate_expansion: int = 1,
) -> int:
    """
    Exact multiply-accumulate count of a block.

    Parameters
    ----------
    block_spec : str
        One of ``residual_block_3x3x2``, ``stm_block``, ``stm_block_x2``,
        ``dwconv5x5``, ``conv1x1``.
    c, h, w : int
        Channels and spatial size of the feature map.

    Raises
    ------
    UsageError
        If ``block_spec`` is unknown
    """
    if block_spec not in _MAC_SPECS:
        available = ", ".join(sorted(_MAC_SPECS))
        raise UsageError(f"Unknown block spec '{block_spec}'. Available: {available}")
    return _MAC_SPECS[block_spec](
        c, h, w, depthrb_expansion=depthrb_expansion, gate_expansion=gate_expansion
    )


def profile_macs(model: nn.Module, input_shape: Tuple[int, ...]) -> int:
    """
    Count convolution and linear MACs of one forward pass with forward hooks.

    Attention products are not counted; the figure is comparable across
    transform variants, not an absolute cost.
    """
    total = 0

    def conv_hook(module, inputs, output):
        nonlocal total
        k = module.kernel_size[0] * module.kernel_size[1]
        total += output[0].numel() * k * module.in_channels // module.groups

    def deconv_hook(module, inputs, output):
        nonlocal total
        k = module.kernel_size[0] * module.kernel_size[1]
        total += inputs[0][0].numel() * k * module.out_channels // module.groups

    def linear_hook(module, inputs, output):
        nonlocal total
        total += output[0].numel() * module.in_features

    handles = []
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            handles.append(module.register_forward_hook(conv_hook))
        elif isinstance(module, nn.ConvTranspose2d):
            handles.append(module.register_forward_hook(deconv_hook))
        elif isinstance(module, nn.Linear):
            handles.append(module.register_forward_hook(linear_hook))

    try:
        param = next(model.parameters())
        with torch.no_grad():
            model(torch.zeros(input_shape, device=param.device, dtype=param.dtype))
    finally:
        for handle in handles:
            handle.remove()
    return total
