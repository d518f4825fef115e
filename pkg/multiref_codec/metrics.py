"""
Image quality metrics and Bjøntegaard rate comparison.

Usage:
    psnr(x, x_hat)                       # dB, inf for identical images
    ms_ssim(x, x_hat)                    # differentiable, batch mean
    bd_rate(anchor_curve, test_curve)    # percent, negative = savings
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import integrate, interpolate

from .errors import DomainError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
SSIM_K = (0.01, 0.03)
BD_SAMPLES = 1000


def _check_pair(x: torch.Tensor, x_hat: torch.Tensor):
    if x.shape != x_hat.shape:
        raise ShapeError(f"images differ in shape: {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def psnr(x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)`` over the whole tensor; ``inf`` if identical."""
    _check_pair(x, x_hat)
    mse = float(torch.mean((x.detach().double() - x_hat.detach().double()) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(data_range ** 2 / mse)


def capped_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    channels = x.shape[1]
    kernel_h = window.view(1, 1, 1, -1).repeat(channels, 1, 1, 1)
    kernel_v = window.view(1, 1, -1, 1).repeat(channels, 1, 1, 1)
    return F.conv2d(F.conv2d(x, kernel_h, groups=channels), kernel_v, groups=channels)


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, window: torch.Tensor, data_range: float):
    c1 = (SSIM_K[0] * data_range) ** 2
    c2 = (SSIM_K[1] * data_range) ** 2
    mu_x, mu_y = _blur(x, window), _blur(y, window)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_xx = _blur(x * x, window) - mu_xx
    sigma_yy = _blur(y * y, window) - mu_yy
    sigma_xy = _blur(x * y, window) - mu_xy
    cs_map = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    ssim_map = ((2 * mu_xy + c1) / (mu_xx + mu_yy + c1)) * cs_map
    return ssim_map.flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def max_msssim_levels(height: int, width: int, window_size: int = WINDOW_SIZE) -> int:
    """Largest number of scales (at most 5) the image supports."""
    levels = 0
    for candidate in range(1, len(MSSSIM_WEIGHTS) + 1):
        if min(height, width) > (window_size - 1) * 2 ** (candidate - 1):
            levels = candidate
    return levels


def ms_ssim(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    data_range: float = 1.0,
    levels: Optional[int] = None,
) -> torch.Tensor:
    """
    Multi-scale SSIM averaged over the batch.

    Five scales with the conventional weights; images too small for five
    scales use as many as fit, with the weights renormalized.

    Parameters
    ----------
    x, x_hat : Tensor
        (B, C, H, W) images in ``[0, data_range]``.
    levels : int, optional
        Number of scales; defaults to the largest supported.
    """
    _check_pair(x, x_hat)
    if x.dim() != 4:
        raise ShapeError(f"ms_ssim expects (B, C, H, W), got {tuple(x.shape)}")
    supported = max_msssim_levels(*x.shape[-2:])
    levels = supported if levels is None else levels
    if not 1 <= levels <= supported:
        raise ShapeError(
            f"image {tuple(x.shape[-2:])} supports at most {supported} MS-SSIM scales, "
            f"{levels} requested"
        )
    weights = torch.tensor(MSSSIM_WEIGHTS[:levels], dtype=x.dtype, device=x.device)
    if levels < len(MSSSIM_WEIGHTS):
        weights = weights / weights.sum()
    window = _gaussian_window(WINDOW_SIZE, WINDOW_SIGMA, x.dtype, x.device)

    mcs = []
    for level in range(levels):
        ssim, cs = _ssim_terms(x, x_hat, window, data_range)
        if level < levels - 1:
            mcs.append(torch.relu(cs))
            padding = [s % 2 for s in x.shape[2:]]
            x = F.avg_pool2d(x, kernel_size=2, padding=padding)
            x_hat = F.avg_pool2d(x_hat, kernel_size=2, padding=padding)
    stacked = torch.stack(mcs + [torch.relu(ssim)], dim=0)
    return torch.prod(stacked ** weights.view(-1, 1, 1), dim=0).mean()


def msssim_db(score: float) -> float:
    """``-10 log10(1 - score)``, for plotting only."""
    if score >= 1:
        return PSNR_CAP
    return -10 * math.log10(1 - score)


@dataclass
class RDPoint:
    bpp: float
    psnr_db: float
    msssim: float = math.nan
    encode_s: float = 0.0
    decode_s: float = 0.0
    image: str = ""
    quality: str = ""

    def __post_init__(self):
        if self.bpp < 0:
            raise ValidationError(f"bpp must be non-negative, got {self.bpp}")

    def quality_value(self, metric: str) -> float:
        if metric == "psnr":
            return capped_psnr(self.psnr_db)
        if metric == "ms-ssim":
            return msssim_db(self.msssim)
        raise ValidationError(f"unknown quality metric '{metric}'")


@dataclass
class RDCurve:
    """At least four rate-distortion points, kept sorted by bpp."""
    points: List[RDPoint] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        if len(self.points) < 4:
            raise ValidationError(f"an RD curve needs at least 4 points, got {len(self.points)}")
        self.points = sorted(self.points, key=lambda p: p.bpp)
        psnrs = [p.psnr_db for p in self.points]
        if any(b < a for a, b in zip(psnrs, psnrs[1:])):
            logger.warning("RD curve '%s' is not monotone: PSNR drops as bpp rises", self.label)

    @classmethod
    def from_points(cls, points: Iterable[RDPoint], label: str = "") -> "RDCurve":
        return cls(list(points), label)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    def qualities(self, metric: str = "psnr") -> np.ndarray:
        return np.array([p.quality_value(metric) for p in self.points], dtype=np.float64)

    def scaled(self, factor: float) -> "RDCurve":
        """Same qualities, every rate multiplied by ``factor``."""
        return RDCurve(
            [RDPoint(p.bpp * factor, p.psnr_db, p.msssim) for p in self.points],
            f"{self.label} x{factor:g}",
        )


def _log_rate_integral(
    quality: np.ndarray, log_rate: np.ndarray, low: float, high: float, method: str
) -> float:
    if method == "polynomial":
        poly = np.polyint(np.polyfit(quality, log_rate, 3))
        return float(np.polyval(poly, high) - np.polyval(poly, low))
    order = np.argsort(quality)
    samples = np.linspace(low, high, BD_SAMPLES)
    values = interpolate.pchip_interpolate(quality[order], log_rate[order], samples)
    return float(integrate.trapezoid(values, samples))


def bd_rate(
    anchor: RDCurve, test: RDCurve, metric: str = "psnr", method: str = "pchip"
) -> float:
    """
    Average rate difference of ``test`` against ``anchor`` at equal quality.

    Parameters
    ----------
    metric : str
        ``"psnr"`` or ``"ms-ssim"`` (in dB).
    method : str
        ``"pchip"`` (piecewise cubic Hermite, trapezoid integration) or
        ``"polynomial"`` (the classic cubic fit).

    Raises
    ------
    DomainError
        If the quality ranges do not overlap
    """
    if method not in ("pchip", "polynomial"):
        raise ValidationError(f"unknown BD-rate method '{method}'")
    q_anchor, q_test = anchor.qualities(metric), test.qualities(metric)
    low = max(q_anchor.min(), q_test.min())
    high = min(q_anchor.max(), q_test.max())
    if not high > low:
        raise DomainError(
            f"quality ranges do not overlap: [{q_anchor.min():.3f}, {q_anchor.max():.3f}] vs "
            f"[{q_test.min():.3f}, {q_test.max():.3f}]"
        )
    int_anchor = _log_rate_integral(q_anchor, np.log(anchor.rates), low, high, method)
    int_test = _log_rate_integral(q_test, np.log(test.rates), low, high, method)
    avg_diff = (int_test - int_anchor) / (high - low)
    return float((np.exp(avg_diff) - 1) * 100)


def mean_points(points: Sequence[RDPoint], quality: str = "") -> RDPoint:
    """Average of per-image points at one quality (PSNR averaged in dB)."""
    if not points:
        raise ValidationError("no points to average")
    return RDPoint(
        bpp=float(np.mean([p.bpp for p in points])),
        psnr_db=float(np.mean([capped_psnr(p.psnr_db) for p in points])),
        msssim=float(np.mean([p.msssim for p in points])),
        encode_s=float(np.mean([p.encode_s for p in points])),
        decode_s=float(np.mean([p.decode_s for p in points])),
        quality=quality,
    )
