"""
Probability models: the discretized Gaussian for the latent and the
factorized prior for the side information.
"""

import functools
import logging
from typing import Optional, Sequence

import numpy as np
import torch
from compressai.entropy_models import EntropyBottleneck, GaussianConditional
from scipy.special import ndtr
from torch import nn

from .errors import ShapeError
from .latent import SIGMA_MIN, GaussianParams, lower_bound

logger = logging.getLogger(__name__)

PMF_FLOOR = 2.0 ** -16
MAX_RADIUS = 255


@functools.lru_cache(maxsize=None)
def _shared_conditional(device: torch.device) -> GaussianConditional:
    return GaussianConditional(None, scale_bound=SIGMA_MIN).to(device)


def likelihood(
    values: torch.Tensor,
    mu: torch.Tensor,
    sigma: torch.Tensor,
    conditional: Optional[GaussianConditional] = None,
) -> torch.Tensor:
    """
    Probability of each value under a unit-bin discretized Gaussian.

    ``Phi((v + 0.5 - mu) / sigma) - Phi((v - 0.5 - mu) / sigma)``, computed by
    ``conditional`` (a shared one per device when omitted). Scales below
    ``SIGMA_MIN`` are clamped with a warning.
    """
    if values.shape != mu.shape or values.shape != sigma.shape:
        raise ShapeError(
            f"values {tuple(values.shape)}, mu {tuple(mu.shape)} and "
            f"sigma {tuple(sigma.shape)} must match"
        )
    if (sigma < SIGMA_MIN).any():
        logger.warning(
            "Clamping %d scales below sigma_min=%.2f", int((sigma < SIGMA_MIN).sum()), SIGMA_MIN
        )
    if conditional is None:
        conditional = _shared_conditional(values.device)
    probs = conditional._likelihood(values, sigma, mu)
    if conditional.use_likelihood_bound:
        probs = conditional.likelihood_lower_bound(probs)
    return probs


def rate_bits(likelihoods: torch.Tensor) -> torch.Tensor:
    """Total information content ``sum(-log2 p)``; probabilities are floored at ``PMF_FLOOR``."""
    return -torch.log2(lower_bound(likelihoods, PMF_FLOOR)).sum()


def estimate_rate(values: torch.Tensor, params: GaussianParams) -> torch.Tensor:
    """Estimated bits of ``values`` under ``params``."""
    return rate_bits(likelihood(values, params.mu, params.sigma))


def floor_pmf(pmf: np.ndarray) -> np.ndarray:
    """Mix a normalized PMF with a uniform floor so every entry is >= ``PMF_FLOOR``."""
    size = pmf.shape[-1]
    pmf = pmf / pmf.sum(axis=-1, keepdims=True)
    return (1.0 - size * PMF_FLOOR) * pmf + PMF_FLOOR


def discretized_gaussian_pmf(sigma, radius: int) -> np.ndarray:
    """
    Zero-mean discretized Gaussian over the integers ``[-radius, radius]``.

    Tail mass beyond the support is folded into the two endpoints, then the
    PMF is floored.

    Parameters
    ----------
    sigma : array_like
        Scales, any shape S.
    radius : int
        Support radius T, at most 255.

    Returns
    -------
    ndarray
        Shape ``S + (2T + 1,)``, float64, rows summing to one.
    """
    if not 0 <= radius <= MAX_RADIUS:
        raise ValueError(f"radius must be in [0, {MAX_RADIUS}], got {radius}")
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)[..., None]
    support = np.arange(-radius, radius + 1, dtype=np.float64)
    upper = ndtr((support + 0.5) / sigma)
    lower = ndtr((support - 0.5) / sigma)
    upper[..., -1] = 1.0
    lower[..., 0] = 0.0
    return floor_pmf(upper - lower)


class FactorizedPrior(nn.Module):
    """
    Learned per-channel CDF for the side information ``z_hat``.

    Wraps an ``EntropyBottleneck``, whose softplus weights keep each channel's
    logit-CDF monotone in its input. Values are rounded to the integer grid
    (zero-centered).
    """

    def __init__(
        self, channels: int, init_scale: float = 10.0, filters: Sequence[int] = (3, 3, 3, 3)
    ):
        super().__init__()
        self.channels = channels
        self.entropy_bottleneck = EntropyBottleneck(
            channels, init_scale=init_scale, filters=tuple(filters)
        )

    def _to_rows(self, x: torch.Tensor):
        if x.dim() < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {tuple(x.shape)}")
        transposed = x.transpose(0, 1)
        return transposed.reshape(self.channels, 1, -1), transposed.shape

    @staticmethod
    def _from_rows(rows: torch.Tensor, shape) -> torch.Tensor:
        return rows.reshape(shape).transpose(0, 1)

    def logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """Logit of the CDF at every element of a (B, C, ...) tensor."""
        rows, shape = self._to_rows(x)
        logits = self.entropy_bottleneck._logits_cumulative(rows, stop_gradient=False)
        return self._from_rows(logits, shape)

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cumulative(x))

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        rows, shape = self._to_rows(z)
        probs, _, _ = self.entropy_bottleneck._likelihood(rows)
        if self.entropy_bottleneck.use_likelihood_bound:
            probs = self.entropy_bottleneck.likelihood_lower_bound(probs)
        return self._from_rows(probs, shape)

    @torch.no_grad()
    def pmf_table(self, radius: int) -> np.ndarray:
        """(C, 2T+1) floored PMFs over ``[-T, T]`` with folded tails."""
        if not 0 <= radius <= MAX_RADIUS:
            raise ValueError(f"radius must be in [0, {MAX_RADIUS}], got {radius}")
        param = self.entropy_bottleneck.quantiles
        support = torch.arange(-radius, radius + 1, device=param.device, dtype=param.dtype)
        grid = support.view(1, 1, -1).expand(1, self.channels, -1)
        upper = self.cdf(grid + 0.5).double().cpu().numpy()[0]
        lower = self.cdf(grid - 0.5).double().cpu().numpy()[0]
        upper[:, -1] = 1.0
        lower[:, 0] = 0.0
        return floor_pmf(np.clip(upper - lower, 0.0, None))
