"""
The full learned codec: transforms, side-information prior and the
multi-reference entropy model.

Usage:
    model = MultiRefCodec(get_preset("desk"))
    out = model(x)                     # x: (B, 3, H, W), H and W multiples of 64
    loss = rd_loss(x, out.x_hat, out.bits, model.config.lmbda, "mse")
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from compressai.entropy_models import GaussianConditional
from torch import nn

from .config import CodecConfig
from .entropy import FactorizedPrior, likelihood, rate_bits
from .entropy_model import EntropyRun, MultiReferenceEntropyModel, PhaseResult, PhaseState
from .latent import SIGMA_MIN, QuantMode, masked, mixed_quantize, split_slices, ste_round
from .selective import apply_skip
from .transforms import AnalysisTransform, HyperAnalysis, HyperSynthesis, SynthesisTransform


class Quantizer:
    """How the latent and the side information are made discrete."""

    def latent(
        self,
        y: torch.Tensor,
        mu: torch.Tensor,
        r: torch.Tensor,
        skip: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Returns
        -------
        tuple
            ``(y_hat, q_rate)``: the reconstruction fed to the synthesis and
            the zero-centered values whose likelihood is the rate.
        """
        raise NotImplementedError

    def side(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """``(z_hat, z_rate)`` for the side information."""
        raise NotImplementedError


def _with_skip(q: torch.Tensor, mu: torch.Tensor, r: torch.Tensor, skip: Optional[torch.Tensor]):
    if skip is None:
        return q + mu + r
    return q * skip + mu + r


class MixedQuantizer(Quantizer):
    """Training: straight-through rounding for the synthesis, noise for the rate."""

    def latent(self, y, mu, r, skip=None):
        if skip is None:
            y_hat = mixed_quantize(y, mu, r, QuantMode.STE)
        else:
            y_hat = _with_skip(ste_round(y - mu), mu, r, skip)
        return y_hat, mixed_quantize(y, mu, r, QuantMode.AUN) - mu

    def side(self, z):
        return ste_round(z), z + torch.empty_like(z).uniform_(-0.5, 0.5)


class RoundQuantizer(Quantizer):
    """Inference: hard rounding everywhere."""

    def latent(self, y, mu, r, skip=None):
        q = torch.round(y - mu)
        if skip is None:
            return mixed_quantize(y, mu, r, QuantMode.ROUND), q
        return _with_skip(q, mu, r, skip), q

    def side(self, z):
        z_hat = torch.round(z)
        return z_hat, z_hat


@dataclass
class CodecOutput:
    x_hat: torch.Tensor
    y: torch.Tensor
    y_hat: torch.Tensor
    z_hat: torch.Tensor
    y_bits: torch.Tensor
    z_bits: torch.Tensor
    run: EntropyRun

    @property
    def bits(self) -> torch.Tensor:
        return self.y_bits + self.z_bits


class MultiRefCodec(nn.Module):
    """
    Learned image codec with a multi-reference entropy model.

    Parameters
    ----------
    config : CodecConfig
        Architecture, rate-distortion trade-off and ablation switches
    """

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.g_a = AnalysisTransform(config)
        self.g_s = SynthesisTransform(config)
        self.h_a = HyperAnalysis(config)
        self.h_s = HyperSynthesis(config)
        self.z_prior = FactorizedPrior(config.N)
        self.gaussian_conditional = GaussianConditional(None, scale_bound=SIGMA_MIN)
        self.entropy_model = MultiReferenceEntropyModel(config)

    @property
    def model_id(self) -> int:
        return self.config.model_id

    @property
    def supports_skip(self) -> bool:
        return self.entropy_model.supports_skip

    def analyze(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        y = self.g_a(x)
        return y, self.h_a(y)

    def entropy_forward(
        self,
        y: torch.Tensor,
        z: torch.Tensor,
        quantizer: Quantizer,
        use_skip: bool = False,
        hyperprior_only: Optional[bool] = None,
    ) -> Tuple[EntropyRun, torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Quantize ``y`` and ``z`` and estimate their rates.

        Returns
        -------
        tuple
            ``(run, z_hat, y_bits, z_bits)``
        """
        z_hat, z_rate = quantizer.side(z)
        z_bits = rate_bits(self.z_prior.likelihood(z_rate))
        hyper = self.h_s(z_hat)
        slices = split_slices(y, self.config.num_slices)
        y_bits = []

        def code_phase(state: PhaseState) -> PhaseResult:
            y_i = slices[state.slice_index]
            mu, sigma = state.params.mu, state.params.sigma
            y_hat, q_rate = quantizer.latent(y_i, mu, state.residual, state.skip)
            p = likelihood(q_rate, torch.zeros_like(mu), sigma, self.gaussian_conditional)
            coded = state.mask.expand_as(p)
            if state.skip is not None:
                coded = coded & (state.skip > 0.5)
            y_bits.append(rate_bits(p[coded]))
            target = masked(torch.round(y_i - mu).detach(), state.mask)
            q = apply_skip(target, state.skip)
            return PhaseResult(y_hat=masked(y_hat, state.mask), q=q, likelihood=p, target=target)

        run = self.entropy_model.run(hyper, code_phase, use_skip, hyperprior_only)
        return run, z_hat, torch.stack(y_bits).sum(), z_bits

    def forward(
        self,
        x: torch.Tensor,
        quantizer: Optional[Quantizer] = None,
        use_skip: bool = False,
        hyperprior_only: Optional[bool] = None,
    ) -> CodecOutput:
        if quantizer is None:
            quantizer = MixedQuantizer() if self.training else RoundQuantizer()
        y, z = self.analyze(x)
        run, z_hat, y_bits, z_bits = self.entropy_forward(
            y, z, quantizer, use_skip, hyperprior_only
        )
        x_hat = self.g_s(run.y_hat)
        return CodecOutput(
            x_hat=x_hat, y=y, y_hat=run.y_hat, z_hat=z_hat, y_bits=y_bits, z_bits=z_bits, run=run
        )
