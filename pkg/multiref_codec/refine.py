"""
Encoder-side latent refinement with stochastic Gumbel annealing.

The trained weights stay frozen; only the continuous latents ``y`` and ``z``
of one image are optimized against the rate-distortion loss, with rounding
replaced by an annealed stochastic relaxation. Selective compression is off
while refining; the refined latents are then coded by the usual encoder.

Usage:
    state = refine(x, model, steps=300, lr=1e-3)
    result = encode_image(x, model, latents=state.latents)
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import torch
from torch.distributions import RelaxedOneHotCategorical
from torch.utils.checkpoint import checkpoint
from tqdm import tqdm

from .errors import RefinementDivergedError
from .metrics import psnr
from .model import MultiRefCodec, Quantizer, RoundQuantizer
from .train import rd_loss
from .transforms import PAD_MULTIPLE, crop_image, pad_image

logger = logging.getLogger(__name__)

TAU_MAX = 0.5
TAU_DECAY = 1e-3
FRAC_CLAMP = 1e-4
DIVERGENCE_FACTOR = 10.0


def temperature_schedule(
    step: int, decay: float = TAU_DECAY, sign: float = -1.0, tau_max: float = TAU_MAX
) -> float:
    """``tau_j = min(tau_max, exp(sign * decay * j))``; decreasing for the default sign."""
    if step < 0:
        raise ValueError(f"refinement step must be >= 0, got {step}")
    return min(tau_max, math.exp(sign * decay * step))


def _sga_logits(values: torch.Tensor, tau: float) -> torch.Tensor:
    frac = (values - torch.floor(values)).clamp(FRAC_CLAMP, 1 - FRAC_CLAMP)
    return torch.stack([-torch.atanh(frac) / tau, -torch.atanh(1 - frac) / tau], dim=-1)


def sga_probabilities(values: torch.Tensor, tau: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Closed-form ``(P(round down), P(round up))`` for each element."""
    probs = torch.softmax(_sga_logits(values, tau), dim=-1)
    return probs[..., 0], probs[..., 1]


def sga_sample(
    values: torch.Tensor, tau: float, noise: Optional[torch.Tensor] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Stochastically round ``values`` to a neighboring integer.

    Parameters
    ----------
    values : Tensor
        Continuous values to round.
    tau : float
        Temperature of both the rounding distribution and the relaxation.
    noise : Tensor, optional
        Uniform(0, 1) draws of shape ``values.shape + (2,)``; used instead of
        fresh Gumbel noise so that samples are reproducible.

    Returns
    -------
    tuple
        ``(rounded, surrogate)``: the hard sample and its Gumbel-softmax
        relaxation, through which gradients flow.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    floor = torch.floor(values).detach()
    logits = _sga_logits(values, tau)
    if noise is None:
        weights = RelaxedOneHotCategorical(
            torch.tensor(tau, dtype=values.dtype, device=values.device), logits=logits
        ).rsample()
    else:
        tiny = torch.finfo(values.dtype).tiny
        gumbel = -torch.log(-torch.log(noise.clamp(tiny, 1.0)).clamp_min(tiny))
        weights = torch.softmax((torch.log_softmax(logits, dim=-1) + gumbel) / tau, dim=-1)
    up = weights[..., 1]
    rounded = floor + (weights.argmax(dim=-1) == 1).to(values.dtype)
    return rounded, floor + up


class SGAQuantizer(Quantizer):
    """Annealed stochastic rounding of zero-centered residuals."""

    def __init__(self, tau: float):
        self.tau = tau

    def latent(self, y, mu, r, skip=None):
        _, q = sga_sample(y - mu, self.tau)
        if skip is not None:
            q = q * skip
        return q + mu + r, q

    def side(self, z):
        _, z_tilde = sga_sample(z, self.tau)
        return z_tilde, z_tilde


@dataclass
class RefineState:
    """Latents being refined plus the per-step trace."""
    y: torch.Tensor
    z: torch.Tensor
    step: int = 0
    tau: float = TAU_MAX
    initial_loss: float = math.nan
    best_loss: float = math.nan
    best_step: int = 0
    log: List[Dict[str, float]] = field(default_factory=list)

    @property
    def latents(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.y, self.z


def _hard_loss(model: MultiRefCodec, x: torch.Tensor, size: Tuple[int, int], y, z) -> float:
    with torch.no_grad():
        run, _, y_bits, z_bits = model.entropy_forward(y, z, RoundQuantizer())
        x_hat = crop_image(model.g_s(run.y_hat), size)
        loss = rd_loss(x, x_hat, y_bits + z_bits, model.config.lmbda, model.config.metric)
    return float(loss)


def refine(
    x: torch.Tensor,
    model: MultiRefCodec,
    steps: int = 300,
    lr: float = 1e-3,
    eval_every: int = 10,
    log_csv: Optional[Union[str, Path]] = None,
    use_checkpointing: bool = False,
    tau_sign: float = -1.0,
    verbose: bool = False,
) -> RefineState:
    """
    Refine the latents of one image.

    Parameters
    ----------
    x : Tensor
        (3, H, W) or (1, 3, H, W) image in [0, 1].
    model : MultiRefCodec
        Trained codec; its weights are frozen for the duration and restored.
    steps : int
        Optimization steps; 0 returns the transform outputs unchanged.
    lr : float
        Adam learning rate for ``y`` and ``z``.
    eval_every : int
        Interval of the hard-rounded loss evaluation used to keep the best
        latents seen.
    log_csv : path, optional
        Write ``step, tau, loss, psnr, bpp`` per step.
    use_checkpointing : bool
        Recompute synthesis activations in the backward pass.

    Raises
    ------
    RefinementDivergedError
        If the hard-rounded loss exceeds ten times the initial loss.
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    padded, size = pad_image(x, PAD_MULTIPLE)
    was_training = model.training
    frozen = {name: p.requires_grad for name, p in model.named_parameters()}
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    try:
        with torch.no_grad():
            y0, z0 = model.analyze(padded)
        y = y0.clone().requires_grad_(True)
        z = z0.clone().requires_grad_(True)
        initial = _hard_loss(model, x, size, y0, z0)
        state = RefineState(
            y=y0,
            z=z0,
            tau=temperature_schedule(0, sign=tau_sign),
            initial_loss=initial,
            best_loss=initial,
        )
        logger.info("Refining latents for %d steps (initial loss %.5f)", steps, initial)
        optimizer = torch.optim.Adam([y, z], lr=lr)
        num_pixels = x.shape[-2] * x.shape[-1]

        for step in tqdm(range(steps), desc="refine", disable=not verbose):
            tau = temperature_schedule(step, sign=tau_sign)
            optimizer.zero_grad()
            run, _, y_bits, z_bits = model.entropy_forward(y, z, SGAQuantizer(tau))
            if use_checkpointing:
                x_hat = checkpoint(model.g_s, run.y_hat, use_reentrant=False)
            else:
                x_hat = model.g_s(run.y_hat)
            x_hat = crop_image(x_hat, size)
            bits = y_bits + z_bits
            loss = rd_loss(x, x_hat, bits, model.config.lmbda, model.config.metric)
            loss.backward()
            optimizer.step()

            state.step, state.tau = step + 1, tau
            state.log.append(
                {
                    "step": step + 1,
                    "tau": tau,
                    "loss": float(loss),
                    "psnr": psnr(x, x_hat.detach().clamp(0, 1)),
                    "bpp": float(bits) / num_pixels,
                }
            )
            if (step + 1) % eval_every == 0 or step + 1 == steps:
                current = _hard_loss(model, x, size, y.detach(), z.detach())
                if not math.isfinite(current) or current > DIVERGENCE_FACTOR * initial:
                    raise RefinementDivergedError(
                        f"refinement diverged at step {step + 1}: loss {current:.5f}, "
                        f"initial {initial:.5f}",
                        step=step + 1,
                        loss=current,
                        initial_loss=initial,
                    )
                if current < state.best_loss:
                    state.best_loss, state.best_step = current, step + 1
                    state.y, state.z = y.detach().clone(), z.detach().clone()
    finally:
        for name, p in model.named_parameters():
            p.requires_grad_(frozen[name])
        model.train(was_training)

    if log_csv is not None:
        write_refine_log(state.log, log_csv)
    logger.info(
        "Refinement done: loss %.5f -> %.5f (best at step %d)",
        state.initial_loss, state.best_loss, state.best_step,
    )
    return state


def write_refine_log(log: List[Dict[str, float]], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "tau", "loss", "psnr", "bpp"])
        writer.writeheader()
        writer.writerows(log)
