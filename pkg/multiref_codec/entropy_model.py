"""
The multi-reference entropy model.

``MultiReferenceEntropyModel.run`` walks the slices in order and, inside each
slice, the anchor phase before the non-anchor phase. For every phase it
builds the contexts that are legal at that point, predicts Gaussian
parameters, the residual correction and (optionally) the skip map, and hands
them to a caller-supplied ``code_phase`` callback. The callback quantizes,
codes or decodes the phase and returns its reconstruction, which becomes
context for everything after it. Training, encoding and decoding all share
this one loop, so the order in which information becomes visible is
identical on both sides of the channel.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import torch
from torch import nn

from .config import CodecConfig
from .contexts import (
    ContextBundle,
    ContextReweight,
    HyperGuidedGlobalContext,
    InterSliceGlobalContext,
    InterSliceLocalContext,
    IntraSliceGlobalContext,
    IntraSliceLocalContext,
    legal_members,
)
from .errors import UsageError
from .latent import (
    ANCHOR,
    NON_ANCHOR,
    PHASES,
    EntropyParameters,
    GaussianParams,
    HyperpriorHead,
    LatentResidualPrediction,
    masked,
    merge_slices,
    phase_mask,
)
from .selective import SkipPredictor, scale_threshold_init


@dataclass
class PhaseState:
    """Everything the decoder knows about one slice phase before coding it."""
    slice_index: int
    phase: str
    mask: torch.Tensor
    params: GaussianParams
    residual: torch.Tensor
    skip_init: Optional[torch.Tensor] = None
    epsilon: Optional[torch.Tensor] = None
    skip: Optional[torch.Tensor] = None

    @property
    def key(self) -> Tuple[int, str]:
        return (self.slice_index, self.phase)


@dataclass
class PhaseResult:
    """
    Outcome of coding one phase.

    ``y_hat`` and ``q`` are zero outside the phase positions; ``q`` holds the
    integer residuals that were actually coded (zero where skipped).
    """
    y_hat: torch.Tensor
    q: torch.Tensor
    likelihood: Optional[torch.Tensor] = None
    target: Optional[torch.Tensor] = None


@dataclass
class EntropyRun:
    y_hat: torch.Tensor
    phases: Dict[Tuple[int, str], Tuple[PhaseState, PhaseResult]] = field(default_factory=dict)


CodePhase = Callable[[PhaseState], PhaseResult]


def _key(slice_index: int, phase: str) -> str:
    return f"{slice_index}_{phase}"


class MultiReferenceEntropyModel(nn.Module):
    """Per-slice context modules, parameter networks and skip predictors."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.num_slices = config.num_slices
        self.slice_channels = cs = config.slice_channels
        cc = config.context_channels
        hc = config.hyper_out_channels
        ablation = config.ablation
        self.hyperprior_only = config.entropy_model == "hyperprior"

        self.hyper_head = HyperpriorHead(hc, config.M)

        def reweight():
            return ContextReweight(cc, gate=ablation.gate) if ablation.cr else None

        self.inter_local = nn.ModuleDict()
        self.inter_global = nn.ModuleDict()
        self.intra_local = nn.ModuleDict()
        self.intra_global = nn.ModuleDict()
        self.entropy_parameters = nn.ModuleDict()
        self.residual_prediction = nn.ModuleDict()
        self.skip_predictors = nn.ModuleDict()
        self.hgcp = None
        if self.hyperprior_only:
            return

        if ablation.hgcp:
            self.hgcp = HyperGuidedGlobalContext(
                hc, cs, cc, rope=ablation.rope, gate=ablation.gate, reweight=reweight()
            )
        widths = {
            "hyper": hc,
            "inter_local": cc,
            "inter_global": cc,
            "intra_local": cc,
            "intra_global": cc,
        }
        for i in range(self.num_slices):
            index = str(i)
            if i > 0:
                self.inter_local[index] = InterSliceLocalContext(i * cs, cc, reweight=reweight())
                self.inter_global[index] = InterSliceGlobalContext(
                    i * cs, cc, rope=ablation.rope, gate=ablation.gate, reweight=reweight()
                )
                self.intra_global[index] = IntraSliceGlobalContext(
                    cs, cc, rope=ablation.rope, gate=ablation.gate, reweight=reweight()
                )
            self.intra_local[index] = IntraSliceLocalContext(
                cs, cc, config.window_size, config.window_overlap, reweight=reweight()
            )
            for phase in PHASES:
                members = legal_members(i, phase, hgcp=ablation.hgcp)
                self.entropy_parameters[_key(i, phase)] = EntropyParameters(
                    members, [widths[m] for m in members], cs
                )
                if ablation.ilr:
                    self.residual_prediction[_key(i, phase)] = LatentResidualPrediction(
                        hc, i * cs, cs, phase
                    )
                if ablation.gsc:
                    priors = (i + (phase == NON_ANCHOR)) * cs
                    self.skip_predictors[_key(i, phase)] = SkipPredictor(cs, priors, hc)

    @property
    def supports_skip(self) -> bool:
        return len(self.skip_predictors) > 0

    def inter_contexts(
        self, slice_index: int, decoded: List[torch.Tensor]
    ) -> Dict[str, torch.Tensor]:
        index = str(slice_index)
        return {
            "inter_local": self.inter_local[index](decoded),
            "inter_global": self.inter_global[index](decoded),
        }

    def bundle(
        self,
        slice_index: int,
        phase: str,
        hyper: torch.Tensor,
        inter: Dict[str, torch.Tensor],
        decoded: List[torch.Tensor],
        anchor: Optional[torch.Tensor],
    ) -> ContextBundle:
        """Contexts visible to ``(slice_index, phase)``."""
        contexts = dict(inter)
        if phase == NON_ANCHOR:
            if anchor is None:
                raise UsageError("non-anchor contexts need the decoded anchors")
            contexts["intra_local"] = self.intra_local[str(slice_index)](anchor)
            if slice_index > 0:
                prev = decoded[slice_index - 1]
                height, width = prev.shape[-2:]
                contexts["intra_global"] = self.intra_global[str(slice_index)](
                    masked(prev, phase_mask(ANCHOR, height, width, prev.device)),
                    masked(prev, phase_mask(NON_ANCHOR, height, width, prev.device)),
                    anchor,
                )
            elif self.hgcp is not None:
                contexts["intra_global"] = self.hgcp(hyper, anchor)
        return ContextBundle(hyper=hyper, **contexts)

    def phase_parameters(
        self,
        slice_index: int,
        phase: str,
        hyper: torch.Tensor,
        inter: Dict[str, torch.Tensor],
        decoded: List[torch.Tensor],
        anchor: Optional[torch.Tensor],
    ) -> Tuple[GaussianParams, torch.Tensor]:
        key = _key(slice_index, phase)
        bundle = self.bundle(slice_index, phase, hyper, inter, decoded, anchor)
        params = self.entropy_parameters[key](bundle)
        if key in self.residual_prediction:
            residual = self.residual_prediction[key](decoded, anchor, hyper)
        else:
            residual = torch.zeros_like(params.mu)
        return params, residual

    def run(
        self,
        hyper: torch.Tensor,
        code_phase: CodePhase,
        use_skip: bool = False,
        hyperprior_only: Optional[bool] = None,
    ) -> EntropyRun:
        """
        Code every slice phase in decoding order.

        Parameters
        ----------
        hyper : Tensor
            Hyperprior features ``H``, spatially aligned with the latent.
        code_phase : callable
            Receives a ``PhaseState`` and returns the ``PhaseResult``.
        use_skip : bool
            Predict skip maps for every phase.
        hyperprior_only : bool, optional
            Use the hyperprior head instead of the context model (stage-1
            training and the hyperprior baseline).
        """
        if hyperprior_only is None:
            hyperprior_only = self.hyperprior_only
        if use_skip and (hyperprior_only or not self.supports_skip):
            raise UsageError("selective compression is not available for this entropy model")

        cs = self.slice_channels
        height, width = hyper.shape[-2:]
        head = self.hyper_head(hyper) if hyperprior_only else None
        decoded: List[torch.Tensor] = []
        residuals: List[torch.Tensor] = []
        phases: Dict[Tuple[int, str], Tuple[PhaseState, PhaseResult]] = {}

        for i in range(self.num_slices):
            inter = {} if hyperprior_only or i == 0 else self.inter_contexts(i, decoded)
            anchor: Optional[torch.Tensor] = None
            current: List[torch.Tensor] = []
            for phase in PHASES:
                mask = phase_mask(phase, height, width, hyper.device)
                if head is not None:
                    channels = slice(i * cs, (i + 1) * cs)
                    params = GaussianParams(head.mu[:, channels], head.sigma[:, channels])
                    residual = torch.zeros_like(params.mu)
                else:
                    params, residual = self.phase_parameters(
                        i, phase, hyper, inter, decoded, anchor
                    )
                state = PhaseState(i, phase, mask, params, residual)
                if use_skip:
                    priors = residuals + current
                    state.skip_init = scale_threshold_init(params.sigma, self.config.skip_threshold)
                    state.epsilon, state.skip = self.skip_predictors[_key(i, phase)](
                        state.skip_init, torch.cat(priors, dim=1) if priors else None, hyper
                    )
                result = code_phase(state)
                phases[state.key] = (state, result)
                current.append(result.q)
                if phase == ANCHOR:
                    anchor = result.y_hat
            decoded.append(anchor + result.y_hat)
            residuals.append(current[0] + current[1])

        return EntropyRun(y_hat=merge_slices(decoded), phases=phases)
