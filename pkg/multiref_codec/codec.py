"""
Image to ``.mlv2`` bitstream and back.

The encoder and the decoder drive the same ``MultiReferenceEntropyModel.run``
loop; they differ only in the phase callback, which either range-codes the
rounded residuals of a phase or reads them back. ``z_hat`` is coded first
under the factorized prior, then every slice's anchor and non-anchor phase.

Usage:
    result = encode_image(x, model, lambda_index=2)
    result.bitstream.save("kodim01.mlv2")
    image = decode_image(Bitstream.load("kodim01.mlv2"), model).image
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from .bitstream import FLAG_BUCKETED, FLAG_REFINED, FLAG_SKIP, Bitstream, BitstreamHeader
from .coding import pmf_to_cdf, quantize_pmf, range_decode, range_encode
from .entropy import MAX_RADIUS, discretized_gaussian_pmf, likelihood, rate_bits
from .entropy_model import PhaseResult, PhaseState
from .errors import ConformanceError, FormatError, ParseError, ShapeError
from .latent import ANCHOR, NON_ANCHOR, SIGMA_MIN, masked, split_slices
from .model import MultiRefCodec
from .selective import apply_skip
from .transforms import PAD_MULTIPLE, crop_image, pad_image, padded_size

logger = logging.getLogger(__name__)

BUCKET_COUNT = 64
SIGMA_MAX = 64.0

PhaseKey = Tuple[int, str]


def sigma_buckets(count: int = BUCKET_COUNT) -> np.ndarray:
    """Scales of the bucketed tables, log-spaced over ``[SIGMA_MIN, SIGMA_MAX]``."""
    return np.exp(np.linspace(np.log(SIGMA_MIN), np.log(SIGMA_MAX), count))


def bucket_index(sigma: np.ndarray, count: int = BUCKET_COUNT) -> np.ndarray:
    """Nearest bucket in the log domain."""
    step = (np.log(SIGMA_MAX) - np.log(SIGMA_MIN)) / (count - 1)
    position = (np.log(np.maximum(sigma, SIGMA_MIN)) - np.log(SIGMA_MIN)) / step
    return np.clip(np.rint(position), 0, count - 1).astype(np.int64)


def gaussian_tables(
    sigma: np.ndarray, radius: int, bucketed: bool
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cumulative tables and per-symbol table indexes for zero-mean residuals.

    Exact mode builds one table per element from its own scale; bucketed
    mode shares ``BUCKET_COUNT`` tables.
    """
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if bucketed:
        scales, indexes = sigma_buckets(), bucket_index(sigma)
    else:
        scales, indexes = sigma, np.arange(sigma.size)
    cdfs = pmf_to_cdf(quantize_pmf(discretized_gaussian_pmf(scales, radius)))
    return cdfs, indexes


def encode_symbols(
    symbols: torch.Tensor, sigma: torch.Tensor, bucketed: bool, where: str = ""
) -> bytes:
    """One radius byte followed by the range-coded residuals; empty input gives ``b""``."""
    if symbols.numel() == 0:
        return b""
    values = symbols.long().cpu().numpy().ravel()
    radius = int(np.abs(values).max())
    cdfs, indexes = gaussian_tables(sigma.double().cpu().numpy(), radius, bucketed)
    return bytes([radius]) + range_encode(values + radius, cdfs, indexes, where)


def decode_symbols(
    payload: bytes, sigma: torch.Tensor, bucketed: bool, where: str = ""
) -> torch.Tensor:
    count = sigma.numel()
    if count == 0:
        if payload:
            raise ParseError(f"{where}: {len(payload)} bytes for a phase with nothing coded")
        return torch.zeros(0, dtype=sigma.dtype, device=sigma.device)
    if not payload:
        raise ParseError(f"{where}: empty payload for {count} coded symbols")
    radius = payload[0]
    cdfs, indexes = gaussian_tables(sigma.double().cpu().numpy(), radius, bucketed)
    values = np.asarray(range_decode(payload[1:], cdfs, indexes), dtype=np.int64) - radius
    return torch.from_numpy(values).to(device=sigma.device, dtype=sigma.dtype)


def _side_tables(
    model: MultiRefCodec, shape: torch.Size, radius: int
) -> Tuple[np.ndarray, np.ndarray]:
    cdfs = pmf_to_cdf(quantize_pmf(model.z_prior.pmf_table(radius)))
    channels = np.arange(shape[1]).reshape(1, -1, 1, 1)
    return cdfs, np.broadcast_to(channels, tuple(shape)).ravel()


def encode_side(z_hat: torch.Tensor, model: MultiRefCodec) -> bytes:
    values = z_hat.long().cpu().numpy().ravel()
    radius = int(np.abs(values).max())
    cdfs, indexes = _side_tables(model, z_hat.shape, radius)
    return bytes([radius]) + range_encode(values + radius, cdfs, indexes, "z")


def decode_side(
    payload: bytes, model: MultiRefCodec, shape: Tuple[int, ...], device=None
) -> torch.Tensor:
    if not payload:
        raise ParseError("empty side-information payload")
    radius = payload[0]
    cdfs, indexes = _side_tables(model, torch.Size(shape), radius)
    values = np.asarray(range_decode(payload[1:], cdfs, indexes), dtype=np.float32) - radius
    return torch.from_numpy(values.reshape(shape)).to(device)


def _clamp_symbols(values: torch.Tensor, where: str) -> torch.Tensor:
    outside = values.abs() > MAX_RADIUS
    if outside.any():
        logger.warning(
            "Clamping %d %s symbols to +/-%d", int(outside.sum()), where, MAX_RADIUS
        )
        values = values.clamp(-MAX_RADIUS, MAX_RADIUS)
    return values


def _coded_positions(state: PhaseState) -> torch.Tensor:
    coded = state.mask.expand_as(state.params.mu)
    if state.skip is not None:
        coded = coded & (state.skip > 0.5)
    return coded


def _where(state: PhaseState) -> str:
    return f"slice {state.slice_index} {state.phase}"


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ShapeError(f"expected one (3, H, W) image, got {tuple(x.shape)}")
    return x


@dataclass
class EncodeResult:
    bitstream: Bitstream
    y_hat: torch.Tensor
    z_hat: torch.Tensor
    skip_maps: Dict[PhaseKey, torch.Tensor] = field(default_factory=dict)
    coded_symbols: int = 0
    skipped_symbols: int = 0
    estimated_bits: float = 0.0

    @property
    def num_pixels(self) -> int:
        return self.bitstream.header.orig_h * self.bitstream.header.orig_w

    @property
    def bpp(self) -> float:
        """Bits per pixel of the whole ``.mlv2`` file."""
        return 8 * len(self.bitstream) / self.num_pixels

    @property
    def skip_ratio(self) -> float:
        total = self.coded_symbols + self.skipped_symbols
        return self.skipped_symbols / total if total else 0.0

    def within_rate_budget(self, tolerance: float = 0.02, slack_bytes: int = 64) -> bool:
        """Entropy-coded bytes within ``tolerance`` of the estimate (either side) plus slack."""
        estimate = self.estimated_bits / 8
        return abs(self.bitstream.payload_bytes - estimate) <= estimate * tolerance + slack_bytes


@dataclass
class DecodeResult:
    image: torch.Tensor
    y_hat: torch.Tensor
    skip_maps: Dict[PhaseKey, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def encode_image(
    x: torch.Tensor,
    model: MultiRefCodec,
    lambda_index: int = 0,
    use_skip: bool = True,
    bucketed: bool = False,
    latents: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
) -> EncodeResult:
    """
    Encode one image in [0, 1].

    Parameters
    ----------
    x : Tensor
        (3, H, W) or (1, 3, H, W); padded internally to a multiple of 64.
    model : MultiRefCodec
        Trained codec; the decoder needs the same weights.
    lambda_index : int
        Quality index written into the header.
    use_skip : bool
        Selective compression; ignored if the model has no skip predictors.
    bucketed : bool
        Use the shared bucketed tables instead of per-element tables.
    latents : tuple, optional
        Refined ``(y, z)`` to code instead of the transform outputs.
    """
    model.eval()
    x = _as_batch(x)
    padded, (height, width) = pad_image(x, PAD_MULTIPLE)
    if latents is None:
        y, z = model.analyze(padded)
    else:
        y, z = latents
    use_skip = use_skip and model.supports_skip
    flags = (FLAG_SKIP if use_skip else 0) | (FLAG_BUCKETED if bucketed else 0)
    if latents is not None:
        flags |= FLAG_REFINED

    z_hat = _clamp_symbols(torch.round(z), "side")
    z_payload = encode_side(z_hat, model)
    estimated = float(rate_bits(model.z_prior.likelihood(z_hat)))
    hyper = model.h_s(z_hat)
    slices = split_slices(y, model.config.num_slices)
    payloads: Dict[PhaseKey, bytes] = {}
    skip_maps: Dict[PhaseKey, torch.Tensor] = {}
    counts = {"coded": 0, "skipped": 0}

    def code_phase(state: PhaseState) -> PhaseResult:
        nonlocal estimated
        mu, sigma = state.params.mu, state.params.sigma
        where = _where(state)
        q = _clamp_symbols(torch.round(slices[state.slice_index] - mu), where)
        coded = _coded_positions(state)
        q = apply_skip(masked(q, state.mask), state.skip)
        symbols, scales = q[coded], sigma[coded]
        payloads[state.key] = encode_symbols(symbols, scales, bucketed, where)
        if symbols.numel():
            p = likelihood(
                symbols, torch.zeros_like(scales), scales, model.gaussian_conditional
            )
            estimated += float(rate_bits(p))
        phase_total = int(state.mask.sum()) * mu.shape[1]
        counts["coded"] += symbols.numel()
        counts["skipped"] += phase_total - symbols.numel()
        if state.skip is not None:
            skip_maps[state.key] = state.mask & (state.skip > 0.5)
        return PhaseResult(y_hat=masked(q + mu + state.residual, state.mask), q=q)

    run = model.entropy_model.run(hyper, code_phase, use_skip=use_skip)
    header = BitstreamHeader(
        orig_h=height,
        orig_w=width,
        model_id=model.model_id,
        lambda_index=lambda_index,
        num_slices=model.config.num_slices,
        flags=flags,
    )
    slice_payloads = [
        (payloads[(i, ANCHOR)], payloads[(i, NON_ANCHOR)])
        for i in range(model.config.num_slices)
    ]
    bitstream = Bitstream(header, z_payload, slice_payloads)
    logger.debug(
        "Encoded %dx%d image: %d bytes, %d coded / %d skipped symbols",
        width, height, len(bitstream), counts["coded"], counts["skipped"],
    )
    return EncodeResult(
        bitstream=bitstream,
        y_hat=run.y_hat,
        z_hat=z_hat,
        skip_maps=skip_maps,
        coded_symbols=counts["coded"],
        skipped_symbols=counts["skipped"],
        estimated_bits=estimated,
    )


@torch.no_grad()
def decode_image(bitstream: Union[Bitstream, bytes], model: MultiRefCodec) -> DecodeResult:
    """
    Decode a bitstream produced by ``encode_image`` with the same weights.

    Raises
    ------
    FormatError
        If the bitstream was made by a different architecture
    ParseError
        On truncated or inconsistent payloads
    """
    if not isinstance(bitstream, Bitstream):
        bitstream = Bitstream.parse(bytes(bitstream))
    header = bitstream.header
    if header.model_id != model.model_id:
        raise FormatError(
            f"bitstream model_id {header.model_id} does not match model {model.model_id}"
        )
    if header.num_slices != model.config.num_slices:
        raise FormatError(
            f"bitstream has {header.num_slices} slices, model has {model.config.num_slices}"
        )
    if header.skip and not model.supports_skip:
        raise FormatError(
            "bitstream uses selective compression but the model has no skip predictors"
        )

    model.eval()
    device = next(model.parameters()).device
    pad_h, pad_w = padded_size(header.orig_h, header.orig_w, PAD_MULTIPLE)
    z_shape = (1, model.config.N, pad_h // PAD_MULTIPLE, pad_w // PAD_MULTIPLE)
    z_hat = decode_side(bitstream.z_payload, model, z_shape, device)
    hyper = model.h_s(z_hat)
    payloads = {}
    for i, (anchor, non_anchor) in enumerate(bitstream.slice_payloads):
        payloads[(i, ANCHOR)] = anchor
        payloads[(i, NON_ANCHOR)] = non_anchor
    skip_maps: Dict[PhaseKey, torch.Tensor] = {}

    def code_phase(state: PhaseState) -> PhaseResult:
        mu, sigma = state.params.mu, state.params.sigma
        coded = _coded_positions(state)
        values = decode_symbols(payloads[state.key], sigma[coded], header.bucketed, _where(state))
        q = torch.zeros_like(mu).masked_scatter(coded, values)
        if state.skip is not None:
            skip_maps[state.key] = state.mask & (state.skip > 0.5)
        return PhaseResult(y_hat=masked(q + mu + state.residual, state.mask), q=q)

    run = model.entropy_model.run(hyper, code_phase, use_skip=header.skip)
    x_hat = model.g_s(run.y_hat).clamp(0.0, 1.0)
    image = crop_image(x_hat, (header.orig_h, header.orig_w))
    return DecodeResult(image=image, y_hat=run.y_hat, skip_maps=skip_maps)


def verify_round_trip(x: torch.Tensor, model: MultiRefCodec, **encode_kwargs) -> EncodeResult:
    """
    Encode, serialize, parse and decode ``x``; the decoded latent and skip
    maps must equal the encoder's exactly.

    Raises
    ------
    ConformanceError
        On any mismatch
    """
    result = encode_image(x, model, **encode_kwargs)
    decoded = decode_image(Bitstream.parse(result.bitstream.serialize()), model)
    if not torch.equal(decoded.y_hat, result.y_hat):
        diff = int((decoded.y_hat != result.y_hat).sum())
        raise ConformanceError(f"decoded latent differs from the encoder's in {diff} elements")
    if decoded.skip_maps.keys() != result.skip_maps.keys() or any(
        not torch.equal(decoded.skip_maps[k], result.skip_maps[k]) for k in result.skip_maps
    ):
        raise ConformanceError("decoder skip maps differ from the encoder's")
    return result
