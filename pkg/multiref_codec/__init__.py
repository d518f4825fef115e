"""
multiref_codec: a learned image codec with a multi-reference entropy model.

Images pass through stacked-transform-module analysis and synthesis
transforms; the latent is coded slice by slice in a checkerboard order,
each phase conditioned on inter- and intra-slice, local and global
contexts. Selective compression skips near-zero residuals and encoder-side
refinement tunes the latents of a single image.

Usage:
    from multiref_codec import MultiRefCodec, get_preset, encode_image, decode_image

    model = MultiRefCodec(get_preset("desk"))
    result = encode_image(x, model)          # x: (3, H, W) in [0, 1]
    result.bitstream.save("image.mlv2")
    x_hat = decode_image(result.bitstream, model).image

    # Or resolve trained weights from Checkpoints.toml
    model, entry = load_registry("Checkpoints.toml").load_model(3)
"""

__version__ = "0.1.0"

from .bitstream import Bitstream, BitstreamHeader
from .codec import (
    DecodeResult,
    EncodeResult,
    decode_image,
    encode_image,
    verify_round_trip,
)
from .config import (
    AblationCase,
    CodecConfig,
    TrainConfig,
    get_preset,
    lambdas_for,
    load_config,
    save_config,
)
from .errors import (
    CodecError,
    ConformanceError,
    FormatError,
    ParseError,
    RefinementDivergedError,
)
from .metrics import RDCurve, RDPoint, bd_rate, ms_ssim, psnr
from .model import MultiRefCodec
from .refine import refine
from .registry import (
    CheckpointRegistry,
    bind_checkpoint,
    get_cache_dir,
    load_registry,
    set_cache_dir,
    unbind_checkpoint,
)
from .report import report
from .train import (
    ingest_dataset,
    load_checkpoint,
    save_checkpoint,
    train_skip_predictor,
    train_stage1,
    train_stage2,
)

__all__ = [
    # Model and coding
    "MultiRefCodec",
    "encode_image",
    "decode_image",
    "verify_round_trip",
    "EncodeResult",
    "DecodeResult",
    "Bitstream",
    "BitstreamHeader",
    # Configuration
    "CodecConfig",
    "TrainConfig",
    "AblationCase",
    "get_preset",
    "lambdas_for",
    "load_config",
    "save_config",
    # Training and refinement
    "ingest_dataset",
    "train_stage1",
    "train_stage2",
    "train_skip_predictor",
    "save_checkpoint",
    "load_checkpoint",
    "refine",
    # Evaluation
    "psnr",
    "ms_ssim",
    "bd_rate",
    "RDPoint",
    "RDCurve",
    "report",
    # Checkpoint registry
    "CheckpointRegistry",
    "load_registry",
    "bind_checkpoint",
    "unbind_checkpoint",
    "set_cache_dir",
    "get_cache_dir",
    # Errors
    "CodecError",
    "FormatError",
    "ParseError",
    "ConformanceError",
    "RefinementDivergedError",
]
