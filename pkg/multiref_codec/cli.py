"""
Command-line interface.

Usage:
    multiref-codec train --config desk.toml --data data/train --out runs/q3 --lambda-index 3 \
        --bind Checkpoints.toml
    multiref-codec encode kodim01.png -o kodim01.mlv2 --quality 3 [--refine 300] [--no-skip]
    multiref-codec decode kodim01.mlv2 -o kodim01_hat.png
    multiref-codec refine kodim01.png -o kodim01.mlv2 --checkpoint runs/q3/skip.pt --steps 300
    multiref-codec eval --data data/kodak --out report/ --checkpoint runs/q0/skip.pt ...
    multiref-codec bench
    multiref-codec dump-attn kodim01.png --checkpoint runs/q3/skip.pt -o attention/
    multiref-codec upper-bound --config desk.toml --data data/train --eval data/kodak --out ub/
    multiref-codec context-benefit --full runs/q3/final.pt --baseline runs/q3h/final.pt \
        --data data/kodak --out report/

Models are taken from ``--checkpoint`` when given, otherwise from the
Checkpoints.toml registry by quality index.

Exit codes: 0 success, 1 any other error, 2 malformed bitstream,
3 conformance failure.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch

from . import __version__
from .bitstream import Bitstream
from .codec import decode_image, encode_image, verify_round_trip
from .config import CodecConfig, TrainConfig, get_preset, lambdas_for, load_config
from .errors import CheckpointError, CodecError, CodingError, ConformanceError, FormatError
from .model import MultiRefCodec
from .refine import refine
from .registry import (
    CheckpointRegistry,
    bind_checkpoint,
    checkpoint_name,
    load_registry,
    resolve_model,
)
from .report import context_benefit, dump_attention, mac_audit, report, upper_bound_report
from .train import (
    ingest_dataset,
    load_checkpoint,
    save_checkpoint,
    train_hyperprior_baseline,
    train_skip_predictor,
    train_stage1,
    train_stage2,
)
from .utils import list_images, load_image, save_image

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FORMAT = 2
EXIT_CONFORMANCE = 3


def _load_model(args: argparse.Namespace, quality: int) -> Tuple[MultiRefCodec, int]:
    key = args.checkpoint if args.checkpoint else quality
    model, index = resolve_model(key, args.registry, map_location=args.device)
    return model, quality if args.checkpoint else index


def _encode(
    args: argparse.Namespace, image: Path, output: Path, refine_steps: int, lr: float = 1e-3,
    log_csv: Optional[Path] = None,
) -> int:
    model, quality = _load_model(args, args.quality)
    x = load_image(image).to(args.device)
    latents = None
    if refine_steps > 0:
        state = refine(x, model, steps=refine_steps, lr=lr, log_csv=log_csv, verbose=args.verbose)
        latents = state.latents
    result = encode_image(
        x,
        model,
        lambda_index=quality,
        use_skip=not args.no_skip,
        bucketed=args.bucketed,
        latents=latents,
    )
    result.bitstream.save(output)
    print(
        f"{output}: {len(result.bitstream)} bytes, {result.bpp:.4f} bpp, "
        f"skip ratio {result.skip_ratio:.3f}"
    )
    return EXIT_OK


def cmd_encode(args: argparse.Namespace) -> int:
    return _encode(args, Path(args.image), Path(args.output), args.refine)


def cmd_refine(args: argparse.Namespace) -> int:
    log_csv = Path(args.log_csv) if args.log_csv else None
    return _encode(args, Path(args.image), Path(args.output), args.steps, args.lr, log_csv)


def cmd_decode(args: argparse.Namespace) -> int:
    bitstream = Bitstream.load(args.input)
    model, _ = _load_model(args, bitstream.header.lambda_index)
    try:
        result = decode_image(bitstream, model)
    except CodingError as e:
        raise FormatError(f"corrupt payload: {e}") from e
    save_image(result.image, args.output)
    print(f"{args.output}: {bitstream.header.orig_w}x{bitstream.header.orig_h}")
    return EXIT_OK


def _training_configs(args: argparse.Namespace) -> Tuple[CodecConfig, TrainConfig]:
    if args.config:
        codec, train = load_config(args.config)
    else:
        codec, train = get_preset("desk"), TrainConfig()
    if args.lambda_index is not None:
        codec = codec.replace(lmbda=lambdas_for(codec.metric)[args.lambda_index])
    return codec, train


def cmd_train(args: argparse.Namespace) -> int:
    codec, train = _training_configs(args)
    out_dir = Path(args.out)
    dataset = ingest_dataset(
        args.data,
        patch_size=train.patch_size,
        min_bpp=train.min_bpp,
        jpeg_downsample=train.jpeg_downsample,
        seed=train.seed,
    )
    model = None
    if args.resume:
        model, meta = load_checkpoint(args.resume, map_location=args.device)
        logger.info(
            "Resuming from %s (stage %s, step %s)", args.resume, meta["stage"], meta["step"]
        )
    elif args.stage in ("2", "skip"):
        raise CheckpointError(f"stage {args.stage} needs --resume with earlier weights")

    if args.stage == "all" and codec.entropy_model == "hyperprior":
        model = train_hyperprior_baseline(
            codec, train, dataset, out_dir, args.device, args.verbose
        ).model
    else:
        if args.stage in ("1", "all"):
            model = train_stage1(codec, train, dataset, out_dir, args.device, args.verbose).model
        if args.stage in ("2", "all"):
            model = train_stage2(model, train, dataset, out_dir, args.device, args.verbose).model
    if args.stage == "skip" or (args.stage == "all" and model.supports_skip):
        result = train_skip_predictor(model, train, dataset, out_dir, args.device, args.verbose)
        model = result.model
    final = save_checkpoint(out_dir / "final.pt", model, stage=args.stage, step=0)
    print(f"Saved {final}")
    if args.bind:
        quality = args.lambda_index if args.lambda_index is not None else 0
        name = checkpoint_name(codec.metric, quality)
        bind_checkpoint(
            args.bind, name, final, quality, model.config.lmbda, model.config.metric,
            force=True, stage=args.stage,
        )
        print(f"Bound {final} as '{name}' in {args.bind}")
    return EXIT_OK


def _eval_sources(args: argparse.Namespace) -> Dict[str, object]:
    if args.checkpoint:
        sources = {}
        for path in args.checkpoint:
            path = Path(path)
            label = path.stem if path.stem not in sources else f"{path.parent.name}_{path.stem}"
            sources[label] = path
        return sources
    registry: CheckpointRegistry = load_registry(args.registry, verbose=args.verbose)
    sources = {}
    for name in registry.names():
        try:
            sources[name] = registry.get_path(name)
        except RuntimeError as e:
            logger.warning("Checkpoint '%s' unavailable: %s", name, e)
            sources[name] = Path(registry.entries[name].path or name)
    return sources


def cmd_eval(args: argparse.Namespace) -> int:
    result = report(
        _eval_sources(args),
        args.data,
        args.out,
        use_skip=not args.no_skip,
        refine_steps=args.refine,
        full_params=args.full_params,
        workers=args.workers,
        device=args.device,
    )
    print(f"{len(result.points)} RD points written to {args.out}")
    if result.missing:
        print(f"{len(result.missing)} checkpoints missing, see {result.files['missing']}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint, map_location=args.device)
    else:
        torch.manual_seed(args.seed)
        model = MultiRefCodec(get_preset("desk")).to(args.device)
    audit = mac_audit(
        depthrb_expansion=model.config.depthrb_expansion,
        gate_expansion=model.config.gate_expansion,
    )
    print(
        f"MAC audit: 2x STM {audit['stm_macs']:,} / residual {audit['residual_macs']:,} "
        f"= {audit['ratio']:.4f}"
    )

    generator = torch.Generator().manual_seed(args.seed)
    failures: List[str] = []
    for i in range(args.count):
        x = torch.rand(3, args.size, args.size, generator=generator).to(args.device)
        for use_skip in (True, False):
            result = verify_round_trip(x, model, use_skip=use_skip, bucketed=args.bucketed)
            if not result.within_rate_budget():
                failures.append(
                    f"image {i} (skip={use_skip}): {result.bitstream.payload_bytes} bytes vs "
                    f"estimate {result.estimated_bits / 8:.1f}"
                )
    if failures:
        raise ConformanceError("rate audit failed: " + "; ".join(failures))
    print(f"Round trip: {args.count} images bit-exact, rate within budget")
    return EXIT_OK


def cmd_dump_attn(args: argparse.Namespace) -> int:
    model, _ = _load_model(args, args.quality)
    written = dump_attention(model, load_image(args.image).to(args.device), args.output)
    print(f"{len(written)} files written to {args.output}")
    return EXIT_OK


def cmd_upper_bound(args: argparse.Namespace) -> int:
    codec, train = _training_configs(args)
    if args.steps is not None:
        train = dataclasses.replace(train, upper_bound_steps=args.steps)
    dataset = ingest_dataset(
        args.data,
        patch_size=train.patch_size,
        min_bpp=train.min_bpp,
        jpeg_downsample=train.jpeg_downsample,
        seed=train.seed,
    )
    images = [load_image(path) for path in list_images(args.eval or args.data)]
    rows = upper_bound_report(
        codec, train, dataset, images, args.out, tuple(args.blocks), args.device, args.verbose
    )
    for row in rows:
        print(f"{row['stm_blocks']} STM blocks per stage: {row['psnr_db']:.2f} dB")
    return EXIT_OK


def cmd_context_benefit(args: argparse.Namespace) -> int:
    full, _ = load_checkpoint(args.full, map_location=args.device)
    baseline, _ = load_checkpoint(args.baseline, map_location=args.device)
    summary = context_benefit(full, baseline, list_images(args.data), args.out)
    print(
        f"multiref {summary['multiref_bpp']:.4f} bpp, hyperprior {summary['hyperprior_bpp']:.4f} "
        f"bpp ({100 * summary['bpp_saving']:.2f}% saved)"
    )
    return EXIT_OK


def _add_model_args(parser: argparse.ArgumentParser, quality: bool = True):
    parser.add_argument("--checkpoint", help="Checkpoint file (overrides the registry)")
    parser.add_argument("--registry", help="Checkpoints.toml (default: ./Checkpoints.toml)")
    if quality:
        parser.add_argument("--quality", type=int, default=0, help="Quality index")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multiref-codec",
        description="Learned image codec with a multi-reference entropy model.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Progress bars and debug logs")
    parser.add_argument("--device", default="cpu", help="Torch device")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a codec")
    p.add_argument("--config", help="TOML file with [codec] and [train] tables")
    p.add_argument("--stage", choices=("1", "2", "skip", "all"), default="all")
    p.add_argument("--resume", help="Checkpoint to continue from")
    p.add_argument("--data", required=True, help="Training image directory")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--lambda-index", type=int, help="Use the preset lambda at this index")
    p.add_argument("--bind", metavar="REGISTRY", help="Bind the final checkpoint in this TOML")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="Compress an image to .mlv2")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    _add_model_args(p)
    p.add_argument("--refine", type=int, default=0, metavar="STEPS", help="Latent refinement")
    p.add_argument("--no-skip", action="store_true", help="Disable selective compression")
    p.add_argument("--bucketed", action="store_true", help="Use bucketed coding tables")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="Decompress a .mlv2 file")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    _add_model_args(p, quality=False)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("refine", help="Refine latents, then encode")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    _add_model_args(p)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--log-csv", help="Per-step log")
    p.add_argument("--no-skip", action="store_true")
    p.add_argument("--bucketed", action="store_true")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="Rate-distortion report over an image directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", nargs="+", help="Checkpoint files, one per quality")
    p.add_argument("--registry", help="Checkpoints.toml (used without --checkpoint)")
    p.add_argument("--refine", type=int, default=0, metavar="STEPS")
    p.add_argument("--no-skip", action="store_true")
    p.add_argument("--full-params", action="store_true", help="Count full-scale parameters")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="MAC audit and round-trip conformance")
    p.add_argument("--checkpoint", help="Checkpoint (default: untrained desk model)")
    p.add_argument("--count", type=int, default=4, help="Random images")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bucketed", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-attn", help="Mean attention weights of the context reweighting")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True, help="Output directory")
    _add_model_args(p)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("upper-bound", help="Distortion-only transform capacity by STM depth")
    p.add_argument("--config", help="TOML file with [codec] and [train] tables")
    p.add_argument("--data", required=True, help="Training image directory")
    p.add_argument("--eval", help="Evaluation image directory (default: --data)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--lambda-index", type=int, help=argparse.SUPPRESS)
    p.add_argument("--blocks", type=int, nargs="+", default=[2, 0], help="STM blocks per stage")
    p.add_argument("--steps", type=int, help="Training steps per depth")
    p.set_defaults(func=cmd_upper_bound)

    p = sub.add_parser("context-benefit", help="Context model against a hyperprior-only baseline")
    p.add_argument("--full", required=True, help="Checkpoint of the context model")
    p.add_argument("--baseline", required=True, help="Checkpoint of the hyperprior-only model")
    p.add_argument("--data", required=True, help="Evaluation image directory")
    p.add_argument("--out", help="Directory for context_benefit.csv")
    p.set_defaults(func=cmd_context_benefit)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FormatError as e:
        logger.error("Malformed bitstream: %s", e)
        return EXIT_FORMAT
    except ConformanceError as e:
        logger.error("Conformance failure: %s", e)
        return EXIT_CONFORMANCE
    except (CodecError, FileNotFoundError, KeyError, RuntimeError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
