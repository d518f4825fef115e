"""
Rate-distortion training.

Stage 1 trains the transforms with the hyperprior head only; stage 2 loads
those weights and trains the full multi-reference entropy model with a
decaying learning rate and a switch to larger patches. A short third pass
fits the skip predictors with every other weight frozen.

Two comparison harnesses share the loop: the hyperprior-only baseline on the
same schedule, and the distortion-only transform pair behind the capacity
upper bound.

Usage:
    dataset = ingest_dataset("data/train", patch_size=64)
    result = train_stage1(get_preset("desk"), TrainConfig(), dataset, out_dir="runs/q3")
    result = train_stage2(result.model, TrainConfig(), dataset, out_dir="runs/q3")
    result = train_skip_predictor(result.model, TrainConfig(), dataset, out_dir="runs/q3")
"""

import copy
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .config import CodecConfig, TrainConfig
from .errors import CheckpointError, ConfigError, NumericError, ShapeError, UsageError
from .metrics import ms_ssim, psnr
from .model import MultiRefCodec, RoundQuantizer
from .selective import skip_loss
from .transforms import crop_image, pad_image
from .utils import list_images

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
JPEG_SUFFIXES = (".jpg", ".jpeg")
JPEG_MIN_FACTOR = 0.5


def rd_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    rate_bits: Union[torch.Tensor, float],
    lmbda: float,
    metric: str = "mse",
    mse_scale: float = 255.0,
) -> torch.Tensor:
    """
    ``bpp + lambda * D``.

    Parameters
    ----------
    x, x_hat : Tensor
        (B, 3, H, W) images in [0, 1]; bpp is taken over ``B * H * W`` pixels.
    rate_bits : Tensor or float
        Total bits of the batch.
    metric : str
        ``"mse"`` (on the ``mse_scale`` pixel range) or ``"ms-ssim"``
        (``D = 1 - MS-SSIM``).
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {tuple(x.shape)} and x_hat {tuple(x_hat.shape)} differ")
    batch = x.shape[0] if x.dim() == 4 else 1
    num_pixels = batch * x.shape[-2] * x.shape[-1]
    bpp = torch.as_tensor(rate_bits, dtype=x_hat.dtype, device=x_hat.device) / num_pixels
    if metric == "mse":
        distortion = torch.mean((x - x_hat) ** 2) * mse_scale ** 2
    elif metric == "ms-ssim":
        if x.dim() == 3:
            x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
        distortion = 1 - ms_ssim(x, x_hat)
    else:
        raise ConfigError(f"unknown distortion metric '{metric}'")
    return bpp + lmbda * distortion


class PatchDataset(Dataset):
    """
    Random square crops of a fixed list of images.

    Crops are drawn from a generator seeded by ``(seed, epoch, index)``, so
    a fixed seed gives the same patches in the same order.
    """

    def __init__(
        self,
        files: List[Path],
        patch_size: int,
        seed: int = 0,
        jpeg_downsample: bool = True,
    ):
        if not files:
            raise UsageError("no usable training images")
        self.files = list(files)
        self.patch_size = patch_size
        self.seed = seed
        self.jpeg_downsample = jpeg_downsample
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, index: int) -> torch.Tensor:
        rng = np.random.default_rng((self.seed, self.epoch, index))
        path = self.files[index]
        with Image.open(path) as img:
            img = img.convert("RGB")
            width, height = img.size
            if self.jpeg_downsample and path.suffix.lower() in JPEG_SUFFIXES:
                smallest = self.patch_size / min(width, height)
                factor = rng.uniform(max(JPEG_MIN_FACTOR, smallest), 1.0)
                size = (
                    max(self.patch_size, round(width * factor)),
                    max(self.patch_size, round(height * factor)),
                )
                img = img.resize(size, Image.BICUBIC)
                width, height = img.size
            if min(width, height) < self.patch_size:
                img = img.resize(
                    (max(width, self.patch_size), max(height, self.patch_size)), Image.BICUBIC
                )
                width, height = img.size
            left = int(rng.integers(0, width - self.patch_size + 1))
            top = int(rng.integers(0, height - self.patch_size + 1))
            crop = img.crop((left, top, left + self.patch_size, top + self.patch_size))
            array = np.asarray(crop, dtype=np.float32) / 255.0
        return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def image_bpp(path: Path, size: Tuple[int, int]) -> float:
    """Bits per pixel of the file as stored."""
    width, height = size
    return path.stat().st_size * 8 / (width * height)


def ingest_dataset(
    directory: Union[str, Path],
    patch_size: int = 64,
    min_size: Optional[int] = None,
    min_bpp: float = 3.0,
    jpeg_downsample: bool = True,
    seed: int = 0,
) -> PatchDataset:
    """
    Scan a directory of images and build the patch stream.

    Files smaller than ``min_size`` (default: the patch size) or stored below
    ``min_bpp`` are excluded; unreadable files are skipped with a warning.
    """
    min_size = patch_size if min_size is None else min_size
    kept = []
    for path in list_images(directory):
        try:
            with Image.open(path) as img:
                img.verify()
            with Image.open(path) as img:
                size = img.size
        except Exception as e:
            logger.warning("Skipping unreadable image %s: %s", path, e)
            continue
        if min(size) < min_size:
            logger.info("Excluding %s: %dx%d is below %d pixels", path.name, *size, min_size)
            continue
        bpp = image_bpp(path, size)
        if bpp < min_bpp:
            logger.info("Excluding %s: stored at %.2f bpp (< %.1f)", path.name, bpp, min_bpp)
            continue
        kept.append(path)
    logger.info("Training set: %d images from %s", len(kept), directory)
    return PatchDataset(kept, patch_size, seed=seed, jpeg_downsample=jpeg_downsample)


def state_dict_hash(state_dict: Dict[str, torch.Tensor]) -> str:
    """SHA256 over parameter names and raw values."""
    sha256_hash = hashlib.sha256()
    for name in sorted(state_dict):
        sha256_hash.update(name.encode())
        sha256_hash.update(state_dict[name].detach().cpu().contiguous().numpy().tobytes())
    return sha256_hash.hexdigest()


def save_checkpoint(
    path: Union[str, Path],
    model: MultiRefCodec,
    stage: str,
    step: int,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(),
            "config_hash": model.config.config_hash,
            "stage": stage,
            "step": step,
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(
    path: Union[str, Path],
    config: Optional[CodecConfig] = None,
    map_location: Union[str, torch.device] = "cpu",
) -> Tuple[MultiRefCodec, Dict[str, Any]]:
    """
    Rebuild a codec from a checkpoint.

    Raises
    ------
    FileNotFoundError
        If the file does not exist
    CheckpointError
        On an unknown format version, or when ``config`` describes a
        different architecture than the one stored
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = torch.load(path, map_location=map_location, weights_only=True)
    if data.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format {data.get('format_version')} is not supported"
        )
    stored = CodecConfig.from_dict(data["config"])
    if stored.config_hash != data["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if config is not None and config.config_hash != stored.config_hash:
        raise CheckpointError(
            f"{path}: architecture {data['config_hash'][:12]} does not match "
            f"the requested {config.config_hash[:12]}"
        )
    model = MultiRefCodec(config if config is not None else stored)
    model.load_state_dict(data["state_dict"])
    meta = {k: data[k] for k in ("stage", "step", "config_hash")}
    return model.to(map_location), meta


@dataclass
class TrainResult:
    model: MultiRefCodec
    stage: str
    steps: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def _write_log(history: List[Dict[str, float]], path: Path):
    if not history:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def _batches(
    dataset: PatchDataset,
    train: TrainConfig,
    patch_size: Callable[[int], int],
    start: int,
) -> Iterator[torch.Tensor]:
    """Endless batches; the loader restarts when the patch size changes."""
    step, epoch = start, 0
    while True:
        dataset.epoch = epoch
        dataset.patch_size = patch_size(step)
        loader = DataLoader(
            dataset,
            batch_size=min(train.batch_size, len(dataset)),
            shuffle=True,
            drop_last=True,
            num_workers=train.num_workers,
            generator=torch.Generator().manual_seed(train.seed + epoch),
        )
        for batch in loader:
            yield batch
            step += 1
            if patch_size(step) != dataset.patch_size:
                break
        epoch += 1


def _optimize(
    model: MultiRefCodec,
    parameters: List[torch.nn.Parameter],
    dataset: PatchDataset,
    train: TrainConfig,
    stage: str,
    steps: int,
    loss_fn: Callable[[torch.Tensor], Tuple[torch.Tensor, Dict[str, float]]],
    lr: Callable[[int], float],
    patch_size: Callable[[int], int],
    out_dir: Optional[Path],
    device: Union[str, torch.device],
    verbose: bool,
) -> TrainResult:
    optimizer = torch.optim.Adam(parameters, lr=lr(0))
    history: List[Dict[str, float]] = []
    last_good = copy.deepcopy(model.state_dict())
    checkpoint = None
    batches = _batches(dataset, train, patch_size, 0)
    model.train()

    for step in tqdm(range(steps), desc=stage, disable=not verbose):
        for group in optimizer.param_groups:
            group["lr"] = lr(step)
        x = next(batches).to(device)
        optimizer.zero_grad()
        loss, stats = loss_fn(x)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            if out_dir is not None:
                save_checkpoint(out_dir / f"{stage}_last_good.pt", model, stage, step)
            raise NumericError(f"{stage}: non-finite loss at step {step}; restored last good state")
        loss.backward()
        optimizer.step()

        if step % train.log_every == 0 or step == steps - 1:
            record = {"step": step, "lr": lr(step), "loss": float(loss), **stats}
            history.append(record)
            logger.debug("%s step %d: %s", stage, step, record)
        if (step + 1) % train.checkpoint_every == 0:
            last_good = copy.deepcopy(model.state_dict())
            if out_dir is not None:
                checkpoint = save_checkpoint(out_dir / f"{stage}.pt", model, stage, step + 1)

    if out_dir is not None:
        checkpoint = save_checkpoint(out_dir / f"{stage}.pt", model, stage, steps)
        _write_log(history, out_dir / f"{stage}_log.csv")
    logger.info("%s finished after %d steps", stage, steps)
    return TrainResult(
        model=model, stage=stage, steps=steps, history=history, checkpoint=checkpoint
    )


def _rd_step(model: MultiRefCodec, train: TrainConfig, hyperprior_only: bool):
    config = model.config

    def loss_fn(x: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, float]]:
        out = model(x, hyperprior_only=hyperprior_only)
        loss = rd_loss(x, out.x_hat, out.bits, config.lmbda, config.metric, train.mse_scale)
        num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
        return loss, {
            "bpp": float(out.bits) / num_pixels,
            "psnr": psnr(x, out.x_hat.detach().clamp(0, 1)),
        }

    return loss_fn


def _seed(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed)


def train_stage1(
    config: CodecConfig,
    train: TrainConfig,
    dataset: PatchDataset,
    out_dir: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
    verbose: bool = False,
) -> TrainResult:
    """Train transforms and hyperprior with the hyperprior head as the only entropy model."""
    _seed(train.seed)
    model = MultiRefCodec(config).to(device)
    return _optimize(
        model,
        list(model.parameters()),
        dataset,
        train,
        "stage1",
        train.stage1_steps,
        _rd_step(model, train, hyperprior_only=True),
        lambda step: train.lr,
        lambda step: train.patch_size,
        Path(out_dir) if out_dir is not None else None,
        device,
        verbose,
    )


def train_stage2(
    model: MultiRefCodec,
    train: TrainConfig,
    dataset: PatchDataset,
    out_dir: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
    verbose: bool = False,
) -> TrainResult:
    """Train the full model from stage-1 weights with the decaying schedule."""
    if model.entropy_model.hyperprior_only:
        raise UsageError("stage 2 needs a multi-reference entropy model")
    _seed(train.seed + 1)
    model = model.to(device)
    logger.info("Stage 2 starts from weights %s", state_dict_hash(model.state_dict())[:12])
    return _optimize(
        model,
        list(model.parameters()),
        dataset,
        train,
        "stage2",
        train.stage2_steps,
        _rd_step(model, train, hyperprior_only=False),
        train.stage2_lr,
        train.stage2_patch_size,
        Path(out_dir) if out_dir is not None else None,
        device,
        verbose,
    )


def train_skip_predictor(
    model: MultiRefCodec,
    train: TrainConfig,
    dataset: PatchDataset,
    out_dir: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
    verbose: bool = False,
) -> TrainResult:
    """Fit the skip predictors on hard-rounded residuals; all other weights stay frozen."""
    if not model.supports_skip:
        raise UsageError("the model has no skip predictors (selective compression is disabled)")
    _seed(train.seed + 2)
    model = model.to(device)
    trainable = list(model.entropy_model.skip_predictors.parameters())
    trainable_ids = {id(p) for p in trainable}
    frozen = {name: p.requires_grad for name, p in model.named_parameters()}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable_ids)

    def loss_fn(x: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, float]]:
        y, z = model.analyze(x)
        run, _, _, _ = model.entropy_forward(y, z, RoundQuantizer(), use_skip=True)
        epsilons, residuals, masks = {}, {}, {}
        for key, (state, result) in run.phases.items():
            epsilons[key] = state.epsilon
            residuals[key] = result.target
            masks[key] = state.mask
        report = skip_loss(epsilons, residuals, masks, model.config.num_slices)
        return report.loss, {
            "skip_ratio": float(np.mean(report.skip_ratios)),
            "false_skips": float(report.false_skips),
        }

    try:
        return _optimize(
            model,
            trainable,
            dataset,
            train,
            "skip",
            train.skip_steps,
            loss_fn,
            lambda step: train.skip_lr,
            lambda step: train.large_patch_size,
            Path(out_dir) if out_dir is not None else None,
            device,
            verbose,
        )
    finally:
        for name, p in model.named_parameters():
            p.requires_grad_(frozen[name])


def train_hyperprior_baseline(
    config: CodecConfig,
    train: TrainConfig,
    dataset: PatchDataset,
    out_dir: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
    verbose: bool = False,
) -> TrainResult:
    """
    Hyperprior-only ablation on the full model's schedule.

    Stage 1 runs unchanged; the stage-2 steps then keep the hyperprior head
    with the stage-2 learning rates and patch switch.
    """
    model = train_stage1(
        config.replace(entropy_model="hyperprior"), train, dataset, out_dir, device, verbose
    ).model
    _seed(train.seed + 1)
    return _optimize(
        model,
        list(model.parameters()),
        dataset,
        train,
        "baseline",
        train.stage2_steps,
        _rd_step(model, train, hyperprior_only=True),
        train.stage2_lr,
        train.stage2_patch_size,
        Path(out_dir) if out_dir is not None else None,
        device,
        verbose,
    )


def train_upper_bound(
    config: CodecConfig,
    train: TrainConfig,
    dataset: PatchDataset,
    out_dir: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
    verbose: bool = False,
) -> TrainResult:
    """Train ``g_s(g_a(x))`` on distortion alone: no quantization, no rate term."""
    _seed(train.seed)
    model = MultiRefCodec(config).to(device)
    parameters = list(model.g_a.parameters()) + list(model.g_s.parameters())

    def loss_fn(x: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, float]]:
        x_hat = model.g_s(model.g_a(x))
        loss = rd_loss(x, x_hat, 0.0, 1.0, config.metric, train.mse_scale)
        return loss, {"psnr": psnr(x, x_hat.detach().clamp(0, 1))}

    return _optimize(
        model,
        parameters,
        dataset,
        train,
        "upper_bound",
        train.upper_bound_steps,
        loss_fn,
        lambda step: train.lr,
        lambda step: train.patch_size,
        Path(out_dir) if out_dir is not None else None,
        device,
        verbose,
    )


def validation_loss(
    model: MultiRefCodec, images: List[torch.Tensor], mse_scale: float = 255.0
) -> float:
    """Mean hard-rounded RD loss over full images (padded to the transform grid)."""
    model.eval()
    losses = []
    with torch.no_grad():
        for x in images:
            x = x.unsqueeze(0) if x.dim() == 3 else x
            padded, size = pad_image(x)
            out = model(padded, quantizer=RoundQuantizer())
            loss = rd_loss(
                x, crop_image(out.x_hat, size), out.bits, model.config.lmbda,
                model.config.metric, mse_scale,
            )
            losses.append(float(loss))
    return math.fsum(losses) / len(losses)


def transform_psnr(model: MultiRefCodec, images: List[torch.Tensor]) -> float:
    """Mean PSNR of the unquantized ``g_s(g_a(x))`` over full images."""
    model.eval()
    scores = []
    with torch.no_grad():
        for x in images:
            x = x.unsqueeze(0) if x.dim() == 3 else x
            padded, size = pad_image(x)
            x_hat = crop_image(model.g_s(model.g_a(padded)), size).clamp(0, 1)
            scores.append(psnr(x, x_hat))
    return math.fsum(scores) / len(scores)
