"""
Evaluation reports: rate-distortion points, curves, skip ratios, complexity
and mean attention weights, plus the transform upper bound and the
context-benefit comparison.

Every bpp figure comes from the size of a real ``.mlv2`` file and every
quality figure from the decoded image.

Usage:
    result = report({"q0": "runs/q0/skip.pt", "q3": "runs/q3/skip.pt"}, "data/kodak", "out/")
    result.files["rd_points"]   # out/rd_points.csv
"""

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .codec import EncodeResult, decode_image, encode_image
from .config import CodecConfig, TrainConfig, get_preset
from .contexts import ContextReweight, mean_attention_weights, record_attention
from .errors import CheckpointError, ConfigError, UsageError
from .metrics import RDPoint, max_msssim_levels, mean_points, ms_ssim, msssim_db, psnr
from .model import MultiRefCodec
from .nn_blocks import count_macs, profile_macs
from .refine import refine
from .train import PatchDataset, load_checkpoint, train_upper_bound, transform_psnr
from .utils import list_images, load_image

logger = logging.getLogger(__name__)

ModelSource = Union[str, Path, MultiRefCodec]

RD_FIELDS = ["quality", "image", "bpp", "psnr_db", "msssim", "encode_s", "decode_s"]
COMPLEXITY_FIELDS = ["kind", "name", "parameters", "kmacs_per_pixel", "mac_ratio"]
PROFILE_SIZE = (256, 256)
AUDIT_CHANNELS = 192
AUDIT_SIZE = (16, 16)
UPPER_BOUND_FIELDS = ["stm_blocks", "parameters", "psnr_db"]
CONTEXT_FIELDS = ["entropy_model", "bpp", "psnr_db"]


@dataclass
class ImageEvaluation:
    point: RDPoint
    skip_ratio: float
    slice_skip_ratios: List[float]


@dataclass
class ReportResult:
    points: List[RDPoint] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    files: Dict[str, Path] = field(default_factory=dict)


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[Dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _slice_skip_ratios(result: EncodeResult, num_slices: int) -> List[float]:
    ratios = []
    for i in range(num_slices):
        maps = [m for (index, _), m in result.skip_maps.items() if index == i]
        if not maps:
            ratios.append(0.0)
            continue
        # Maps are masked to their phase, so the phases together cover every position once.
        coded = sum(int(m.sum()) for m in maps)
        total = maps[0].numel()
        ratios.append(1.0 - coded / total)
    return ratios


def evaluate_image(
    x: torch.Tensor,
    model: MultiRefCodec,
    name: str = "",
    quality: str = "",
    use_skip: bool = True,
    refine_steps: int = 0,
) -> ImageEvaluation:
    """Encode, decode and score one (3, H, W) image."""
    latents = None
    start = time.perf_counter()
    if refine_steps > 0:
        latents = refine(x, model, steps=refine_steps).latents
    result = encode_image(x, model, use_skip=use_skip, latents=latents)
    data = result.bitstream.serialize()
    encode_s = time.perf_counter() - start

    start = time.perf_counter()
    decoded = decode_image(data, model)
    decode_s = time.perf_counter() - start

    x = x.unsqueeze(0) if x.dim() == 3 else x
    x_hat = decoded.image.to(x.device)
    if max_msssim_levels(*x.shape[-2:]) > 0:
        score = float(ms_ssim(x, x_hat))
    else:
        score = math.nan
    point = RDPoint(
        bpp=8 * len(data) / (x.shape[-2] * x.shape[-1]),
        psnr_db=psnr(x, x_hat),
        msssim=score,
        encode_s=encode_s,
        decode_s=decode_s,
        image=name,
        quality=quality,
    )
    return ImageEvaluation(
        point=point,
        skip_ratio=result.skip_ratio,
        slice_skip_ratios=_slice_skip_ratios(result, model.config.num_slices),
    )


def evaluate_dataset(
    model: MultiRefCodec,
    images: Sequence[Path],
    quality: str = "",
    use_skip: bool = True,
    refine_steps: int = 0,
    workers: int = 1,
) -> List[ImageEvaluation]:
    """Evaluate every image; with ``workers > 1`` images run in a thread pool."""
    device = next(model.parameters()).device
    model.eval()

    def one(path: Path) -> ImageEvaluation:
        x = load_image(path).to(device)
        return evaluate_image(x, model, path.name, quality, use_skip, refine_steps)

    if workers > 1 and refine_steps == 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, images))
    return [one(path) for path in images]


def count_parameters(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def mac_audit(
    channels: int = AUDIT_CHANNELS,
    size: Tuple[int, int] = AUDIT_SIZE,
    depthrb_expansion: int = 2,
    gate_expansion: int = 1,
) -> Dict[str, float]:
    """MACs of two STM blocks against a two-convolution residual block."""
    expansions = {"depthrb_expansion": depthrb_expansion, "gate_expansion": gate_expansion}
    stm = count_macs("stm_block_x2", channels, *size, **expansions)
    residual = count_macs("residual_block_3x3x2", channels, *size, **expansions)
    return {"stm_macs": stm, "residual_macs": residual, "ratio": stm / residual}


def complexity_rows(
    models: Mapping[str, MultiRefCodec], full_params: bool = False
) -> List[Dict[str, object]]:
    rows: List[Dict[str, object]] = []
    pixels = PROFILE_SIZE[0] * PROFILE_SIZE[1]
    for name, model in models.items():
        macs = profile_macs(model.eval(), (1, 3) + PROFILE_SIZE)
        rows.append(
            {
                "kind": "model",
                "name": name,
                "parameters": count_parameters(model),
                "kmacs_per_pixel": f"{macs / pixels / 1e3:.3f}",
            }
        )
    audit = mac_audit()
    rows.append(
        {
            "kind": "mac_audit",
            "name": f"stm_block_x2/residual_block_3x3x2@c={AUDIT_CHANNELS}",
            "mac_ratio": f"{audit['ratio']:.6f}",
        }
    )
    if full_params:
        rows.append(
            {
                "kind": "preset",
                "name": "full",
                "parameters": count_parameters(MultiRefCodec(get_preset("full"))),
            }
        )
    return rows


def upper_bound_report(
    config: CodecConfig,
    train: TrainConfig,
    dataset: PatchDataset,
    images: Sequence[torch.Tensor],
    out_dir: Union[str, Path],
    blocks: Sequence[int] = (2, 0),
    device: Union[str, torch.device] = "cpu",
    verbose: bool = False,
) -> List[Dict[str, object]]:
    """
    Reconstruction ceiling of the transforms at several token-mixing depths.

    Every depth trains ``g_a`` / ``g_s`` on distortion alone from the same
    seed and patches, then is scored on ``images`` without quantization.
    Rows are written to ``upper_bound.csv``.
    """
    images = [x.to(device) for x in images]
    rows: List[Dict[str, object]] = []
    for count in blocks:
        model = train_upper_bound(
            config.replace(stm_blocks_per_stage=count), train, dataset, device=device,
            verbose=verbose,
        ).model
        score = transform_psnr(model, images)
        logger.info("Upper bound with %d STM blocks per stage: %.2f dB", count, score)
        rows.append(
            {
                "stm_blocks": count,
                "parameters": count_parameters(model.g_a) + count_parameters(model.g_s),
                "psnr_db": score,
            }
        )
    _write_csv(Path(out_dir) / "upper_bound.csv", UPPER_BOUND_FIELDS, rows)
    return rows


def context_benefit(
    full: MultiRefCodec,
    baseline: MultiRefCodec,
    images: Sequence[Path],
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, float]:
    """
    Mean coded bpp of the context model against a hyperprior-only baseline.

    Both models code every symbol (no skipping). The two must share lambda
    and metric.

    Returns
    -------
    dict
        ``multiref_bpp``, ``hyperprior_bpp``, their PSNRs and
        ``bpp_saving``, the relative rate saved by the contexts.
    """
    if full.entropy_model.hyperprior_only or not baseline.entropy_model.hyperprior_only:
        raise UsageError("context_benefit needs a context model and a hyperprior-only baseline")
    if (full.config.lmbda, full.config.metric) != (baseline.config.lmbda, baseline.config.metric):
        raise ConfigError(
            f"models are trained for different targets: {full.config.metric} "
            f"lambda={full.config.lmbda} vs {baseline.config.metric} "
            f"lambda={baseline.config.lmbda}"
        )
    summary: Dict[str, float] = {}
    rows = []
    for label, model in (("multiref", full), ("hyperprior", baseline)):
        mean = mean_points(
            [e.point for e in evaluate_dataset(model, images, label, use_skip=False)], label
        )
        summary[f"{label}_bpp"] = mean.bpp
        summary[f"{label}_psnr_db"] = mean.psnr_db
        rows.append({"entropy_model": label, "bpp": mean.bpp, "psnr_db": mean.psnr_db})
    summary["bpp_saving"] = 1.0 - summary["multiref_bpp"] / summary["hyperprior_bpp"]
    logger.info(
        "Contexts save %.2f%% of the hyperprior-only rate (%.4f vs %.4f bpp)",
        100 * summary["bpp_saving"], summary["multiref_bpp"], summary["hyperprior_bpp"],
    )
    if out_dir is not None:
        _write_csv(Path(out_dir) / "context_benefit.csv", CONTEXT_FIELDS, rows)
    return summary


def dump_attention(
    model: MultiRefCodec, x: torch.Tensor, out_dir: Union[str, Path], label: str = ""
) -> List[Path]:
    """
    Encode ``x`` once and save the mean attention weights of every
    channel-reweighting module as a bar chart plus one CSV.

    Returns
    -------
    list of Path
        Written files; empty when the model has no reweighting modules.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    modules = {
        name: m for name, m in model.entropy_model.named_modules() if isinstance(m, ContextReweight)
    }
    if not modules:
        logger.info("Model has no context reweighting; no attention maps to dump")
        return []
    with record_attention() as maps:
        encode_image(x, model, use_skip=False)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = f"{label}_" if label else ""
    written, rows = [], []
    for name, module in modules.items():
        if module not in maps:
            continue
        weights = mean_attention_weights(maps[module][0]).cpu().numpy()
        rows.extend(
            {"module": name, "channel": c, "weight": f"{w:.6f}"} for c, w in enumerate(weights)
        )
        fig, ax = plt.subplots(figsize=(6, 2.4), constrained_layout=True)
        ax.bar(np.arange(len(weights)), weights, color="tab:blue")
        ax.set_xlabel("input channel")
        ax.set_ylabel("mean attention weight")
        ax.set_title(name, fontsize=8)
        path = out_dir / f"{prefix}{name.replace('.', '_')}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    csv_path = out_dir / f"{prefix}mean_attention_weights.csv"
    _write_csv(csv_path, ["module", "channel", "weight"], rows)
    written.append(csv_path)
    return written


def plot_rd_curve(points: Sequence[RDPoint], path: Union[str, Path], label: str = "multiref"):
    """PSNR and MS-SSIM (dB) against bpp, one marker per quality."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = sorted(points, key=lambda p: p.bpp)
    bpp = [p.bpp for p in points]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), constrained_layout=True)
    axes[0].plot(bpp, [p.quality_value("psnr") for p in points], "o-", label=label)
    axes[0].set_ylabel("PSNR (dB)")
    scored = [p for p in points if not math.isnan(p.msssim)]
    axes[1].plot(
        [p.bpp for p in scored], [msssim_db(p.msssim) for p in scored], "o-", label=label
    )
    axes[1].set_ylabel("MS-SSIM (dB)")
    for ax in axes:
        ax.set_xlabel("bpp")
        ax.grid(alpha=0.3)
        ax.legend()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _load_sources(
    models: Mapping[str, ModelSource], device: Union[str, torch.device]
) -> Tuple[Dict[str, MultiRefCodec], List[str]]:
    loaded, missing = {}, []
    for label, source in models.items():
        if isinstance(source, MultiRefCodec):
            loaded[label] = source.to(device)
            continue
        try:
            loaded[label], _ = load_checkpoint(source, map_location=device)
        except (FileNotFoundError, CheckpointError) as e:
            logger.warning("Skipping '%s': %s", label, e)
            missing.append(f"{label}\t{source}\t{e}")
    return loaded, missing


def report(
    models: Mapping[str, ModelSource],
    dataset_dir: Union[str, Path],
    out_dir: Union[str, Path],
    use_skip: bool = True,
    refine_steps: int = 0,
    full_params: bool = False,
    attention: bool = True,
    workers: int = 1,
    device: Union[str, torch.device] = "cpu",
) -> ReportResult:
    """
    Evaluate trained codecs on an image directory.

    Parameters
    ----------
    models : mapping
        Quality label to a checkpoint path or a loaded model. Checkpoints
        that are missing or unreadable are listed in ``missing.txt``.
    dataset_dir : path
        Directory of evaluation images.
    out_dir : path
        Receives ``rd_points.csv``, ``rd_curve.png``, ``skip_ratio.csv``,
        ``complexity.csv``, ``attention/`` and ``missing.txt``.
    full_params : bool
        Also build the full-scale preset to report its parameter count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = list_images(dataset_dir)
    loaded, missing = _load_sources(models, device)
    result = ReportResult(missing=missing)

    skip_rows = []
    means: List[RDPoint] = []
    for label, model in loaded.items():
        logger.info("Evaluating '%s' on %d images", label, len(images))
        evaluations = evaluate_dataset(model, images, label, use_skip, refine_steps, workers)
        result.points.extend(e.point for e in evaluations)
        if evaluations:
            means.append(mean_points([e.point for e in evaluations], quality=label))
        row: Dict[str, object] = {
            "quality": label,
            "skip_ratio": f"{np.mean([e.skip_ratio for e in evaluations]):.6f}"
            if evaluations else "",
        }
        for i in range(model.config.num_slices):
            ratios = [e.slice_skip_ratios[i] for e in evaluations]
            row[f"slice_{i}"] = f"{np.mean(ratios):.6f}" if ratios else ""
        skip_rows.append(row)

    result.files["rd_points"] = out_dir / "rd_points.csv"
    _write_csv(
        result.files["rd_points"],
        RD_FIELDS,
        [{k: getattr(p, k) for k in RD_FIELDS} for p in result.points],
    )

    if means:
        result.files["rd_curve"] = out_dir / "rd_curve.png"
        plot_rd_curve(means, result.files["rd_curve"])

    slice_fields = sorted(
        {k for row in skip_rows for k in row if k.startswith("slice_")},
        key=lambda k: int(k.split("_")[1]),
    )
    result.files["skip_ratio"] = out_dir / "skip_ratio.csv"
    _write_csv(result.files["skip_ratio"], ["quality", "skip_ratio"] + slice_fields, skip_rows)

    result.files["complexity"] = out_dir / "complexity.csv"
    _write_csv(result.files["complexity"], COMPLEXITY_FIELDS, complexity_rows(loaded, full_params))

    if attention and images and loaded:
        x = load_image(images[0])
        for label, model in loaded.items():
            dump_attention(model, x.to(device), out_dir / "attention", label)
        result.files["attention"] = out_dir / "attention"

    result.files["missing"] = out_dir / "missing.txt"
    result.files["missing"].write_text("".join(f"{line}\n" for line in missing))
    logger.info(
        "Report written to %s (%d points, %d missing checkpoints)",
        out_dir, len(result.points), len(missing),
    )
    return result
