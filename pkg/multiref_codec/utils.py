"""Shared helpers: hashing, downloads and image IO."""

import hashlib
import logging
import urllib.request
from pathlib import Path
from typing import List, Union
from urllib.error import URLError

import numpy as np
import torch
from PIL import Image
from tqdm import tqdm

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


def compute_sha256(filepath: Union[str, Path]) -> str:
    """
    Compute SHA256 hash of a file.

    Parameters
    ----------
    filepath : str or Path
        Path to the file

    Returns
    -------
    str
        Hexadecimal SHA256 hash
    """
    sha256_hash = hashlib.sha256()
    with open(filepath, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            sha256_hash.update(chunk)
    return sha256_hash.hexdigest()


def download_file(url: str, destination: Path, verbose: bool = False):
    """
    Download a file, with a progress bar when ``verbose``.

    Raises
    ------
    RuntimeError
        If the download fails
    """
    bar = tqdm(unit="B", unit_scale=True, desc=Path(destination).name, disable=not verbose)

    def progress_hook(block_num, block_size, total_size):
        if total_size > 0:
            bar.total = total_size
        bar.update(block_num * block_size - bar.n)

    try:
        urllib.request.urlretrieve(url, destination, reporthook=progress_hook)
    except URLError as e:
        raise RuntimeError(f"Download failed: {e}")
    finally:
        bar.close()


def load_image(path: Union[str, Path]) -> torch.Tensor:
    """Read an image as a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def to_pil(x: torch.Tensor) -> Image.Image:
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    array = (x.detach().clamp(0, 1) * 255.0).round().byte().permute(1, 2, 0).cpu().numpy()
    return Image.fromarray(array)


def save_image(x: torch.Tensor, path: Union[str, Path]):
    """Write a (3, H, W) or (1, 3, H, W) tensor in [0, 1]; the format follows the suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_pil(x).save(path)


def list_images(directory: Union[str, Path]) -> List[Path]:
    """Image files directly inside ``directory``, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
