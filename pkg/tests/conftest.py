"""Shared fixtures: a tiny codec that runs in well under a second on CPU."""

import numpy as np
import pytest
import torch


@pytest.fixture
def tiny_config():
    """Smallest configuration that keeps every context module active."""
    from multiref_codec.config import CodecConfig

    return CodecConfig(
        N=8,
        M=16,
        num_slices=2,
        stm_blocks_per_stage=1,
        window_size=4,
        window_overlap=2,
    )


@pytest.fixture
def tiny_model(tiny_config):
    """Randomly initialized (seeded) codec in eval mode."""
    from multiref_codec.model import MultiRefCodec

    torch.manual_seed(0)
    return MultiRefCodec(tiny_config).eval()


@pytest.fixture
def image():
    """(3, 64, 64) smooth test image in [0, 1]."""
    rows = torch.linspace(0, 1, 64).view(1, -1, 1)
    cols = torch.linspace(0, 1, 64).view(1, 1, -1)
    channels = torch.tensor([0.2, 0.5, 0.8]).view(-1, 1, 1)
    return (0.5 + 0.4 * torch.sin(6 * rows + 4 * cols + 3 * channels)).clamp(0, 1)


@pytest.fixture
def image_dir(tmp_path):
    """Directory holding two 64x64 noise PNGs (well above 3 bpp on disk)."""
    from PIL import Image

    directory = tmp_path / "images"
    directory.mkdir()
    rng = np.random.default_rng(0)
    for name in ("a.png", "b.png"):
        pixels = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        Image.fromarray(pixels).save(directory / name)
    return directory


@pytest.fixture
def texture_dir(tmp_path):
    """Eight 128x128 PNGs of smooth random texture with mild grain.

    Neighbouring latents are correlated, so contexts have something to
    learn; store with ``min_bpp=0`` since they compress well on disk.
    """
    import torch.nn.functional as F
    from PIL import Image

    directory = tmp_path / "textures"
    directory.mkdir()
    generator = torch.Generator().manual_seed(7)
    for index in range(8):
        coarse = torch.rand(1, 3, 8, 8, generator=generator)
        smooth = F.interpolate(coarse, size=(128, 128), mode="bicubic", align_corners=False)
        grain = 0.03 * torch.randn(smooth.shape, generator=generator)
        pixels = ((smooth + grain).clamp(0, 1)[0].permute(1, 2, 0) * 255).round()
        Image.fromarray(pixels.to(torch.uint8).numpy()).save(directory / f"t{index}.png")
    return directory
