"""Tests for the analysis/synthesis transforms and image padding."""

import pytest
import torch


class TestTransformShapes:
    """Test the shapes produced by each transform."""

    def test_analysis_downsamples_by_16(self, tiny_model):
        """(1, 3, 64, 64) maps to (1, M, 4, 4)."""
        y = tiny_model.g_a(torch.rand(1, 3, 64, 64))
        assert y.shape == (1, 16, 4, 4)

    def test_hyper_path(self, tiny_model):
        """z is a further 4x smaller; h_s returns the hyperprior at latent size."""
        y = tiny_model.g_a(torch.rand(1, 3, 64, 64))
        z = tiny_model.h_a(y)
        assert z.shape == (1, 8, 1, 1)
        hyper = tiny_model.h_s(torch.round(z))
        assert hyper.shape == (1, tiny_model.config.hyper_out_channels, 4, 4)

    def test_synthesis_upsamples_by_16(self, tiny_model):
        """(1, M, 4, 4) maps back to (1, 3, 64, 64)."""
        assert tiny_model.g_s(torch.zeros(1, 16, 4, 4)).shape == (1, 3, 64, 64)

    def test_non_multiple_of_16(self, tiny_model):
        """Sizes not divisible by 16 are rejected."""
        from multiref_codec.errors import ShapeError

        with pytest.raises(ShapeError):
            tiny_model.g_a(torch.rand(1, 3, 40, 64))

    def test_grayscale_rejected(self, tiny_model):
        """Analysis needs three channels."""
        from multiref_codec.errors import ShapeError

        with pytest.raises(ShapeError):
            tiny_model.g_a(torch.rand(1, 1, 64, 64))

    def test_zero_image_without_biases(self, tiny_model):
        """With every bias zeroed a black image maps to a zero latent."""
        for name, param in tiny_model.g_a.named_parameters():
            if name.endswith("bias"):
                param.data.zero_()
        with torch.no_grad():
            y = tiny_model.g_a(torch.zeros(1, 3, 64, 64))
        assert torch.count_nonzero(y) == 0


class TestTransformGradients:
    """Test analytic gradients of the transforms."""

    def test_analysis_gradcheck(self):
        """g_a's input gradient agrees with finite differences in double precision."""
        from multiref_codec.config import CodecConfig
        from multiref_codec.transforms import AnalysisTransform

        torch.manual_seed(0)
        config = CodecConfig(N=4, M=4, num_slices=2, stm_blocks_per_stage=1, window_size=4,
                             window_overlap=2)
        g_a = AnalysisTransform(config).double()
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(g_a, (x,), eps=1e-6, atol=1e-5, rtol=1e-4)


class TestPadding:
    """Test padding to the codec's size multiple."""

    def test_padded_size(self):
        """Sizes round up to multiples of 64."""
        from multiref_codec.transforms import padded_size

        assert padded_size(40, 50) == (64, 64)
        assert padded_size(64, 65) == (64, 128)

    def test_pad_then_crop(self):
        """Cropping after padding returns the original pixels."""
        from multiref_codec.transforms import crop_image, pad_image

        x = torch.rand(1, 3, 40, 50)
        padded, size = pad_image(x)
        assert padded.shape == (1, 3, 64, 64)
        assert size == (40, 50)
        assert torch.equal(crop_image(padded, size), x)

    def test_aligned_image_untouched(self):
        """Already aligned images are returned as is."""
        from multiref_codec.transforms import pad_image

        x = torch.rand(1, 3, 64, 128)
        padded, _ = pad_image(x)
        assert padded is x
