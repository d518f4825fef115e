"""Tests for discretized Gaussian likelihoods, rates and PMF tables."""

import logging

import numpy as np
import pytest
import torch


class TestLikelihood:
    """Test the unit-bin Gaussian likelihood."""

    def test_standard_normal_at_mean(self):
        """p(0 | 0, 1) = Phi(0.5) - Phi(-0.5)."""
        from multiref_codec.entropy import likelihood

        p = likelihood(torch.zeros(1), torch.zeros(1), torch.ones(1))
        assert p.item() == pytest.approx(0.3829, abs=1e-4)

    def test_symmetry(self):
        """p(mu + d) equals p(mu - d)."""
        from multiref_codec.entropy import likelihood

        mu = torch.full((5,), 0.3)
        sigma = torch.full((5,), 1.7)
        d = torch.arange(5, dtype=torch.float32)
        assert torch.allclose(likelihood(mu + d, mu, sigma), likelihood(mu - d, mu, sigma))

    def test_normalization(self):
        """Probabilities over the integers sum to one."""
        from multiref_codec.entropy import likelihood

        values = torch.arange(-60, 61, dtype=torch.float64)
        mu = torch.full_like(values, 0.4)
        sigma = torch.full_like(values, 3.0)
        assert likelihood(values, mu, sigma).sum().item() == pytest.approx(1.0, abs=1e-6)

    def test_small_scales_are_clamped(self, caplog):
        """Scales below the floor are clamped with a warning."""
        from multiref_codec.entropy import likelihood
        from multiref_codec.latent import SIGMA_MIN

        values = torch.zeros(3)
        with caplog.at_level(logging.WARNING, logger="multiref_codec.entropy"):
            p = likelihood(values, values, torch.full((3,), 0.01))
        expected = likelihood(values, values, torch.full((3,), SIGMA_MIN))
        assert torch.allclose(p, expected)
        assert "Clamping" in caplog.text

    def test_matches_gaussian_conditional(self):
        """Agrees with a scale-bounded GaussianConditional on integer symbols."""
        from compressai.entropy_models import GaussianConditional

        from multiref_codec.entropy import likelihood

        torch.manual_seed(0)
        values = torch.round(4 * torch.randn(2, 3, 4, 4))
        scales = torch.rand(2, 3, 4, 4) * 3 + 0.05
        conditional = GaussianConditional(None, scale_bound=0.11).eval()
        _, expected = conditional(values, scales, torch.zeros_like(values), training=False)
        assert torch.allclose(likelihood(values, torch.zeros_like(values), scales), expected)

    def test_shape_mismatch(self):
        """Inputs must share a shape."""
        from multiref_codec.entropy import likelihood
        from multiref_codec.errors import ShapeError

        with pytest.raises(ShapeError):
            likelihood(torch.zeros(2), torch.zeros(3), torch.ones(2))


class TestRate:
    """Test rate estimates."""

    def test_uniform_bytes(self):
        """Ten symbols at p = 1/256 cost 80 bits."""
        from multiref_codec.entropy import rate_bits

        assert rate_bits(torch.full((10,), 1 / 256)).item() == pytest.approx(80.0)

    def test_deterministic_symbols_are_free(self):
        """Values at the mean with the smallest scale cost almost nothing."""
        from multiref_codec.entropy import estimate_rate
        from multiref_codec.latent import SIGMA_MIN, GaussianParams

        mu = torch.randn(100)
        params = GaussianParams(mu, torch.full_like(mu, SIGMA_MIN))
        assert estimate_rate(mu, params).item() < 1e-2

    def test_rate_is_floored(self):
        """Zero probabilities cost 16 bits, not infinity."""
        from multiref_codec.entropy import rate_bits

        assert rate_bits(torch.zeros(1)).item() == pytest.approx(16.0)

    def test_noisy_rate_is_differentiable(self):
        """The rate of noise-perturbed values is finite and has finite gradients."""
        from multiref_codec.entropy import likelihood, rate_bits

        torch.manual_seed(0)
        y = (5 * torch.randn(1, 4, 6, 6)).requires_grad_()
        sigma = (torch.rand(1, 4, 6, 6) * 2 + 0.2).requires_grad_()
        noisy = y + torch.empty_like(y).uniform_(-0.5, 0.5)
        bits = rate_bits(likelihood(noisy, torch.zeros_like(noisy), sigma))
        bits.backward()
        assert torch.isfinite(bits)
        assert torch.isfinite(y.grad).all() and y.grad.abs().sum() > 0
        assert torch.isfinite(sigma.grad).all() and sigma.grad.abs().sum() > 0


class TestPmfTables:
    """Test coding tables."""

    def test_gaussian_rows_normalized(self):
        """Rows sum to one, respect the floor and are symmetric."""
        from multiref_codec.entropy import PMF_FLOOR, discretized_gaussian_pmf

        pmf = discretized_gaussian_pmf([0.11, 1.0, 20.0], 12)
        assert pmf.shape == (3, 25)
        assert np.allclose(pmf.sum(axis=-1), 1.0, atol=1e-9)
        assert pmf.min() >= PMF_FLOOR * (1 - 1e-9)
        assert np.allclose(pmf, pmf[:, ::-1])

    def test_zero_radius(self):
        """A radius of zero is a single certain symbol."""
        from multiref_codec.entropy import discretized_gaussian_pmf

        assert np.allclose(discretized_gaussian_pmf(2.0, 0), [1.0])

    @pytest.mark.parametrize("radius", [-1, 256])
    def test_radius_out_of_range(self, radius):
        """Radii outside [0, 255] are rejected."""
        from multiref_codec.entropy import discretized_gaussian_pmf

        with pytest.raises(ValueError):
            discretized_gaussian_pmf(1.0, radius)

    def test_factorized_prior(self):
        """The learned prior has a monotone CDF and normalized tables."""
        from multiref_codec.entropy import FactorizedPrior

        torch.manual_seed(0)
        prior = FactorizedPrior(3)
        grid = torch.linspace(-20, 20, 41).view(1, 1, -1).expand(1, 3, -1)
        with torch.no_grad():
            cdf = prior.cdf(grid)
        assert torch.all(cdf[..., 1:] >= cdf[..., :-1])
        table = prior.pmf_table(8)
        assert table.shape == (3, 17)
        assert np.allclose(table.sum(axis=-1), 1.0, atol=1e-9)

    def test_factorized_likelihood_in_unit_interval(self):
        """Likelihoods of the learned prior are probabilities."""
        from multiref_codec.entropy import FactorizedPrior

        torch.manual_seed(0)
        prior = FactorizedPrior(4)
        z = torch.round(3 * torch.randn(1, 4, 2, 2))
        with torch.no_grad():
            p = prior.likelihood(z)
        assert p.shape == z.shape
        assert torch.all((p >= 0) & (p <= 1))

    def test_factorized_matches_entropy_bottleneck(self):
        """The prior's likelihood is the bottleneck's own on integer values."""
        from multiref_codec.entropy import FactorizedPrior

        torch.manual_seed(0)
        prior = FactorizedPrior(4).eval()
        z = torch.round(3 * torch.randn(2, 4, 3, 3))
        with torch.no_grad():
            _, expected = prior.entropy_bottleneck(z, training=False)
            assert torch.allclose(prior.likelihood(z), expected, atol=1e-6)
