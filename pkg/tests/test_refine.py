"""Tests for stochastic Gumbel annealing refinement."""

import math

import pytest
import torch


class TestTemperature:
    """Test the annealing schedule."""

    def test_values(self):
        """Capped at 0.5 and decaying as exp(-0.001 j)."""
        from multiref_codec.refine import temperature_schedule

        assert temperature_schedule(0) == 0.5
        assert temperature_schedule(3000) == pytest.approx(math.exp(-3), rel=1e-9)

    def test_non_increasing(self):
        """The default schedule never heats up."""
        from multiref_codec.refine import temperature_schedule

        taus = [temperature_schedule(j) for j in range(0, 5000, 50)]
        assert all(b <= a for a, b in zip(taus, taus[1:]))

    def test_negative_step(self):
        """Steps count from zero."""
        from multiref_codec.refine import temperature_schedule

        with pytest.raises(ValueError):
            temperature_schedule(-1)


class TestSGA:
    """Test the stochastic rounding distribution."""

    def test_half_is_even_odds(self):
        """A fractional part of 0.5 rounds either way with equal probability."""
        from multiref_codec.refine import sga_probabilities

        down, up = sga_probabilities(torch.tensor([2.5, -1.5]), 0.3)
        assert torch.allclose(down, torch.full((2,), 0.5))
        assert torch.allclose(up, torch.full((2,), 0.5))

    def test_cold_limit_is_rounding(self):
        """At low temperature the nearest integer is almost certain."""
        from multiref_codec.refine import sga_probabilities

        down, _ = sga_probabilities(torch.tensor([3.1]), 1e-3)
        assert down.item() > 0.999

    def test_samples_are_neighbors(self):
        """Hard samples are floor or ceil; the surrogate carries gradients."""
        from multiref_codec.refine import sga_sample

        torch.manual_seed(0)
        values = (5 * torch.randn(200)).requires_grad_(True)
        rounded, surrogate = sga_sample(values, 0.5)
        floor = torch.floor(values.detach())
        assert torch.all((rounded == floor) | (rounded == floor + 1))
        surrogate.sum().backward()
        assert values.grad is not None

    def test_empirical_frequency(self):
        """Sample frequencies follow the closed-form probabilities."""
        from multiref_codec.refine import sga_probabilities, sga_sample

        torch.manual_seed(0)
        values = torch.full((20000,), 0.3)
        rounded, _ = sga_sample(values, 0.4)
        _, up = sga_probabilities(values[:1], 0.4)
        assert (rounded == 1).float().mean().item() == pytest.approx(up.item(), abs=0.02)

    def test_explicit_noise_is_reproducible(self):
        """Given the same uniform draws, samples repeat."""
        from multiref_codec.refine import sga_sample

        values = torch.tensor([0.2, 1.7, -0.4])
        noise = torch.rand(3, 2)
        assert torch.equal(sga_sample(values, 0.5, noise)[0], sga_sample(values, 0.5, noise)[0])

    def test_surrogate_gradcheck(self):
        """The relaxed sample's gradient matches finite differences in double precision."""
        from multiref_codec.refine import sga_sample

        torch.manual_seed(0)
        values = torch.tensor([0.2, 1.7, -0.4, 2.35, -3.8], dtype=torch.float64)
        values.requires_grad_(True)
        noise = torch.rand(5, 2, dtype=torch.float64)
        assert torch.autograd.gradcheck(
            lambda v: sga_sample(v, 0.5, noise)[1], (values,), eps=1e-6, atol=1e-4, rtol=1e-4
        )

    def test_non_positive_temperature(self):
        """The temperature must be positive."""
        from multiref_codec.refine import sga_sample

        with pytest.raises(ValueError):
            sga_sample(torch.zeros(2), 0.0)


class TestRefine:
    """Test latent refinement on the tiny codec."""

    def test_zero_steps_is_identity(self, tiny_model, image):
        """No steps returns the transform outputs."""
        from multiref_codec.refine import refine

        state = refine(image, tiny_model, steps=0)
        with torch.no_grad():
            y, z = tiny_model.analyze(image.unsqueeze(0))
        assert torch.equal(state.y, y)
        assert torch.equal(state.z, z)
        assert state.best_loss == state.initial_loss

    def test_short_run(self, tiny_model, image, tmp_path):
        """A few steps log every step and keep the weights frozen."""
        import csv

        from multiref_codec.codec import verify_round_trip
        from multiref_codec.refine import refine

        before = {k: v.clone() for k, v in tiny_model.state_dict().items()}
        log_path = tmp_path / "refine.csv"
        state = refine(image, tiny_model, steps=4, eval_every=2, log_csv=log_path)
        assert len(state.log) == 4
        for name, value in tiny_model.state_dict().items():
            assert torch.equal(value, before[name]), name
        assert all(p.requires_grad for p in tiny_model.parameters())
        with open(log_path) as f:
            rows = list(csv.DictReader(f))
        assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
        result = verify_round_trip(image, tiny_model, latents=state.latents)
        assert result.bitstream.header.refined

    @pytest.mark.slow
    def test_strict_gain_on_seeded_images(self, tiny_model):
        """Refinement lowers the hard-rounded loss of every image in a fixed set of ten."""
        import torch.nn.functional as F

        from multiref_codec.refine import refine

        generator = torch.Generator().manual_seed(1234)
        for index in range(10):
            coarse = torch.rand(1, 3, 8, 8, generator=generator)
            x = F.interpolate(coarse, size=(64, 64), mode="bicubic", align_corners=False)
            x = (x + 0.02 * torch.randn(x.shape, generator=generator)).clamp(0, 1)[0]
            state = refine(x, tiny_model, steps=300, lr=1e-2)
            assert state.best_loss < state.initial_loss, index
            assert state.best_step > 0
