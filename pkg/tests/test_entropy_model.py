"""Tests for the multi-reference entropy model: decoding order and causality."""

import pytest
import torch

ORDER = [(0, "anchor"), (0, "non_anchor"), (1, "anchor"), (1, "non_anchor")]


def _run(model, y, hyper, use_skip=False):
    """Run the entropy model with hard rounding against the latent ``y``."""
    from multiref_codec.entropy_model import PhaseResult
    from multiref_codec.latent import masked, split_slices
    from multiref_codec.selective import apply_skip

    slices = split_slices(y, model.config.num_slices)

    def code_phase(state):
        mu = state.params.mu
        q = apply_skip(masked(torch.round(slices[state.slice_index] - mu), state.mask),
                       state.skip)
        y_hat = masked(q + mu + state.residual, state.mask)
        return PhaseResult(y_hat=y_hat, q=q)

    with torch.no_grad():
        return model.entropy_model.run(hyper, code_phase, use_skip=use_skip)


def _perturb(y, config, slice_index, phase):
    from multiref_codec.latent import phase_mask

    cs = config.slice_channels
    mask = phase_mask(phase, *y.shape[-2:]).to(y.dtype)
    out = y.clone()
    out[:, slice_index * cs:(slice_index + 1) * cs] += 5.0 * mask
    return out


class TestDecodingOrder:
    """Test the phase sequence."""

    def test_phases_in_order(self, tiny_model):
        """Phases are coded slice by slice, anchors first."""
        torch.manual_seed(0)
        run = _run(tiny_model, torch.randn(1, 16, 4, 4), torch.randn(1, 32, 4, 4))
        assert list(run.phases) == ORDER

    def test_phase_outputs_cover_latent(self, tiny_model):
        """Anchor and non-anchor reconstructions tile each slice."""
        torch.manual_seed(0)
        y = torch.randn(1, 16, 4, 4)
        run = _run(tiny_model, y, torch.randn(1, 32, 4, 4))
        assert run.y_hat.shape == y.shape
        first = run.phases[(0, "anchor")][1].y_hat + run.phases[(0, "non_anchor")][1].y_hat
        assert torch.equal(run.y_hat[:, :8], first)


class TestCausality:
    """Changing a phase's values never changes what came before it."""

    @pytest.mark.parametrize("use_skip", [False, True])
    @pytest.mark.parametrize("step", range(len(ORDER)))
    def test_prefix_is_unchanged(self, tiny_model, use_skip, step):
        """Parameters (and skip maps) of phases up to the perturbed one are identical."""
        torch.manual_seed(0)
        y = torch.randn(1, 16, 4, 4)
        hyper = torch.randn(1, 32, 4, 4)
        base = _run(tiny_model, y, hyper, use_skip)
        changed = _run(tiny_model, _perturb(y, tiny_model.config, *ORDER[step]), hyper, use_skip)
        for key in ORDER[: step + 1]:
            before, after = base.phases[key][0], changed.phases[key][0]
            assert torch.equal(before.params.mu, after.params.mu), key
            assert torch.equal(before.params.sigma, after.params.sigma), key
            assert torch.equal(before.residual, after.residual), key
            if use_skip:
                assert torch.equal(before.skip, after.skip), key

    def test_later_phases_react(self, tiny_model):
        """Perturbing the first anchors changes later parameters."""
        torch.manual_seed(0)
        y = torch.randn(1, 16, 4, 4)
        hyper = torch.randn(1, 32, 4, 4)
        base = _run(tiny_model, y, hyper)
        changed = _run(tiny_model, _perturb(y, tiny_model.config, 0, "anchor"), hyper)
        before, after = base.phases[(1, "anchor")][0], changed.phases[(1, "anchor")][0]
        assert not torch.equal(before.params.mu, after.params.mu)


class TestVariants:
    """Test ablations and the hyperprior baseline."""

    def test_hyperprior_only_has_no_contexts(self, tiny_config):
        """The baseline keeps only the hyperprior head."""
        from multiref_codec.entropy_model import MultiReferenceEntropyModel

        model = MultiReferenceEntropyModel(tiny_config.replace(entropy_model="hyperprior"))
        assert model.hyperprior_only
        assert not model.supports_skip
        assert len(model.entropy_parameters) == 0

    def test_skip_needs_predictors(self, tiny_model):
        """Hyperprior-only runs refuse selective compression."""
        from multiref_codec.errors import UsageError

        with pytest.raises(UsageError):
            tiny_model.entropy_model.run(
                torch.zeros(1, 32, 4, 4), lambda state: None, use_skip=True, hyperprior_only=True
            )

    def test_ablations_remove_modules(self, tiny_config):
        """Disabled features drop their modules."""
        from multiref_codec.config import AblationCase
        from multiref_codec.entropy_model import MultiReferenceEntropyModel

        config = tiny_config.replace(ablation=AblationCase(ilr=False, gsc=False, hgcp=False))
        model = MultiReferenceEntropyModel(config)
        assert len(model.residual_prediction) == 0
        assert not model.supports_skip
        assert model.hgcp is None

    def test_all_disabled_still_codes(self, tiny_config):
        """Every feature off still gives a working model."""
        from multiref_codec.config import AblationCase
        from multiref_codec.model import MultiRefCodec

        torch.manual_seed(0)
        model = MultiRefCodec(tiny_config.replace(ablation=AblationCase.all_disabled())).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, 64, 64))
        assert out.x_hat.shape == (1, 3, 64, 64)
        assert torch.isfinite(out.bits)
