"""Tests for linear attention, rotary positions and the context modules."""

import math

import pytest
import torch


class TestLinearAttention:
    """Test softmax linear attention."""

    def test_associativity(self):
        """Equals the quadratic form softmax(q) softmax(k)^T v."""
        from multiref_codec.contexts import linear_attention

        torch.manual_seed(0)
        q, k, v = torch.randn(2, 7, 4), torch.randn(2, 7, 4), torch.randn(2, 7, 3)
        quadratic = (q.softmax(-1) @ k.softmax(-2).transpose(1, 2)) @ v
        assert torch.allclose(linear_attention(q, k, v), quadratic, atol=1e-6)

    def test_constant_keys(self):
        """Keys constant over positions make the output the mean value."""
        from multiref_codec.contexts import linear_attention

        torch.manual_seed(0)
        q = torch.randn(1, 6, 4)
        k = torch.randn(1, 1, 4).expand(1, 6, 4)
        v = torch.randn(1, 6, 3)
        out = linear_attention(q, k, v)
        assert torch.allclose(out, v.mean(dim=1, keepdim=True).expand_as(out), atol=1e-6)

    def test_zero_values(self):
        """Zero values give zero output."""
        from multiref_codec.contexts import linear_attention

        out = linear_attention(torch.randn(1, 5, 4), torch.randn(1, 5, 4), torch.zeros(1, 5, 2))
        assert torch.count_nonzero(out) == 0


class TestRoPE2d:
    """Test two-axis rotary positions."""

    def test_origin_is_identity(self):
        """Position (0, 0) leaves vectors unchanged."""
        from multiref_codec.contexts import apply_rope2d

        x = torch.randn(1, 1, 4)
        theta = torch.tensor([0.7, 0.1])
        assert torch.allclose(apply_rope2d(x, torch.zeros(1, 2), theta, theta), x)

    def test_quarter_turn(self):
        """(1, 0) at x-position 1 with a pi/2 angle becomes (0, 1)."""
        from multiref_codec.contexts import apply_rope2d

        x = torch.tensor([[[1.0, 0.0]]])
        out = apply_rope2d(x, torch.tensor([[1.0, 0.0]]), torch.tensor([math.pi / 2]),
                           torch.tensor([0.3]))
        assert torch.allclose(out, torch.tensor([[[0.0, 1.0]]]), atol=1e-6)

    def test_relative_positions(self):
        """Dot products depend only on the offset between positions."""
        from multiref_codec.contexts import apply_rope2d

        torch.manual_seed(0)
        q = torch.randn(1, 1, 8, dtype=torch.float64)
        k = torch.randn(1, 1, 8, dtype=torch.float64)
        theta_x = torch.rand(4, dtype=torch.float64)
        theta_y = torch.rand(4, dtype=torch.float64)

        def score(m, n):
            qm = apply_rope2d(q, torch.tensor([m], dtype=torch.float64), theta_x, theta_y)
            kn = apply_rope2d(k, torch.tensor([n], dtype=torch.float64), theta_x, theta_y)
            return (qm * kn).sum()

        assert torch.allclose(score([1, 2], [4, 0]), score([6, 5], [9, 3]))

    def test_odd_channels(self):
        """Rotary positions need channel pairs."""
        from multiref_codec.errors import ConfigError
        from multiref_codec.contexts import rope_frequencies

        with pytest.raises(ConfigError):
            rope_frequencies(5)

    def test_learnable_angles_start_at_frequencies(self):
        """The module's angles start from the fixed frequency ladder."""
        from multiref_codec.contexts import RoPE2d, rope_frequencies

        rope = RoPE2d(8)
        assert torch.allclose(rope.theta_x, rope_frequencies(8).float())
        assert torch.allclose(rope.theta_y, rope_frequencies(8).float())


class TestContextReweight:
    """Test channel reweighting."""

    def test_rows_are_stochastic(self):
        """Every attention row sums to one."""
        from multiref_codec.contexts import ContextReweight

        torch.manual_seed(0)
        _, attention = ContextReweight(6).attend(torch.randn(2, 6, 4, 4))
        assert attention.shape == (2, 6, 6)
        assert torch.allclose(attention.sum(-1), torch.ones(2, 6), atol=1e-6)

    def test_single_channel(self):
        """With one channel the map is [[1]] and the output is the value."""
        from multiref_codec.contexts import ContextReweight

        module = ContextReweight(1, gate=False)
        x = torch.randn(1, 1, 3, 3)
        out, attention = module.attend(x)
        assert torch.allclose(attention, torch.ones(1, 1, 1))
        assert torch.allclose(out, module.to_v(x))

    def test_records_attention_only_when_asked(self):
        """Maps are collected inside record_attention and nowhere else."""
        from multiref_codec.contexts import ContextReweight, record_attention

        module = ContextReweight(4)
        x = torch.randn(1, 4, 2, 2)
        module(x)
        with record_attention() as maps:
            module(x)
        module(x)
        assert list(maps) == [module]
        assert maps[module].shape == (1, 4, 4)

    def test_recording_is_per_thread(self):
        """A thread that is not recording leaves the recorder untouched."""
        import threading

        from multiref_codec.contexts import ContextReweight, record_attention

        module = ContextReweight(4)
        worker = threading.Thread(target=module, args=(torch.randn(1, 4, 2, 2),))
        with record_attention() as maps:
            worker.start()
            worker.join()
        assert maps == {}

    def test_mean_weights(self):
        """Uniform and identity maps both average to 1/c."""
        from multiref_codec.contexts import mean_attention_weights

        uniform = torch.full((4, 4), 0.25)
        assert torch.allclose(mean_attention_weights(uniform), torch.full((4,), 0.25))
        assert torch.allclose(mean_attention_weights(torch.eye(4)), torch.full((4,), 0.25))

    def test_mean_weights_rejects_bad_maps(self):
        """Non-square or non-stochastic maps are rejected."""
        from multiref_codec.contexts import mean_attention_weights
        from multiref_codec.errors import ValidationError

        with pytest.raises(ValidationError):
            mean_attention_weights(torch.ones(2, 3) / 3)
        with pytest.raises(ValidationError):
            mean_attention_weights(torch.ones(3, 3))


class TestWindowContext:
    """Test overlapped window attention."""

    def test_large_window_sees_all_anchors(self):
        """A window covering the map allows every anchor."""
        from multiref_codec.contexts import window_mask
        from multiref_codec.latent import checkerboard_mask

        allowed = window_mask(4, 4, 8, 4)
        anchors = checkerboard_mask(4, 4).reshape(-1)
        assert torch.equal(allowed[5], anchors)

    def test_only_anchors_are_visible(self):
        """Non-anchor keys are never allowed."""
        from multiref_codec.contexts import window_mask
        from multiref_codec.latent import checkerboard_mask

        allowed = window_mask(8, 8, 4, 2)
        non_anchor = ~checkerboard_mask(8, 8).reshape(-1)
        assert not allowed[:, non_anchor].any()

    def test_far_anchors_are_invisible(self):
        """Position (0, 0) cannot see the anchor at (7, 7) with 4x4 windows."""
        from multiref_codec.contexts import window_mask

        allowed = window_mask(8, 8, 4, 2)
        assert allowed[0, 0]
        assert not allowed[0, 63]

    def test_perturbation_outside_window(self):
        """Changing a far anchor leaves a corner output untouched."""
        from multiref_codec.contexts import IntraSliceLocalContext

        torch.manual_seed(0)
        module = IntraSliceLocalContext(2, 4, window=4, overlap=2)
        x = torch.randn(1, 2, 8, 8)
        perturbed = x.clone()
        perturbed[..., 7, 7] += 10.0
        with torch.no_grad():
            a, b = module(x), module(perturbed)
        assert torch.equal(a[..., 0, 1], b[..., 0, 1])
        assert not torch.equal(a[..., 6, 7], b[..., 6, 7])

    @pytest.mark.parametrize("overlap", [0, 2])
    def test_anchor_next_to_window_edge(self, overlap):
        """An anchor just past a window edge does not reach the position inside it."""
        from multiref_codec.contexts import IntraSliceLocalContext

        torch.manual_seed(0)
        module = IntraSliceLocalContext(2, 4, window=4, overlap=overlap)
        x = torch.randn(1, 2, 8, 8)
        perturbed = x.clone()
        perturbed[..., 0, 4] += 10.0
        with torch.no_grad():
            a, b = module(x), module(perturbed)
        if overlap == 0:
            assert torch.equal(a[..., 0, 3], b[..., 0, 3])
        assert not torch.equal(a[..., 0, 5], b[..., 0, 5])

    @pytest.mark.parametrize("overlap", [0, 2])
    def test_outputs_only_depend_on_allowed_anchors(self, overlap):
        """Perturbing any anchor changes only the positions whose window shows it."""
        from multiref_codec.contexts import IntraSliceLocalContext, window_mask
        from multiref_codec.latent import checkerboard_mask

        torch.manual_seed(0)
        module = IntraSliceLocalContext(2, 4, window=4, overlap=overlap)
        allowed = window_mask(8, 8, 4, overlap)
        x = torch.randn(1, 2, 8, 8)
        with torch.no_grad():
            base = module(x).flatten(2)
            for anchor in torch.nonzero(checkerboard_mask(8, 8).reshape(-1)).flatten():
                perturbed = x.clone().flatten(2)
                perturbed[..., anchor] += 10.0
                out = module(perturbed.view_as(x)).flatten(2)
                blind = ~allowed[:, anchor]
                assert torch.equal(out[..., blind], base[..., blind])


class TestGlobalContexts:
    """Test the linear-attention global contexts."""

    @staticmethod
    def _with_new_non_anchors(x):
        from multiref_codec.latent import checkerboard_mask

        non_anchor = ~checkerboard_mask(*x.shape[-2:])
        out = x.clone()
        out[..., non_anchor] = torch.randn_like(out[..., non_anchor]) * 10
        return out

    def test_hyper_guided_ignores_current_non_anchors(self):
        """The slice-0 context reads only the decoded anchors of slice 0."""
        from multiref_codec.contexts import ContextReweight, HyperGuidedGlobalContext

        torch.manual_seed(0)
        module = HyperGuidedGlobalContext(6, 4, 4, reweight=ContextReweight(4))
        hyper = torch.randn(1, 6, 6, 6)
        y0 = torch.randn(1, 4, 6, 6)
        with torch.no_grad():
            a = module(hyper, y0)
            b = module(hyper, self._with_new_non_anchors(y0))
        assert torch.equal(a, b)

    def test_intra_global_ignores_current_non_anchors(self):
        """Slice i's global context reads only the decoded anchors of slice i."""
        from multiref_codec.contexts import IntraSliceGlobalContext

        torch.manual_seed(0)
        module = IntraSliceGlobalContext(4, 4)
        prev = torch.randn(1, 4, 6, 6)
        cur = torch.randn(1, 4, 6, 6)
        with torch.no_grad():
            a = module(prev, prev, cur)
            b = module(prev, prev, self._with_new_non_anchors(cur))
        assert torch.equal(a, b)

    def test_self_slice_matches_explicit_attention(self):
        """With the previous slice equal to the current one, the output is plain attention."""
        from multiref_codec.contexts import IntraSliceGlobalContext
        from multiref_codec.latent import checkerboard_mask

        torch.manual_seed(0)
        module = IntraSliceGlobalContext(4, 6, rope=False, gate=False).double()
        y = torch.randn(1, 4, 5, 5, dtype=torch.float64)
        anchor = checkerboard_mask(5, 5)
        anchors = y[0][:, anchor].T
        non_anchors = y[0][:, ~anchor].T
        q = torch.softmax(non_anchors @ module.to_q.weight.T, dim=-1)
        k = torch.softmax(anchors @ module.to_k.weight.T, dim=0)
        v = anchors @ module.to_v.weight.T
        expected = torch.zeros(6, 5, 5, dtype=torch.float64)
        expected[:, ~anchor] = torch.einsum("pc,jc,jd->pd", q, k, v).T
        with torch.no_grad():
            out = module(y, y, y)
        assert torch.allclose(out[0], expected, atol=1e-12)


class TestLegalMembers:
    """Test which contexts each phase may see."""

    def test_first_anchor_sees_only_hyperprior(self):
        """Slice 0 anchors condition on the hyperprior alone."""
        from multiref_codec.contexts import legal_members

        assert legal_members(0, "anchor") == ("hyper",)

    def test_first_non_anchor(self):
        """Slice 0 non-anchors get the hyper-guided global context when enabled."""
        from multiref_codec.contexts import legal_members

        assert legal_members(0, "non_anchor") == ("hyper", "intra_local", "intra_global")
        assert legal_members(0, "non_anchor", hgcp=False) == ("hyper", "intra_local")

    def test_later_slices(self):
        """Later slices see inter-slice contexts in both phases."""
        from multiref_codec.contexts import legal_members

        assert legal_members(2, "anchor") == ("hyper", "inter_local", "inter_global")
        assert legal_members(2, "non_anchor") == (
            "hyper", "inter_local", "inter_global", "intra_local", "intra_global"
        )
