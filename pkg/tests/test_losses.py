import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ercedit.diffusion import AttentionStack
from ercedit.embedding import InputError
from ercedit.losses import (ConfigError, LossOptions, LossWeights,
                            attention_alignment_loss, clip_direction_loss,
                            clip_similarity_loss, reconstruction_loss,
                            total_loss)


def vec(*vals):
    return torch.tensor(vals, dtype=torch.float32)


def rand_vecs(seed, n, d=8):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(d, generator=g) for _ in range(n)]


finite_vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4)


class TestClipDirection:
    def test_equal_directions_zero(self):
        a, b = rand_vecs(0, 2)
        # image delta == text delta -> cos 1 -> loss 0
        assert float(clip_direction_loss(a, b, a, b)) == pytest.approx(0.0, abs=1e-6)

    def test_opposite_directions_two(self):
        a, b = rand_vecs(1, 2)
        assert float(clip_direction_loss(a, b, b, a)) == pytest.approx(2.0, abs=1e-6)

    def test_no_image_change_guarded_to_one(self):
        a, c, d = rand_vecs(2, 3)
        assert float(clip_direction_loss(a, a, c, d)) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            clip_direction_loss(vec(1, 0), vec(0, 1), vec(1, 0, 0), vec(0, 1, 0))

    @given(finite_vec, finite_vec, finite_vec, finite_vec)
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, a, b, c, d):
        loss = float(clip_direction_loss(*(torch.tensor(v) for v in (a, b, c, d))))
        assert 0.0 - 1e-6 <= loss <= 2.0 + 1e-6
        assert np.isfinite(loss)


class TestAttentionAlignment:
    def test_equal_stacks_exactly_zero(self):
        g = torch.Generator().manual_seed(3)
        layers = [torch.rand(5, 4, generator=g) for _ in range(3)]
        stack = AttentionStack(layers)
        assert float(attention_alignment_loss(stack, AttentionStack(list(layers)))) == 0.0

    def test_hand_computed_sqrt2(self):
        a = AttentionStack([torch.tensor([[1.0, 0.0]])])
        b = AttentionStack([torch.tensor([[0.0, 1.0]])])
        assert float(attention_alignment_loss(a, b)) == pytest.approx(
            np.sqrt(2.0), abs=1e-12)

    def test_symmetry(self):
        for seed in range(20):
            g = torch.Generator().manual_seed(seed)
            x = AttentionStack([torch.rand(6, 3, generator=g) for _ in range(2)])
            y = AttentionStack([torch.rand(6, 3, generator=g) for _ in range(2)])
            assert float(attention_alignment_loss(x, y)) == pytest.approx(
                float(attention_alignment_loss(y, x)), abs=0)

    def test_layer_count_mismatch(self):
        one = AttentionStack([torch.rand(2, 2)])
        two = AttentionStack([torch.rand(2, 2), torch.rand(2, 2)])
        with pytest.raises(InputError):
            attention_alignment_loss(one, two)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            attention_alignment_loss(AttentionStack([torch.rand(2, 2)]),
                                     AttentionStack([torch.rand(3, 2)]))

    def test_squared_option(self):
        a = AttentionStack([torch.tensor([[1.0, 0.0]])])
        b = AttentionStack([torch.tensor([[0.0, 1.0]])])
        sq = attention_alignment_loss(a, b, LossOptions(squared_norms=True))
        assert float(sq) == pytest.approx(2.0, abs=1e-12)

    def test_batched_is_mean_of_per_sample(self):
        g = torch.Generator().manual_seed(7)
        fa = [torch.rand(4, 5, 3, generator=g) for _ in range(2)]
        fb = [torch.rand(4, 5, 3, generator=g) for _ in range(2)]
        batched = float(attention_alignment_loss(AttentionStack(fa), AttentionStack(fb)))
        per = [float(attention_alignment_loss(
            AttentionStack([l[i] for l in fa]), AttentionStack([l[i] for l in fb])))
            for i in range(4)]
        assert batched == pytest.approx(np.mean(per), rel=1e-6)


class TestClipSimilarity:
    def test_equal_zero(self):
        (v,) = rand_vecs(4, 1)
        assert float(clip_similarity_loss(v, v)) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_one(self):
        assert float(clip_similarity_loss(vec(1, 0), vec(0, 1))) == 1.0

    def test_opposite_two(self):
        (v,) = rand_vecs(5, 1)
        assert float(clip_similarity_loss(v, -v)) == pytest.approx(2.0, abs=1e-6)

    @given(finite_vec, finite_vec)
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, a, b):
        loss = float(clip_similarity_loss(torch.tensor(a), torch.tensor(b)))
        assert 0.0 - 1e-6 <= loss <= 2.0 + 1e-6


class TestReconstruction:
    def test_identical_zero(self):
        img = torch.rand(4, 4, 3)
        (e,) = rand_vecs(6, 1)
        assert float(reconstruction_loss(img, img.clone(), e, e)) == pytest.approx(
            0.0, abs=1e-6)

    def test_semantic_term_isolated(self):
        img = torch.rand(4, 4, 3)
        loss = reconstruction_loss(img, img.clone(), vec(1, 0), vec(0, 1))
        assert float(loss) == 1.0

    def test_single_pixel_l2_is_sqrt3(self):
        a = torch.zeros(2, 2, 3)
        b = torch.zeros(2, 2, 3)
        b[0, 0, :] = 1.0  # one pixel off by 1 in each of 3 channels
        (e,) = rand_vecs(7, 1)
        loss = float(reconstruction_loss(a, b, e, e))
        assert loss == pytest.approx(np.sqrt(3.0), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            reconstruction_loss(torch.zeros(2, 2, 3), torch.zeros(3, 3, 3),
                                vec(1.0), vec(1.0))

    def test_normalize_option(self):
        a = torch.zeros(2, 2, 3)
        b = torch.ones(2, 2, 3)
        (e,) = rand_vecs(8, 1)
        raw = float(reconstruction_loss(a, b, e, e))
        norm = float(reconstruction_loss(a, b, e, e,
                                         LossOptions(normalize_pixel_loss=True)))
        # semantic term ~0 for equal embeddings; pixel term scales by numel
        assert norm == pytest.approx(raw / a.numel(), abs=1e-5)


class TestTotalLoss:
    def test_all_zero(self):
        z = torch.zeros(())
        assert float(total_loss(z, z, z, z).total) == 0.0

    def test_default_weights_arithmetic(self):
        one = torch.ones(())
        bd = total_loss(one, one, one, one)
        assert float(bd.total) == 3.5

    def test_weight_linearity(self):
        comps = [torch.tensor(float(v)) for v in (0.3, 0.7, 1.1, 2.0)]
        base = LossWeights(attn_align=0.5)
        doubled = LossWeights(attn_align=1.0)
        delta = float(total_loss(*comps, doubled).total) \
            - float(total_loss(*comps, base).total)
        assert delta == pytest.approx(0.5 * 0.7, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(clip_sim=-0.1)

    def test_default_weight_values(self):
        w = LossWeights()
        assert (w.clip_direction, w.attn_align, w.clip_sim, w.recon) == (1.0, 0.5, 1.0, 1.0)

    @given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
    @settings(max_examples=100, deadline=None)
    def test_total_formula_exact(self, a, b, c, d):
        comps = [torch.tensor(v) for v in (a, b, c, d)]
        w = LossWeights()
        bd = total_loss(*comps, w)
        expect = w.clip_direction * a + w.attn_align * b + w.clip_sim * c + w.recon * d
        assert float(bd.total) == expect

    def test_breakdown_as_dict(self):
        one = torch.ones((), requires_grad=True)
        d = total_loss(one, one, one, one).as_dict()
        assert set(d) == {"clip_direction", "attn_align", "clip_sim", "recon", "total"}
        assert all(isinstance(v, float) for v in d.values())
