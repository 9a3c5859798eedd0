"""
Tests for the image encoder, text encoder and classifier heads.
"""

import itertools
import math

import pytest
import torch

from app.core.encoders import (
    EPS_PROB,
    ClassifierHead,
    ImageEncoder,
    TextEncoder,
    class_probs,
    classify,
)
from app.core.errors import ConfigurationError, NumericError
from app.core.prompt_bank import SimpleTokenizer, build_template
from app.models.config import EncoderConfig


def encoder(**overrides) -> ImageEncoder:
    fields = dict(image_height=32, image_width=16, patch_size=8, patch_stride=8, depth=2, heads=2,
                  mlp_ratio=2, token_dim=16, shared_dim=8)
    fields.update(overrides)
    torch.manual_seed(0)
    return ImageEncoder(EncoderConfig(**fields)).eval()


# ----------------------------------------------------------------------------
# Geometry
# ----------------------------------------------------------------------------


class TestPatchGeometry:
    """Patch counts for tiling and overlapping strides."""

    @pytest.mark.parametrize(
        "h, w, p, s, n",
        [
            (32, 32, 16, 16, 4),
            (256, 128, 16, 16, 128),
            (32, 32, 16, 8, 9),
        ],
    )
    def test_patch_counts(self, h, w, p, s, n):
        config = EncoderConfig(image_height=h, image_width=w, patch_size=p, patch_stride=s)
        assert config.num_patches == n

    def test_sequence_length_includes_class_token(self):
        enc = encoder(image_height=32, image_width=32, patch_size=16, patch_stride=8)
        tokens = enc.patchify(torch.zeros(2, 3, 32, 32))
        assert tokens.shape == (2, 10, 16)

    def test_patch_count_matches_exhaustive_enumeration(self):
        for h, w, p, s in itertools.product([16, 24, 32], [8, 16], [4, 8], [2, 4, 8]):
            if s > p or h < p or w < p or (h - p) % s or (w - p) % s:
                continue
            config = EncoderConfig(image_height=h, image_width=w, patch_size=p, patch_stride=s, token_dim=16, heads=2)
            positions = [
                (top, left)
                for top in range(0, h - p + 1)
                for left in range(0, w - p + 1)
                if top % s == 0 and left % s == 0
            ]
            assert config.num_patches == len(positions)

    def test_stride_larger_than_patch_rejected(self):
        with pytest.raises(ValueError):
            EncoderConfig(patch_size=8, patch_stride=16)

    def test_indivisible_extent_rejected(self):
        with pytest.raises(ValueError):
            EncoderConfig(image_height=30, image_width=32, patch_size=8, patch_stride=8)

    def test_wrong_image_shape_raises(self):
        enc = encoder()
        with pytest.raises(ConfigurationError):
            enc.patchify(torch.zeros(1, 3, 16, 16))


# ----------------------------------------------------------------------------
# Image encoder
# ----------------------------------------------------------------------------


class TestImageEncoder:
    def test_zero_image_gives_finite_embedding(self):
        enc = encoder()
        out = enc.encode_image(torch.zeros(3, 32, 16))
        assert out.embedding.shape == (8,)
        assert out.tokens.shape == (9, 16)
        assert torch.isfinite(out.embedding).all()

    def test_deterministic_inference(self):
        enc = encoder()
        x = torch.rand(2, 3, 32, 16, generator=torch.Generator().manual_seed(1))
        assert torch.equal(enc(x), enc(x))

    def test_one_pixel_changes_embedding(self):
        enc = encoder()
        x = torch.rand(1, 3, 32, 16, generator=torch.Generator().manual_seed(2))
        y = x.clone()
        y[0, 1, 5, 7] += 0.5
        assert not torch.allclose(enc(x), enc(y))

    def test_penultimate_plus_last_block_equals_trace(self):
        enc = encoder(depth=3)
        x = torch.rand(2, 3, 32, 16, generator=torch.Generator().manual_seed(3))
        trace = enc.forward_trace(x)
        assert len(trace) == 4
        penultimate = enc.encode_penultimate(x)
        assert torch.allclose(penultimate, trace[-2])
        assert torch.allclose(enc.refine_last_block(penultimate), trace[-1])
        assert torch.allclose(enc.encode_image(x).tokens, trace[-1])

    def test_refine_last_block_preserves_length(self):
        enc = encoder()
        tokens = torch.randn(5, 16)
        assert enc.refine_last_block(tokens).shape == (5, 16)
        assert enc.refine_last_block(tokens.unsqueeze(0)).shape == (1, 5, 16)

    def test_shared_projection_is_linear(self):
        model = encoder()
        gen = torch.Generator().manual_seed(3)
        a, b = torch.randn(4, 16, generator=gen), torch.randn(4, 16, generator=gen)
        with torch.no_grad():
            assert torch.allclose(model.proj(a + b), model.proj(a) + model.proj(b), atol=1e-6)
            assert torch.allclose(model.proj(2.5 * a), 2.5 * model.proj(a), atol=1e-6)

    def test_non_finite_activation_reports_layer(self):
        enc = encoder()
        with torch.no_grad():
            enc.blocks[0].mlp[1].weight.fill_(float("nan"))
        with pytest.raises(NumericError) as exc:
            enc(torch.zeros(1, 3, 32, 16))
        assert exc.value.layer == 0


# ----------------------------------------------------------------------------
# Text encoder
# ----------------------------------------------------------------------------


class TestTextEncoder:
    @pytest.fixture
    def setup(self):
        config = EncoderConfig(token_dim=16, heads=2, shared_dim=8, text_depth=1, vocab_size=16, max_text_len=16)
        torch.manual_seed(0)
        text = TextEncoder(config, num_context=4).eval()
        template = build_template("a photo of a {slots} person.", 4, SimpleTokenizer(16, 16))
        return text, template

    def test_zero_context_is_finite(self, setup):
        text, template = setup
        out = text.encode_text(template.token_ids, torch.zeros(4, 16), template.slot_positions)
        assert out.shape == (8,)
        assert torch.isfinite(out).all()

    def test_context_changes_embedding(self, setup):
        text, template = setup
        gen = torch.Generator().manual_seed(2)
        a = text.encode_text(template.token_ids, torch.randn(4, 16, generator=gen), template.slot_positions)
        b = text.encode_text(template.token_ids, torch.randn(4, 16, generator=gen), template.slot_positions)
        assert not torch.allclose(a, b)

    def test_batched_matches_single(self, setup):
        text, template = setup
        ctx = torch.randn(3, 4, 16, generator=torch.Generator().manual_seed(4))
        ids = template.token_ids.unsqueeze(0).expand(3, -1)
        batched = text.encode_text(ids, ctx, template.slot_positions)
        for i in range(3):
            single = text.encode_text(template.token_ids, ctx[i], template.slot_positions)
            assert torch.allclose(batched[i], single, atol=1e-6)

    def test_wrong_context_length_raises(self, setup):
        text, template = setup
        with pytest.raises(ConfigurationError):
            text.encode_text(template.token_ids, torch.zeros(3, 16), template.slot_positions[:3])


# ----------------------------------------------------------------------------
# Classifier heads
# ----------------------------------------------------------------------------


class TestClassify:
    def test_zero_head_is_uniform(self):
        head = ClassifierHead(8, 5)
        with torch.no_grad():
            head.fc.weight.zero_()
        probs = classify(torch.randn(8), head)
        assert torch.allclose(probs, torch.full((5,), 0.2))

    def test_known_logits(self):
        probs = class_probs(torch.tensor([math.log(2.0), 0.0]))
        assert torch.allclose(probs, torch.tensor([2 / 3, 1 / 3]))

    def test_probabilities_are_floored_and_normalised(self):
        probs = class_probs(torch.tensor([[100.0, -100.0, 0.0]]))
        assert float(probs.min()) >= EPS_PROB
        assert torch.allclose(probs.sum(dim=-1), torch.ones(1))

    def test_eps_too_large_for_class_count(self):
        with pytest.raises(ConfigurationError):
            class_probs(torch.zeros(4), eps=0.25)
