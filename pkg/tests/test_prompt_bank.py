"""
Tests for prompt templates and the learnable prompt bank.
"""

import pytest
import torch

from app.core.encoders import TextEncoder
from app.core.errors import ConfigurationError, PromptLookupError
from app.core.prompt_bank import CTX, PromptBank, SimpleTokenizer, build_template
from app.models.config import EncoderConfig

M = 4


@pytest.fixture
def text_config() -> EncoderConfig:
    return EncoderConfig(token_dim=16, heads=2, shared_dim=8, text_depth=1, vocab_size=16, max_text_len=16)


@pytest.fixture
def bank(text_config) -> PromptBank:
    torch.manual_seed(0)
    return PromptBank(5, 7, M, text_config.token_dim, SimpleTokenizer(16, 16))


@pytest.fixture
def text_encoder(text_config) -> TextEncoder:
    torch.manual_seed(1)
    return TextEncoder(text_config, M)


class TestTokenizer:
    def test_end_of_text_holds_largest_id(self):
        tok = SimpleTokenizer(16, 16)
        ids = tok.encode("a photo of a person.")
        assert max(ids) == 15
        assert ids.index(15) == 6
        assert len(ids) == 16

    def test_unknown_word_rejected(self):
        with pytest.raises(ConfigurationError):
            SimpleTokenizer(16, 16).encode("a photo of a dog")

    def test_too_long_rejected(self):
        with pytest.raises(ConfigurationError):
            SimpleTokenizer(16, 8).encode("a photo of a " + " ".join([CTX] * 4) + " person.")

    def test_vocab_too_small(self):
        with pytest.raises(ConfigurationError):
            SimpleTokenizer(4, 16)


class TestTemplates:
    def test_identity_template_layout(self, bank):
        template, context = bank.identity_prompt(0)
        assert template.fixed_words == ("a", "photo", "of", "a", "person.")
        assert len(template.slot_positions) == M
        assert template.slot_positions == (5, 6, 7, 8)
        assert context.shape == (M, 16)

    def test_clothing_template_layout(self, bank):
        template, _ = bank.clothing_prompt(0)
        assert template.fixed_words[-1] == "clothes."
        assert len(template.slot_positions) == M

    def test_slots_are_contiguous_after_fixed_prefix(self):
        template = build_template("a photo of a {slots} person.", 2, SimpleTokenizer(16, 16))
        assert template.words == ("a", "photo", "of", "a", CTX, CTX, "person.")
        assert template.slot_positions == (5, 6)


class TestPromptBank:
    @pytest.mark.parametrize("label", [-1, 5])
    def test_identity_out_of_range(self, bank, label):
        with pytest.raises(PromptLookupError):
            bank.identity_prompt(label)

    def test_clothing_out_of_range(self, bank):
        with pytest.raises(PromptLookupError):
            bank.clothing_prompt(7)

    def test_distinct_rows_per_identity(self, bank):
        _, a = bank.identity_prompt(0)
        _, b = bank.identity_prompt(1)
        assert not torch.equal(a, b)

    def test_all_text_embeddings_shapes(self, bank, text_encoder):
        t_id, t_clo = bank.all_text_embeddings(text_encoder)
        assert t_id.shape == (5, 8)
        assert t_clo.shape == (7, 8)

    def test_subset_matches_full_bank(self, bank, text_encoder):
        t_id, _ = bank.all_text_embeddings(text_encoder)
        subset = bank.encode_identities(text_encoder, torch.tensor([3, 1]))
        assert torch.allclose(subset, t_id[[3, 1]], atol=1e-6)

    def test_trainable_bank_is_not_cached(self, bank, text_encoder):
        t_id, _ = bank.all_text_embeddings(text_encoder)
        assert t_id.requires_grad
        assert bank._cache is None

    def test_frozen_bank_is_cached_and_invalidated_by_updates(self, bank, text_encoder):
        for p in list(bank.parameters()) + list(text_encoder.parameters()):
            p.requires_grad_(False)
        first, _ = bank.all_text_embeddings(text_encoder)
        again, _ = bank.all_text_embeddings(text_encoder)
        assert again is first

        with torch.no_grad():
            bank.identity_contexts.add_(
                torch.randn(bank.identity_contexts.shape, generator=torch.Generator().manual_seed(1))
            )
        updated, _ = bank.all_text_embeddings(text_encoder)
        assert updated is not first
        assert not torch.allclose(updated, first)
