"""
Learnable identity and clothing prompts.

Templates are "a photo of a <M slots> person." and "a photo of a <M slots>
clothes."; one context row is learned per identity and per clothing label.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from app.core.encoders import TextEncoder
from app.core.errors import ConfigurationError, PromptLookupError
from app.utils.logger import get_logger

logger = get_logger(__name__)

PAD, SOS, CTX = "<pad>", "<sos>", "<ctx>"
EOS = "<eos>"

IDENTITY_TEMPLATE = "a photo of a {slots} person."
CLOTHING_TEMPLATE = "a photo of a {slots} clothes."

# End-of-text must carry the largest id: the text encoder reads its feature at argmax(ids)
BASE_VOCAB = [PAD, SOS, CTX, "a", "photo", "of", "person.", "clothes.", EOS]


class SimpleTokenizer:
    """Whitespace tokenizer over the fixed template vocabulary."""

    def __init__(self, vocab_size: int, max_len: int):
        if vocab_size < len(BASE_VOCAB):
            raise ConfigurationError(
                f"vocab_size {vocab_size} smaller than template vocabulary {len(BASE_VOCAB)}"
            )
        self.max_len = max_len
        self.vocab: Dict[str, int] = {word: i for i, word in enumerate(BASE_VOCAB[:-1])}
        # Pin end-of-text to the top id
        self.vocab[EOS] = vocab_size - 1

    def encode(self, text: str) -> List[int]:
        ids = [self.vocab[SOS]]
        for word in text.lower().split():
            if word not in self.vocab:
                raise ConfigurationError(f"word '{word}' outside the template vocabulary")
            ids.append(self.vocab[word])
        ids.append(self.vocab[EOS])
        if len(ids) > self.max_len:
            raise ConfigurationError(f"template needs {len(ids)} tokens, max_text_len is {self.max_len}")
        return ids + [self.vocab[PAD]] * (self.max_len - len(ids))


@dataclass(frozen=True)
class PromptTemplate:
    """Tokenised template with the positions of its learnable slots."""

    words: Tuple[str, ...]
    token_ids: torch.Tensor
    slot_positions: Tuple[int, ...]

    @property
    def fixed_words(self) -> Tuple[str, ...]:
        return tuple(w for w in self.words if w != CTX)


def build_template(pattern: str, num_context: int, tokenizer: SimpleTokenizer) -> PromptTemplate:
    """
    Tokenise a template pattern with num_context slot markers.

    Args:
        pattern: Template with a {slots} placeholder
        num_context: Number of learnable tokens M
        tokenizer: Template tokenizer

    Returns:
        PromptTemplate
    """
    text = pattern.format(slots=" ".join([CTX] * num_context))
    ids = tokenizer.encode(text)
    ctx_id = tokenizer.vocab[CTX]
    slots = tuple(i for i, t in enumerate(ids) if t == ctx_id)
    return PromptTemplate(
        words=tuple(text.split()),
        token_ids=torch.tensor(ids, dtype=torch.long),
        slot_positions=slots,
    )


class PromptBank(nn.Module):
    """
    Class-specific learnable contexts for identities and clothes.

    Features:
    - one [M, token_dim] context row per identity and per clothing label
    - cached text embeddings while frozen, keyed on parameter versions so any
      in-place update invalidates the cache
    """

    def __init__(
        self,
        num_identities: int,
        num_clothes: int,
        num_context: int,
        token_dim: int,
        tokenizer: SimpleTokenizer,
    ):
        super().__init__()
        self.num_context = num_context
        self.identity_contexts = nn.Parameter(torch.empty(num_identities, num_context, token_dim))
        self.clothing_contexts = nn.Parameter(torch.empty(num_clothes, num_context, token_dim))
        nn.init.normal_(self.identity_contexts, std=0.02)
        nn.init.normal_(self.clothing_contexts, std=0.02)

        self.identity_template = build_template(IDENTITY_TEMPLATE, num_context, tokenizer)
        self.clothing_template = build_template(CLOTHING_TEMPLATE, num_context, tokenizer)
        self._cache: Optional[Tuple[tuple, torch.Tensor, torch.Tensor]] = None

    @property
    def num_identities(self) -> int:
        return self.identity_contexts.shape[0]

    @property
    def num_clothes(self) -> int:
        return self.clothing_contexts.shape[0]

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def identity_prompt(self, y_i: int) -> Tuple[PromptTemplate, torch.Tensor]:
        """
        Template and context row of one identity.

        Raises:
            PromptLookupError: y_i outside [0, N_i)
        """
        if not 0 <= y_i < self.num_identities:
            raise PromptLookupError(f"identity label {y_i} outside [0, {self.num_identities})")
        return self.identity_template, self.identity_contexts[y_i]

    def clothing_prompt(self, y_c: int) -> Tuple[PromptTemplate, torch.Tensor]:
        """
        Template and context row of one clothing label.

        Raises:
            PromptLookupError: y_c outside [0, N_c)
        """
        if not 0 <= y_c < self.num_clothes:
            raise PromptLookupError(f"clothing label {y_c} outside [0, {self.num_clothes})")
        return self.clothing_template, self.clothing_contexts[y_c]

    def encode_identities(self, encoder: TextEncoder, labels: torch.Tensor) -> torch.Tensor:
        """Text embeddings [len(labels), shared_dim] of the given identity prompts."""
        return self._encode(encoder, self.identity_template, self.identity_contexts[labels])

    def encode_clothes(self, encoder: TextEncoder, labels: torch.Tensor) -> torch.Tensor:
        """Text embeddings [len(labels), shared_dim] of the given clothing prompts."""
        return self._encode(encoder, self.clothing_template, self.clothing_contexts[labels])

    @staticmethod
    def _encode(encoder: TextEncoder, template: PromptTemplate, contexts: torch.Tensor) -> torch.Tensor:
        ids = template.token_ids.to(contexts.device).unsqueeze(0).expand(contexts.shape[0], -1)
        return encoder.encode_text(ids, contexts, template.slot_positions)

    def _version_key(self, encoder: TextEncoder) -> tuple:
        params = list(self.parameters()) + list(encoder.parameters())
        return tuple((id(p), p._version) for p in params)

    def invalidate_cache(self) -> None:
        self._cache = None

    def all_text_embeddings(self, encoder: TextEncoder) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Encode every identity and clothing prompt.

        While the bank and encoder are frozen the result is cached; the cache
        key tracks parameter versions, so an in-place update forces recomputation.

        Args:
            encoder: Text encoder

        Returns:
            (T_id [N_i, shared_dim], T_clo [N_c, shared_dim])
        """
        device = self.identity_contexts.device
        all_ids = torch.arange(self.num_identities, device=device)
        all_clo = torch.arange(self.num_clothes, device=device)
        frozen = self.frozen and not any(p.requires_grad for p in encoder.parameters())
        if not frozen:
            self._cache = None
            return self.encode_identities(encoder, all_ids), self.encode_clothes(encoder, all_clo)

        key = self._version_key(encoder)
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1], self._cache[2]

        with torch.no_grad():
            t_id = self.encode_identities(encoder, all_ids)
            t_clo = self.encode_clothes(encoder, all_clo)
        self._cache = (key, t_id, t_clo)
        logger.debug("text_embeddings_cached", identities=self.num_identities, clothes=self.num_clothes)
        return t_id, t_clo
