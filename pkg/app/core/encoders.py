"""
Compact patch-transformer image encoder and prompt-aware text encoder.

Both project into one shared embedding space. The image encoder exposes its
final block separately (refine_last_block) because clothing mapping and the
dual-length hybrid patch locals re-run that block on other token sequences.
"""

from typing import List, NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from einops.layers.torch import Rearrange

from app.core.errors import ConfigurationError, NumericError
from app.models.config import EncoderConfig

# Probability floor applied before any log
EPS_PROB = 1e-8

INIT_STD = 0.02


class ImageEncoding(NamedTuple):
    """Result of encode_image: final tokens and the class-token embedding."""
    tokens: torch.Tensor
    embedding: torch.Tensor


class Attention(nn.Module):
    """Pre-norm multi-head self-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, attn_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.norm(x)
        q, k, v = map(
            lambda t: rearrange(t, "b n (h d) -> b h n d", h=self.heads),
            self.to_qkv(x).chunk(3, dim=-1),
        )
        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        if attn_mask is not None:
            dots = dots + attn_mask
        out = torch.matmul(dots.softmax(dim=-1), v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class TransformerBlock(nn.Module):
    """Residual attention + MLP block; sequence length is preserved."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.mlp = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor, attn_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.attn(x, attn_mask) + x
        return self.mlp(x) + x


def init_weights(module: nn.Module) -> None:
    """Truncated-normal init (std 0.02) for linear/conv weights, zero biases."""
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)


def _check_finite(x: torch.Tensor, layer: int) -> None:
    if not torch.isfinite(x).all():
        raise NumericError("non-finite activations in image encoder", layer=layer)


class ImageEncoder(nn.Module):
    """
    Vision transformer over (optionally overlapping) patches.

    Token layout: index 0 is the learned class token, indices 1..N are patches
    in row-major grid order.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        dim = config.token_dim
        self.to_patch_embedding = nn.Sequential(
            nn.Conv2d(3, dim, kernel_size=config.patch_size, stride=config.patch_stride),
            Rearrange("b d h w -> b (h w) d"),
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embedding = nn.Parameter(torch.zeros(1, 1 + config.num_patches, dim))
        self.blocks = nn.ModuleList(
            [TransformerBlock(dim, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.ln_post = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, config.shared_dim, bias=False)

        self.apply(init_weights)
        nn.init.trunc_normal_(self.cls_token, std=INIT_STD)
        nn.init.trunc_normal_(self.pos_embedding, std=INIT_STD)

    @property
    def last_block(self) -> TransformerBlock:
        return self.blocks[-1]

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """
        Embed patches, prepend the class token and add positional offsets.

        Args:
            images: [B, 3, H, W] or [3, H, W]

        Returns:
            Tokens [B, 1+N, token_dim] (unbatched input gives [1+N, token_dim])
        """
        unbatched = images.dim() == 3
        if unbatched:
            images = images.unsqueeze(0)
        expected = (3, self.config.image_height, self.config.image_width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ConfigurationError(
                f"image shape {tuple(images.shape[1:])} does not match configured {expected}"
            )
        patches = self.to_patch_embedding(images)
        cls = self.cls_token.expand(patches.shape[0], -1, -1)
        tokens = torch.cat([cls, patches], dim=1) + self.pos_embedding
        return tokens[0] if unbatched else tokens

    def forward_trace(self, images: torch.Tensor) -> List[torch.Tensor]:
        """
        Token sequences after patchify and after every block.

        Returns:
            List of depth+1 tensors [B, 1+N, token_dim]; element 0 is the patchify output
        """
        x = self.patchify(images if images.dim() == 4 else images.unsqueeze(0))
        trace = [x]
        for i, block in enumerate(self.blocks):
            x = block(x)
            _check_finite(x, i)
            trace.append(x)
        return trace

    def encode_penultimate(self, images: torch.Tensor) -> torch.Tensor:
        """Tokens entering the final block, [B, 1+N, token_dim]."""
        x = self.patchify(images)
        for i, block in enumerate(self.blocks[:-1]):
            x = block(x)
            _check_finite(x, i)
        return x

    def refine_last_block(self, tokens: torch.Tensor) -> torch.Tensor:
        """
        Apply only the final transformer block.

        Args:
            tokens: [B, L, token_dim] or [L, token_dim], any L >= 1

        Returns:
            Refined tokens of the same shape
        """
        unbatched = tokens.dim() == 2
        out = self.last_block(tokens.unsqueeze(0) if unbatched else tokens)
        _check_finite(out, len(self.blocks) - 1)
        return out[0] if unbatched else out

    def project(self, tokens: torch.Tensor) -> torch.Tensor:
        """Class token of a sequence projected to shared_dim."""
        return self.proj(self.ln_post(tokens[..., 0, :]))

    def encode_image(self, images: torch.Tensor) -> ImageEncoding:
        """
        Run patchify and all transformer layers.

        Args:
            images: [B, 3, H, W] or [3, H, W]

        Returns:
            ImageEncoding(tokens [.., 1+N, token_dim], embedding [.., shared_dim])
        """
        unbatched = images.dim() == 3
        penultimate = self.encode_penultimate(images.unsqueeze(0) if unbatched else images)
        tokens = self.refine_last_block(penultimate)
        embedding = self.project(tokens)
        if unbatched:
            return ImageEncoding(tokens[0], embedding[0])
        return ImageEncoding(tokens, embedding)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode_image(images).embedding


class TextEncoder(nn.Module):
    """
    Small causal text transformer with learnable-context splicing.

    The feature is read at the end-of-text position, located as the argmax of
    the token ids (end-of-text holds the largest id of the vocabulary).
    """

    def __init__(self, config: EncoderConfig, num_context: int):
        super().__init__()
        self.config = config
        self.num_context = num_context
        dim = config.token_dim
        self.token_embedding = nn.Embedding(config.vocab_size, dim)
        self.pos_embedding = nn.Parameter(torch.zeros(config.max_text_len, dim))
        self.blocks = nn.ModuleList(
            [TransformerBlock(dim, config.heads, config.mlp_ratio) for _ in range(config.text_depth)]
        )
        self.ln_final = nn.LayerNorm(dim)
        self.text_projection = nn.Linear(dim, config.shared_dim, bias=False)
        mask = torch.full((config.max_text_len, config.max_text_len), float("-inf")).triu(1)
        self.register_buffer("causal_mask", mask, persistent=False)

        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos_embedding, std=INIT_STD)

    def encode_text(
        self,
        token_ids: torch.Tensor,
        context: torch.Tensor,
        slot_positions: Sequence[int],
    ) -> torch.Tensor:
        """
        Encode templates with context vectors spliced into their slots.

        Args:
            token_ids: [L] or [B, L] template ids (L = max_text_len)
            context: [M, token_dim] or [B, M, token_dim]
            slot_positions: the M template positions that receive context

        Returns:
            Embeddings [shared_dim] or [B, shared_dim]
        """
        unbatched = token_ids.dim() == 1
        if unbatched:
            token_ids = token_ids.unsqueeze(0)
        if context.dim() == 2:
            context = context.unsqueeze(0).expand(token_ids.shape[0], -1, -1)
        if context.shape[1] != self.num_context or len(slot_positions) != self.num_context:
            raise ConfigurationError(
                f"expected {self.num_context} context vectors, got {context.shape[1]} "
                f"for {len(slot_positions)} slots"
            )
        if token_ids.shape[1] != self.config.max_text_len:
            raise ConfigurationError(
                f"template length {token_ids.shape[1]} != max_text_len {self.config.max_text_len}"
            )

        start = slot_positions[0]
        if list(slot_positions) != list(range(start, start + self.num_context)):
            raise ConfigurationError("context slots must be contiguous")

        x = self.token_embedding(token_ids)
        x = torch.cat([x[:, :start], context.to(x.dtype), x[:, start + self.num_context:]], dim=1)
        x = x + self.pos_embedding
        for block in self.blocks:
            x = block(x, self.causal_mask)
        x = self.ln_final(x)
        eot = token_ids.argmax(dim=-1)
        out = self.text_projection(x[torch.arange(x.shape[0]), eot])
        return out[0] if unbatched else out


class ClassifierHead(nn.Module):
    """Affine map from an embedding to class logits."""

    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)
        nn.init.normal_(self.fc.weight, std=0.001)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(x)


def class_probs(logits: torch.Tensor, eps: float = EPS_PROB) -> torch.Tensor:
    """
    Softmax mixed with eps mass per class: every entry is at least eps and rows sum to 1.
    """
    num_classes = logits.shape[-1]
    if num_classes * eps >= 1.0:
        raise ConfigurationError(f"eps {eps} too large for {num_classes} classes")
    return F.softmax(logits, dim=-1) * (1.0 - num_classes * eps) + eps


def classify(embedding: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    """
    Class probabilities of an embedding under a classifier head.

    Args:
        embedding: [shared_dim] or [B, shared_dim]
        head: identity or bio head

    Returns:
        ClassProbs with entries >= EPS_PROB summing to 1
    """
    return class_probs(head(embedding))
