"""
Bio-guided attention.

A biological-parts-only image yields a channel-interaction mask that
enhances a clone of the original tokens; the enhanced class token is
classified by the bio head and distilled against the identity head with a
symmetric KL.
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import torch

from app.core.encoders import ClassifierHead, ImageEncoder, classify
from app.core.errors import ContractError
from app.core.losses import ZERO_NORM, bio_guided_loss
from app.core.parsing import BIO_PARTS, HEAD_PARTS, BodyPart, ParsingMask, crop_regions, crop_single


def guidance_parts(source: str) -> Iterable[BodyPart]:
    """Parts kept in the guidance image: all biological parts or the head only."""
    return HEAD_PARTS if source == "head" else BIO_PARTS


def bio_crop(image: torch.Tensor, mask: ParsingMask, source: str = "bio") -> tuple:
    """
    Keep head, arms, legs and feet (or the head only), zero everything else.

    Returns:
        (image, flagged); flagged images come back unchanged
    """
    return crop_single(image, mask, guidance_parts(source), "bio")


def normalize_tokens(tokens: torch.Tensor) -> torch.Tensor:
    """Per-token l2 normalisation; tokens with norm below 1e-12 become zero."""
    norms = tokens.norm(dim=-1, keepdim=True)
    scaled = tokens / norms.clamp_min(ZERO_NORM)
    return torch.where(norms < ZERO_NORM, torch.zeros_like(tokens), scaled)


def bga_enhance(f_bio: torch.Tensor, f_ori_clone: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Channel attention from biological tokens.

    M = normalize(F_bio)^T normalize(F'_ori), F_enh = F'_ori M + F'_ori.

    Args:
        f_bio: [1+N, D] or [B, 1+N, D]
        f_ori_clone: same shape as f_bio

    Returns:
        (M [.., D, D], F_enh same shape as f_ori_clone)
    """
    if f_bio.shape != f_ori_clone.shape:
        raise ContractError(
            f"shape mismatch {tuple(f_bio.shape)} vs {tuple(f_ori_clone.shape)}"
        )
    attn = normalize_tokens(f_bio).transpose(-1, -2) @ normalize_tokens(f_ori_clone)
    enhanced = f_ori_clone @ attn + f_ori_clone
    return attn, enhanced


def bga_distill(
    f_enh: torch.Tensor,
    f_ori: torch.Tensor,
    encoder: ImageEncoder,
    identity_head: ClassifierHead,
    bio_head: ClassifierHead,
    valid: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Symmetric-KL distillation between the backbone and the BGA branch.

    Args:
        f_enh: enhanced tokens [B, 1+N, D]
        f_ori: original embedding [B, shared_dim]
        encoder: supplies the shared projection for the enhanced class token
        identity_head: classifies f_ori
        bio_head: classifies the enhanced class token
        valid: optional [B] mask of samples with a non-empty guidance region

    Returns:
        (loss, p_img, p_bio)
    """
    p_bio = classify(encoder.project(f_enh), bio_head)
    p_img = classify(f_ori, identity_head)
    return bio_guided_loss(p_img, p_bio, valid), p_img, p_bio


@dataclass
class BGAOutputs:
    """Intermediate tensors of one bio-guided pass."""

    f_bio: torch.Tensor
    f_ori_clone: torch.Tensor
    attn: torch.Tensor
    f_enh: torch.Tensor
    p_img: torch.Tensor
    p_bio: torch.Tensor
    valid: torch.Tensor
    loss: torch.Tensor


def bga_forward(
    images: torch.Tensor,
    label_maps: torch.Tensor,
    has_mask: torch.Tensor,
    encoder: ImageEncoder,
    ori_tokens: torch.Tensor,
    f_ori: torch.Tensor,
    identity_head: ClassifierHead,
    bio_head: ClassifierHead,
    source: str = "bio",
) -> BGAOutputs:
    """
    Run the bio-guided branch on a batch.

    Args:
        images: [B, 3, H, W]
        label_maps: [B, H, W]
        has_mask: [B] bool
        encoder: shared image encoder
        ori_tokens: final tokens of the original images [B, 1+N, D]
        f_ori: original embedding [B, shared_dim]
        identity_head: backbone classifier
        bio_head: BGA-branch classifier
        source: "bio" for all biological parts, "head" for the head only

    Returns:
        BGAOutputs; samples with an empty guidance region are masked out of the loss
    """
    bio_images, valid = crop_regions(images, label_maps, guidance_parts(source), has_mask)
    f_bio = encoder.encode_image(bio_images).tokens
    # Same values as the original tokens, separate autograd path
    f_ori_clone = ori_tokens.clone()
    attn, f_enh = bga_enhance(f_bio, f_ori_clone)
    loss, p_img, p_bio = bga_distill(f_enh, f_ori, encoder, identity_head, bio_head, valid)
    return BGAOutputs(
        f_bio=f_bio,
        f_ori_clone=f_ori_clone,
        attn=attn,
        f_enh=f_enh,
        p_img=p_img,
        p_bio=p_bio,
        valid=valid,
        loss=loss,
    )
