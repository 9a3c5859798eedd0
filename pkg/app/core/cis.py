"""
Clothing information stripping.

Builds clothing-only images, encodes them with the shared image encoder and
maps the original tokens into clothing space with a dedicated copy of the
final block. The outputs feed the guide, spatial-consistency and
decoupling losses.
"""

import copy
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from app.core.encoders import ImageEncoder, TransformerBlock, init_weights
from app.core.parsing import CLOTHING_PARTS, ParsingMask, crop_regions, crop_single
from app.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class CISOutputs:
    """Embeddings produced by one stripping pass, all [B, shared_dim]."""

    f_ori: torch.Tensor
    f_clo: torch.Tensor
    f_img2clo: torch.Tensor
    valid: torch.Tensor


def clothing_crop(image: torch.Tensor, mask: ParsingMask) -> tuple:
    """
    Keep upper and lower clothes, zero everything else.

    Returns:
        (image, flagged); flagged images come back unchanged
    """
    return crop_single(image, mask, CLOTHING_PARTS, "clothing")


class MappingHead(nn.Module):
    """Structural clone of the encoder's final block with its own parameters."""

    def __init__(self, block: TransformerBlock, reinitialize: bool = True):
        super().__init__()
        self.block = copy.deepcopy(block)
        if reinitialize:
            self.block.apply(init_weights)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.block(tokens)


def clothing_mapping(
    ori_tokens: torch.Tensor,
    mapping_head: MappingHead,
    encoder: ImageEncoder,
) -> torch.Tensor:
    """
    Map original tokens into clothing space.

    Args:
        ori_tokens: tokens entering the final block, [B, 1+N, D] or [1+N, D]
        mapping_head: dedicated final-block copy
        encoder: supplies the shared projection

    Returns:
        F_img2clo [B, shared_dim] or [shared_dim]
    """
    unbatched = ori_tokens.dim() == 2
    refined = mapping_head(ori_tokens.unsqueeze(0) if unbatched else ori_tokens)
    out = encoder.project(refined)
    return out[0] if unbatched else out


def cis_forward(
    images: torch.Tensor,
    label_maps: torch.Tensor,
    has_mask: torch.Tensor,
    encoder: ImageEncoder,
    mapping_head: MappingHead,
    penultimate: Optional[torch.Tensor] = None,
    f_ori: Optional[torch.Tensor] = None,
) -> CISOutputs:
    """
    Run the stripping branch on a batch.

    Args:
        images: [B, 3, H, W]
        label_maps: [B, H, W]
        has_mask: [B] bool
        encoder: shared image encoder
        mapping_head: clothing mapping head
        penultimate: original tokens entering the final block, reused when given
        f_ori: original embedding, reused when given

    Returns:
        CISOutputs; valid marks samples with a non-empty clothing region
    """
    if penultimate is None:
        penultimate = encoder.encode_penultimate(images)
    if f_ori is None:
        f_ori = encoder.project(encoder.refine_last_block(penultimate))

    clothing_images, valid = crop_regions(images, label_maps, CLOTHING_PARTS, has_mask)
    if not bool(valid.all()):
        logger.debug("clothing_region_fallback", flagged=int((~valid).sum()))
    f_clo = encoder.encode_image(clothing_images).embedding
    f_img2clo = clothing_mapping(penultimate, mapping_head, encoder)
    return CISOutputs(f_ori=f_ori, f_clo=f_clo, f_img2clo=f_img2clo, valid=valid)
