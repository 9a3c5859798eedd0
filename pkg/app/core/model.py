"""
Model assembly: encoders, prompt bank, mapping head and classifier heads.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from app.core.bga import BGAOutputs, bga_forward
from app.core.cis import CISOutputs, MappingHead, cis_forward
from app.core.dhp import (
    NUM_SEGMENTS,
    DHPGroups,
    batch_partition,
    check_patch_count,
    dhp_forward,
    final_feature,
    seeded_partition,
)
from app.core.encoders import ClassifierHead, ImageEncoder, TextEncoder
from app.core.errors import ConfigurationError
from app.core.parsing import CLOTHING_PARTS, crop_regions
from app.core.prompt_bank import PromptBank, SimpleTokenizer
from app.models.config import EncoderConfig, ModelConfig
from app.utils.logger import get_logger

logger = get_logger(__name__)

# Parameter groups addressed by stage plans
IMAGE_ENCODER = "image_encoder"
TEXT_ENCODER = "text_encoder"
PROMPT_BANK = "prompt_bank"
MAPPING_HEAD = "mapping_head"
HEADS = "heads"
PARAMETER_GROUPS = (IMAGE_ENCODER, TEXT_ENCODER, PROMPT_BANK, MAPPING_HEAD, HEADS)


@dataclass
class FeatureBundle:
    """Everything one stage-2 forward pass produces."""

    f_ori: torch.Tensor
    final: torch.Tensor
    logits: torch.Tensor
    ori_tokens: torch.Tensor
    groups: Optional[DHPGroups] = None
    cis: Optional[CISOutputs] = None
    bga: Optional[BGAOutputs] = None


class PromptReIDModel(nn.Module):
    """
    Two encoders sharing one embedding space plus the method branches.

    Submodules are named after their parameter group so that group
    membership follows from the parameter name prefix.
    """

    def __init__(self, encoder_config: EncoderConfig, model_config: ModelConfig):
        super().__init__()
        if encoder_config.num_identities is None or encoder_config.num_clothes is None:
            raise ConfigurationError("num_identities and num_clothes must be resolved before building the model")
        self.encoder_config = encoder_config
        self.model_config = model_config
        if model_config.use_dhp:
            check_patch_count(encoder_config.num_patches)
        shared = encoder_config.shared_dim
        n_ids = encoder_config.num_identities

        self.image_encoder = ImageEncoder(encoder_config)
        self.text_encoder = TextEncoder(encoder_config, model_config.num_prompt_tokens)
        self.prompt_bank = PromptBank(
            n_ids,
            encoder_config.num_clothes,
            model_config.num_prompt_tokens,
            encoder_config.token_dim,
            SimpleTokenizer(encoder_config.vocab_size, encoder_config.max_text_len),
        )
        self.mapping_head = MappingHead(self.image_encoder.last_block) if model_config.use_cis else None

        final_dim = shared * NUM_SEGMENTS if model_config.use_dhp else shared
        heads = {"final": ClassifierHead(final_dim, n_ids)}
        if model_config.use_bga:
            heads["identity"] = ClassifierHead(shared, n_ids)
            heads["bio"] = ClassifierHead(shared, n_ids)
        self.heads = nn.ModuleDict(heads)

    @property
    def feature_dim(self) -> int:
        return self.heads["final"].fc.in_features

    def parameter_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        """Named parameters keyed by group; every parameter belongs to exactly one group."""
        groups: Dict[str, List[Tuple[str, nn.Parameter]]] = {g: [] for g in PARAMETER_GROUPS}
        for name, param in self.named_parameters():
            prefix = name.split(".", 1)[0]
            if prefix not in groups:
                raise ConfigurationError(f"parameter '{name}' belongs to no group")
            groups[prefix].append((name, param))
        return groups

    def set_trainable(self, trainable: Sequence[str]) -> None:
        """requires_grad on for the listed groups, off for the rest; stale grads are dropped."""
        for group, params in self.parameter_groups().items():
            for _, param in params:
                wanted = group in trainable
                if param.requires_grad != wanted:
                    param.grad = None
                param.requires_grad_(wanted)
        self.prompt_bank.invalidate_cache()

    def text_embeddings(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.prompt_bank.all_text_embeddings(self.text_encoder)

    def clothing_features(
        self,
        images: torch.Tensor,
        label_maps: torch.Tensor,
        has_mask: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Embeddings of clothing-only images and the [B] valid mask."""
        clothing_images, valid = crop_regions(images, label_maps, CLOTHING_PARTS, has_mask)
        return self.image_encoder(clothing_images), valid

    def forward_stage2(
        self,
        images: torch.Tensor,
        label_maps: torch.Tensor,
        has_mask: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> FeatureBundle:
        """
        Training forward pass with every enabled branch.

        Args:
            images: [B, 3, H, W]
            label_maps: [B, H, W]
            has_mask: [B] bool
            generator: drives the DHP permutations

        Returns:
            FeatureBundle
        """
        cfg = self.model_config
        encoder = self.image_encoder
        penultimate = encoder.encode_penultimate(images)
        tokens = encoder.refine_last_block(penultimate)
        f_ori = encoder.project(tokens)

        groups = None
        final = f_ori
        if cfg.use_dhp:
            groups = batch_partition(images.shape[0], self.encoder_config.num_patches, generator)
            final = final_feature(f_ori, dhp_forward(penultimate, groups, encoder))

        cis = None
        if cfg.use_cis:
            cis = cis_forward(images, label_maps, has_mask, encoder, self.mapping_head, penultimate, f_ori)

        bga = None
        if cfg.use_bga:
            bga = bga_forward(
                images,
                label_maps,
                has_mask,
                encoder,
                tokens,
                f_ori,
                self.heads["identity"],
                self.heads["bio"],
                cfg.bio_source,
            )

        return FeatureBundle(
            f_ori=f_ori,
            final=final,
            logits=self.heads["final"](final),
            ori_tokens=tokens,
            groups=groups,
            cis=cis,
            bga=bga,
        )

    @torch.no_grad()
    def extract_features(self, images: torch.Tensor, sample_seeds: Sequence[int]) -> torch.Tensor:
        """
        Retrieval features of a batch, before normalisation.

        Args:
            images: [B, 3, H, W]
            sample_seeds: one DHP seed per image

        Returns:
            Final features [B, feature_dim]
        """
        encoder = self.image_encoder
        penultimate = encoder.encode_penultimate(images)
        f_ori = encoder.project(encoder.refine_last_block(penultimate))
        if not self.model_config.use_dhp:
            return f_ori
        groups = seeded_partition(
            list(sample_seeds), self.encoder_config.num_patches, shuffle=self.model_config.eval_shuffle
        )
        return final_feature(f_ori, dhp_forward(penultimate, groups, encoder))


def build_model(encoder_config: EncoderConfig, model_config: ModelConfig, seed: int) -> PromptReIDModel:
    """
    Construct a model with seeded initialisation.

    Args:
        encoder_config: geometry with label spaces resolved
        model_config: method switches
        seed: initialisation seed

    Returns:
        PromptReIDModel
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PromptReIDModel(encoder_config, model_config)
    logger.info(
        "model_built",
        parameters=sum(p.numel() for p in model.parameters()),
        use_cis=model_config.use_cis,
        use_bga=model_config.use_bga,
        use_dhp=model_config.use_dhp,
    )
    return model
