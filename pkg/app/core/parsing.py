"""
Human-parsing masks and region crops.

Part ids are fixed; external palettes are remapped onto them at ingestion.
"""

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Tuple, Union

import numpy as np
import torch

from app.core.errors import ContractError
from app.utils.logger import get_logger

logger = get_logger(__name__)


class BodyPart(IntEnum):
    BACKGROUND = 0
    HEAD = 1
    ARMS = 2
    LEGS = 3
    FEET = 4
    UPPER_CLOTHES = 5
    LOWER_CLOTHES = 6


CLOTHING_PARTS: FrozenSet[BodyPart] = frozenset({BodyPart.UPPER_CLOTHES, BodyPart.LOWER_CLOTHES})
BIO_PARTS: FrozenSet[BodyPart] = frozenset({BodyPart.HEAD, BodyPart.ARMS, BodyPart.LEGS, BodyPart.FEET})
HEAD_PARTS: FrozenSet[BodyPart] = frozenset({BodyPart.HEAD})

PART_NAMES: Dict[str, BodyPart] = {part.name.lower(): part for part in BodyPart}

FILL_VALUE = 0.0
# Largest value a 16-bit mask file can hold
MAX_MASK_ID = 65535


@dataclass
class ParsingMask:
    """Per-pixel part ids of one image, [H, W]."""

    label_map: torch.Tensor

    def __post_init__(self) -> None:
        if self.label_map.dim() != 2:
            raise ContractError("label_map must be [H, W]")
        if self.label_map.numel() and (
            self.label_map.min() < 0 or self.label_map.max() > max(BodyPart)
        ):
            raise ContractError("label_map holds ids outside the part vocabulary")

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.label_map.shape)

    def region(self, parts: Iterable[BodyPart]) -> torch.Tensor:
        """Boolean [H, W] map of pixels whose part is in parts."""
        return part_region(self.label_map, parts)


def part_region(label_maps: torch.Tensor, parts: Iterable[BodyPart]) -> torch.Tensor:
    """Boolean map of pixels belonging to parts; works on [H, W] or [B, H, W]."""
    ids = torch.tensor([int(p) for p in parts], dtype=label_maps.dtype, device=label_maps.device)
    return torch.isin(label_maps, ids)


def crop_regions(
    images: torch.Tensor,
    label_maps: torch.Tensor,
    parts: Iterable[BodyPart],
    has_mask: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Keep pixels of the given parts, zero the rest.

    Samples without a mask, or whose region is empty, fall back to the full
    image and are flagged invalid.

    Args:
        images: [B, 3, H, W]
        label_maps: [B, H, W]
        parts: parts to keep
        has_mask: [B] bool, whether a parsing mask exists

    Returns:
        (cropped images [B, 3, H, W], valid [B] bool)
    """
    if images.shape[0] != label_maps.shape[0] or images.shape[-2:] != label_maps.shape[-2:]:
        raise ContractError(
            f"mask shape {tuple(label_maps.shape)} does not match images {tuple(images.shape)}"
        )
    keep = part_region(label_maps, parts)
    valid = has_mask & keep.flatten(1).any(dim=1)
    cropped = torch.where(keep.unsqueeze(1), images, torch.full_like(images, FILL_VALUE))
    out = torch.where(valid.view(-1, 1, 1, 1), cropped, images)
    return out, valid


def crop_single(image: torch.Tensor, mask: ParsingMask, parts: Iterable[BodyPart], what: str) -> Tuple[torch.Tensor, bool]:
    """Single-image crop; returns (image, flagged)."""
    if tuple(image.shape[-2:]) != mask.shape:
        raise ContractError(f"mask {mask.shape} does not match image {tuple(image.shape[-2:])}")
    out, valid = crop_regions(
        image.unsqueeze(0), mask.label_map.unsqueeze(0), parts, torch.tensor([True])
    )
    flagged = not bool(valid[0])
    if flagged:
        logger.warning("parsing_region_empty", region=what)
    return out[0], flagged


def load_palette(path: Union[str, Path]) -> Dict[int, BodyPart]:
    """
    Read a palette JSON mapping part name -> id (or list of ids) in a mask file.

    Returns:
        file id -> BodyPart
    """
    raw = json.loads(Path(path).read_text())
    mapping: Dict[int, BodyPart] = {}
    for name, ids in raw.items():
        key = name.lower()
        if key not in PART_NAMES:
            raise ContractError(f"palette part '{name}' is not in the part vocabulary")
        for file_id in ids if isinstance(ids, list) else [ids]:
            mapping[int(file_id)] = PART_NAMES[key]
    return mapping


def default_palette() -> Dict[str, int]:
    """Palette JSON content for masks written with the native ids."""
    return {part.name.lower(): int(part) for part in BodyPart}


def remap_label_map(raw: np.ndarray, palette: Dict[int, BodyPart]) -> torch.Tensor:
    """
    Translate file ids to part ids; ids missing from the palette become background.

    Raises:
        ContractError: a palette id or mask value lies outside 0..MAX_MASK_ID
    """
    bad = sorted(i for i in palette if not 0 <= i <= MAX_MASK_ID)
    if bad:
        raise ContractError(f"palette ids outside 0..{MAX_MASK_ID}: {bad}")
    if raw.size and (int(raw.min()) < 0 or int(raw.max()) > MAX_MASK_ID):
        raise ContractError(f"mask values outside 0..{MAX_MASK_ID}")
    lut = np.zeros(MAX_MASK_ID + 1, dtype=np.int64)
    for file_id, part in palette.items():
        lut[file_id] = int(part)
    return torch.from_numpy(lut[raw.astype(np.int64)])
