"""
Resize, flip and random-erasing augmentation.

Masks follow every geometric step with nearest-neighbour resampling and are
never erased.
"""

import math
from typing import Optional, Tuple

import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from app.core.parsing import ParsingMask
from app.data.dataset import Sample, with_image
from app.models.config import AugmentConfig

ERASE_ATTEMPTS = 10


def _uniform(generator: Optional[torch.Generator], low: float = 0.0, high: float = 1.0) -> float:
    return low + (high - low) * float(torch.rand(1, generator=generator))


def _randint(generator: Optional[torch.Generator], high: int) -> int:
    return int(torch.randint(0, high, (1,), generator=generator))


def resize(sample: Sample, size: Tuple[int, int]) -> Sample:
    """Resize image (bilinear) and mask (nearest) to size = (H, W)."""
    if tuple(sample.image.shape[-2:]) == tuple(size):
        return sample
    image = TF.resize(sample.image, list(size), interpolation=InterpolationMode.BILINEAR, antialias=True)
    mask = None
    if sample.mask is not None:
        label_map = TF.resize(
            sample.mask.label_map.unsqueeze(0), list(size), interpolation=InterpolationMode.NEAREST
        )[0]
        mask = ParsingMask(label_map)
    return with_image(sample, image.clamp(0.0, 1.0), mask)


def hflip(sample: Sample) -> Sample:
    mask = ParsingMask(TF.hflip(sample.mask.label_map)) if sample.mask is not None else None
    return with_image(sample, TF.hflip(sample.image), mask)


def erase_params(
    height: int,
    width: int,
    config: AugmentConfig,
    generator: Optional[torch.Generator] = None,
) -> Optional[Tuple[int, int, int, int]]:
    """
    Draw an erasing box (top, left, h, w) covering erase_area of the image.

    Returns:
        The box, or None when no attempt fits
    """
    area = height * width
    log_ratio = (math.log(config.erase_min_aspect), math.log(1.0 / config.erase_min_aspect))
    for _ in range(ERASE_ATTEMPTS):
        target = area * _uniform(generator, *config.erase_area)
        aspect = math.exp(_uniform(generator, *log_ratio))
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < height and 0 < w < width:
            return _randint(generator, height - h + 1), _randint(generator, width - w + 1), h, w
    return None


def augment(
    sample: Sample,
    train: bool,
    size: Tuple[int, int],
    config: AugmentConfig,
    generator: Optional[torch.Generator] = None,
) -> Sample:
    """
    Training or evaluation preprocessing.

    Args:
        sample: input sample
        train: False resizes only
        size: target (H, W)
        config: flip and erasing parameters
        generator: source of randomness for the training path

    Returns:
        New sample; the input is not modified
    """
    sample = resize(sample, size)
    if not train:
        return sample
    if _uniform(generator) < config.flip_prob:
        sample = hflip(sample)
    if _uniform(generator) < config.erase_prob:
        box = erase_params(size[0], size[1], config, generator)
        if box is not None:
            top, left, h, w = box
            image = TF.erase(sample.image, top, left, h, w, torch.tensor(config.erase_fill))
            sample = with_image(sample, image, sample.mask)
    return sample
