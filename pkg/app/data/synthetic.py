"""
Synthetic cloth-changing dataset.

Figures are drawn part by part into an indexed mask with PIL ImageDraw and
the image is colored from that mask, so every mask is exact.

- identity: head size, body width, leg length, skin and hair color
- outfit: upper/lower clothing colors and stripe pattern
- camera: background color and horizontal shear

Split per identity: all images of the last outfit are queries, the first
image of every other outfit goes to the gallery, the rest is training data.
Every query therefore has gallery matches only in other outfits.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from app.core.errors import ConfigurationError
from app.core.parsing import BodyPart, ParsingMask
from app.data.dataset import ReIDDataset, Sample
from app.models.config import SyntheticSpec
from app.utils.logger import get_logger

logger = get_logger(__name__)

SKIN_TONES = [(241, 194, 125), (224, 172, 105), (198, 134, 66), (141, 85, 36), (255, 219, 172)]
HAIR_COLORS = [(20, 20, 20), (90, 56, 37), (180, 140, 60), (120, 120, 120), (160, 40, 20)]
MAX_SHEAR = 0.15
STRIPE_PERIOD = 4


@dataclass(frozen=True)
class Physique:
    head_scale: float
    body_scale: float
    leg_scale: float
    skin: Tuple[int, int, int]
    hair: Tuple[int, int, int]


@dataclass(frozen=True)
class Outfit:
    upper: Tuple[int, int, int]
    lower: Tuple[int, int, int]
    pattern: int  # 0 solid, 1 horizontal stripes, 2 vertical stripes


def _color(rng: np.random.Generator) -> Tuple[int, int, int]:
    return tuple(int(c) for c in rng.integers(30, 226, size=3))


def _draw_figure(h: int, w: int, body: Physique, dx: int) -> Image.Image:
    """Indexed mask of one upright figure."""
    mask = Image.new("L", (w, h), int(BodyPart.BACKGROUND))
    draw = ImageDraw.Draw(mask)
    cx = w / 2 + dx

    r = max(2.0, h * 0.08 * body.head_scale)
    head_cy = h * 0.04 + r
    torso_top = head_cy + r
    torso_bottom = h * 0.52
    half = w * 0.2 * body.body_scale
    arm_w = max(2.0, w * 0.09)
    lower_bottom = min(h * 0.88, torso_bottom + h * 0.22 * body.leg_scale)
    leg_bottom = h * 0.9
    foot_bottom = h * 0.96

    draw.rectangle([cx - half - arm_w, torso_top + 1, cx - half - 1, torso_bottom - 2], fill=int(BodyPart.ARMS))
    draw.rectangle([cx + half + 1, torso_top + 1, cx + half + arm_w, torso_bottom - 2], fill=int(BodyPart.ARMS))
    draw.rectangle([cx - half + 1, lower_bottom, cx - 1, leg_bottom], fill=int(BodyPart.LEGS))
    draw.rectangle([cx + 1, lower_bottom, cx + half - 1, leg_bottom], fill=int(BodyPart.LEGS))
    draw.rectangle([cx - half, leg_bottom + 1, cx - 1, foot_bottom], fill=int(BodyPart.FEET))
    draw.rectangle([cx + 1, leg_bottom + 1, cx + half, foot_bottom], fill=int(BodyPart.FEET))
    draw.rectangle([cx - half + 1, torso_bottom + 1, cx + half - 1, lower_bottom - 1], fill=int(BodyPart.LOWER_CLOTHES))
    draw.rectangle([cx - half, torso_top, cx + half, torso_bottom], fill=int(BodyPart.UPPER_CLOTHES))
    draw.ellipse([cx - r, head_cy - r, cx + r, head_cy + r], fill=int(BodyPart.HEAD))
    return mask


def _colorize(
    labels: np.ndarray,
    body: Physique,
    outfit: Outfit,
    background: Tuple[int, int, int],
) -> np.ndarray:
    h, w = labels.shape
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = background
    for part, color in (
        (BodyPart.HEAD, body.skin),
        (BodyPart.ARMS, body.skin),
        (BodyPart.LEGS, body.skin),
        (BodyPart.FEET, (40, 30, 30)),
        (BodyPart.UPPER_CLOTHES, outfit.upper),
        (BodyPart.LOWER_CLOTHES, outfit.lower),
    ):
        img[labels == part] = color

    # Hair on the upper half of the head
    head_rows = np.nonzero((labels == BodyPart.HEAD).any(axis=1))[0]
    if head_rows.size:
        top = head_rows[0] + (head_rows[-1] - head_rows[0] + 1) // 2
        hair = labels == BodyPart.HEAD
        hair[top:] = False
        img[hair] = body.hair

    if outfit.pattern:
        rows, cols = np.indices((h, w))
        stripe = (rows if outfit.pattern == 1 else cols) % STRIPE_PERIOD == 0
        upper = (labels == BodyPart.UPPER_CLOTHES) & stripe
        img[upper] *= 0.55
    return img


def _shear(image: Image.Image, mask: Image.Image, shear: float, fill: Tuple[int, int, int]) -> Tuple[Image.Image, Image.Image]:
    h = image.size[1]
    coeffs = (1.0, shear, -shear * h / 2.0, 0.0, 1.0, 0.0)
    image = image.transform(image.size, Image.Transform.AFFINE, coeffs, resample=Image.Resampling.NEAREST, fillcolor=fill)
    mask = mask.transform(mask.size, Image.Transform.AFFINE, coeffs, resample=Image.Resampling.NEAREST, fillcolor=int(BodyPart.BACKGROUND))
    return image, mask


def _occlude(img: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> None:
    """Grey box over part of the body; covered pixels become background."""
    h, w = labels.shape
    bh = int(rng.integers(h // 6, h // 3 + 1))
    top = int(rng.integers(h // 4, h - bh))
    img[top : top + bh] = 128.0
    labels[top : top + bh] = int(BodyPart.BACKGROUND)


def render_sample(
    h: int,
    w: int,
    body: Physique,
    outfit: Outfit,
    background: Tuple[int, int, int],
    shear: float,
    rng: np.random.Generator,
    occlude: bool = False,
) -> Tuple[torch.Tensor, ParsingMask]:
    """
    Render one image and its exact mask.

    Returns:
        (image [3, H, W] in [0, 1], ParsingMask)
    """
    dx = int(rng.integers(-1, 2))
    mask = _draw_figure(h, w, body, dx)
    labels = np.asarray(mask, dtype=np.int64)
    pixels = _colorize(labels, body, outfit, background)
    image = Image.fromarray(pixels.round().clip(0, 255).astype(np.uint8))
    image, mask = _shear(image, mask, shear, background)

    img = np.asarray(image, dtype=np.float32).copy()
    labels = np.asarray(mask, dtype=np.int64).copy()
    if occlude:
        _occlude(img, labels, rng)
    tensor = torch.from_numpy(img / 255.0).permute(2, 0, 1).contiguous()
    return tensor, ParsingMask(torch.from_numpy(labels))


def _split(outfit: int, image: int, num_outfits: int) -> str:
    if outfit == num_outfits - 1:
        return "query"
    return "gallery" if image == 0 else "train"


def generate_synthetic(spec: SyntheticSpec) -> ReIDDataset:
    """
    Render a cloth-changing dataset.

    Args:
        spec: counts, image size and seed

    Returns:
        ReIDDataset with num_identities * outfits_per_identity clothing labels

    Raises:
        ConfigurationError: fewer than two outfits or two images per outfit
    """
    if spec.outfits_per_identity < 2:
        raise ConfigurationError("a cloth-changing split needs at least 2 outfits per identity")
    if spec.images_per_outfit < 2:
        raise ConfigurationError("gallery and training images need at least 2 images per outfit")

    root = np.random.SeedSequence(spec.seed)
    camera_rng, *identity_seeds = [np.random.default_rng(s) for s in root.spawn(1 + spec.num_identities)]
    backgrounds = [_color(camera_rng) for _ in range(spec.cameras)]
    shears = [float(s) for s in np.linspace(-MAX_SHEAR, MAX_SHEAR, spec.cameras)] if spec.cameras > 1 else [0.0]

    samples: List[Sample] = []
    for identity, rng in enumerate(identity_seeds):
        body = Physique(
            head_scale=float(rng.uniform(0.85, 1.15)),
            body_scale=float(rng.uniform(0.8, 1.2)),
            leg_scale=float(rng.uniform(0.8, 1.2)),
            skin=SKIN_TONES[int(rng.integers(len(SKIN_TONES)))],
            hair=HAIR_COLORS[int(rng.integers(len(HAIR_COLORS)))],
        )
        for o in range(spec.outfits_per_identity):
            outfit = Outfit(upper=_color(rng), lower=_color(rng), pattern=int(rng.integers(3)))
            clothing = identity * spec.outfits_per_identity + o
            for i in range(spec.images_per_outfit):
                camera = i % spec.cameras
                image, mask = render_sample(
                    spec.image_height,
                    spec.image_width,
                    body,
                    outfit,
                    backgrounds[camera],
                    shears[camera],
                    rng,
                    occlude=bool(rng.random() < spec.occlusion_prob),
                )
                samples.append(
                    Sample(
                        image=image,
                        identity=identity,
                        clothing=clothing,
                        camera=camera,
                        split=_split(o, i, spec.outfits_per_identity),
                        mask=mask,
                    )
                )

    logger.info(
        "synthetic_dataset_generated",
        identities=spec.num_identities,
        clothes=spec.num_clothes,
        images=len(samples),
        seed=spec.seed,
    )
    return ReIDDataset(samples=samples, num_identities=spec.num_identities, num_clothes=spec.num_clothes)
