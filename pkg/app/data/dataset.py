"""
Samples, datasets, batch collation and manifest IO.
"""

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from app.core.errors import ConfigurationError, ContractError
from app.core.parsing import ParsingMask, default_palette, load_palette, remap_label_map
from app.models.manifest import DatasetManifest, ManifestEntry
from app.utils.logger import get_logger

logger = get_logger(__name__)

SPLITS = ("train", "query", "gallery")
MANIFEST_NAME = "manifest.json"
PALETTE_NAME = "palette.json"


@dataclass
class Sample:
    """One image with its labels; image is [3, H, W] float in [0, 1]."""

    image: torch.Tensor
    identity: int
    clothing: int
    camera: int
    split: str
    mask: Optional[ParsingMask] = None
    path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ContractError(f"unknown split '{self.split}'")
        if self.mask is not None and self.mask.shape != tuple(self.image.shape[-2:]):
            raise ContractError(
                f"mask {self.mask.shape} does not match image {tuple(self.image.shape[-2:])}"
            )

    @property
    def has_mask(self) -> bool:
        return self.mask is not None


@dataclass
class ReIDDataset:
    """Immutable collection of samples with global label spaces."""

    samples: List[Sample]
    num_identities: int
    num_clothes: int
    layout: Optional[str] = None

    def __post_init__(self) -> None:
        owner: Dict[int, int] = {}
        for s in self.samples:
            if not (0 <= s.identity < self.num_identities and 0 <= s.clothing < self.num_clothes):
                raise ContractError(
                    f"labels ({s.identity}, {s.clothing}) outside "
                    f"[0, {self.num_identities}) x [0, {self.num_clothes})"
                )
            # A clothing label belongs to exactly one identity
            if owner.setdefault(s.clothing, s.identity) != s.identity:
                raise ContractError(f"clothing label {s.clothing} shared by two identities")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    def split(self, name: str) -> List[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def train(self) -> List[Sample]:
        return self.split("train")

    @property
    def query(self) -> List[Sample]:
        return self.split("query")

    @property
    def gallery(self) -> List[Sample]:
        return self.split("gallery")

    def training_view(self) -> "TrainingView":
        return TrainingView.from_samples(self.train)


@dataclass
class TrainingView:
    """
    Training samples with contiguous label spaces.

    Real datasets use disjoint train/test identities, so classifier heads and
    prompts are sized by the identities and outfits seen in training.
    """

    samples: List[Sample]
    identity_map: Dict[int, int] = field(default_factory=dict)
    clothing_map: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "TrainingView":
        if not samples:
            raise ConfigurationError("dataset has no training samples")
        ids = sorted({s.identity for s in samples})
        clothes = sorted({s.clothing for s in samples})
        return cls(
            samples=list(samples),
            identity_map={y: i for i, y in enumerate(ids)},
            clothing_map={y: i for i, y in enumerate(clothes)},
        )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_identities(self) -> int:
        return len(self.identity_map)

    @property
    def num_clothes(self) -> int:
        return len(self.clothing_map)

    def labels(self, index: int) -> Tuple[int, int]:
        s = self.samples[index]
        return self.identity_map[s.identity], self.clothing_map[s.clothing]

    def indices_by_identity(self) -> Dict[int, List[int]]:
        """Contiguous identity label -> sample indices, in sample order."""
        out: Dict[int, List[int]] = defaultdict(list)
        for i, s in enumerate(self.samples):
            out[self.identity_map[s.identity]].append(i)
        return dict(out)


@dataclass
class Batch:
    """Collated samples."""

    images: torch.Tensor
    label_maps: torch.Tensor
    has_mask: torch.Tensor
    identities: torch.Tensor
    clothes: torch.Tensor
    cameras: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]


def collate(samples: Sequence[Sample], view: Optional[TrainingView] = None) -> Batch:
    """
    Stack samples into a Batch.

    Args:
        samples: samples of equal image size
        view: when given, labels are translated to its contiguous spaces

    Returns:
        Batch; samples without a mask get an all-background label map
    """
    images = torch.stack([s.image for s in samples])
    h, w = images.shape[-2:]
    label_maps = torch.stack(
        [s.mask.label_map if s.mask is not None else torch.zeros(h, w, dtype=torch.long) for s in samples]
    )
    if view is not None:
        ids = [view.identity_map[s.identity] for s in samples]
        clothes = [view.clothing_map[s.clothing] for s in samples]
    else:
        ids = [s.identity for s in samples]
        clothes = [s.clothing for s in samples]
    return Batch(
        images=images,
        label_maps=label_maps.long(),
        has_mask=torch.tensor([s.has_mask for s in samples], dtype=torch.bool),
        identities=torch.tensor(ids, dtype=torch.long),
        clothes=torch.tensor(clothes, dtype=torch.long),
        cameras=torch.tensor([s.camera for s in samples], dtype=torch.long),
    )


def iter_chunks(samples: Sequence[Sample], size: int) -> Iterable[Tuple[int, List[Sample]]]:
    """Consecutive chunks with the offset of their first element."""
    for start in range(0, len(samples), size):
        yield start, list(samples[start : start + size])


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def image_to_tensor(img: Image.Image) -> torch.Tensor:
    """RGB PIL image -> [3, H, W] float in [0, 1]."""
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def tensor_to_image(image: torch.Tensor) -> Image.Image:
    arr = (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    return Image.fromarray(arr)


def save_dataset(dataset: ReIDDataset, root: Union[str, Path]) -> Path:
    """
    Write images, masks, palette and manifest under root.

    Args:
        dataset: dataset to persist
        root: output directory

    Returns:
        Path of the manifest
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / PALETTE_NAME).write_text(json.dumps(default_palette(), indent=2, sort_keys=True))

    entries: List[ManifestEntry] = []
    for i, s in enumerate(dataset.samples):
        name = f"{i:05d}_{s.identity:04d}_{s.clothing:04d}_c{s.camera}.png"
        image_path = root / "images" / name
        tensor_to_image(s.image).save(image_path)
        mask_rel = None
        if s.mask is not None:
            mask_rel = f"masks/{name}"
            Image.fromarray(s.mask.label_map.numpy().astype(np.uint8)).save(root / mask_rel)
        entries.append(
            ManifestEntry(
                path=f"images/{name}",
                mask_path=mask_rel,
                identity=s.identity,
                clothing=s.clothing,
                camera=s.camera,
                split=s.split,
                sha256=file_sha256(image_path),
            )
        )

    h, w = dataset.samples[0].image.shape[-2:] if dataset.samples else (0, 0)
    manifest = DatasetManifest(
        layout=dataset.layout,
        palette=PALETTE_NAME,
        image_height=int(h),
        image_width=int(w),
        num_identities=dataset.num_identities,
        num_clothes=dataset.num_clothes,
        samples=entries,
    )
    path = root / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2))
    logger.info("dataset_saved", root=str(root), samples=len(entries))
    return path


def load_manifest(path: Union[str, Path]) -> ReIDDataset:
    """
    Read a dataset manifest and every file it references.

    Raises:
        ConfigurationError: manifest missing or malformed
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"manifest not found: {path}")
    try:
        manifest = DatasetManifest.model_validate_json(path.read_text())
    except ValueError as e:
        raise ConfigurationError(f"invalid manifest {path}: {e}") from e

    root = path.parent
    palette = load_palette(root / manifest.palette) if manifest.palette else None
    samples: List[Sample] = []
    for entry in manifest.samples:
        with Image.open(root / entry.path) as img:
            image = image_to_tensor(img)
        mask = None
        if entry.mask_path:
            with Image.open(root / entry.mask_path) as m:
                raw = np.asarray(m)
            label_map = remap_label_map(raw, palette) if palette else torch.from_numpy(raw.astype(np.int64))
            mask = ParsingMask(label_map)
        samples.append(
            Sample(
                image=image,
                identity=entry.identity,
                clothing=entry.clothing,
                camera=entry.camera,
                split=entry.split,
                mask=mask,
                path=entry.path,
            )
        )
    logger.info("manifest_loaded", path=str(path), samples=len(samples))
    return ReIDDataset(
        samples=samples,
        num_identities=manifest.num_identities,
        num_clothes=manifest.num_clothes,
        layout=manifest.layout,
    )


def with_image(sample: Sample, image: torch.Tensor, mask: Optional[ParsingMask]) -> Sample:
    """Copy of sample with new pixel data."""
    return replace(sample, image=image, mask=mask)
