"""
Directory ingestion for real cloth-changing datasets.

Layout grammars (paths relative to root):

    ltcc_like   <split>/<id>_<outfit>_c<camera>_<frame>.png
    prcc_like   <split>/<id>/<A|B|C>_<frame>.png

split is train, query or gallery (test is read as gallery). In prcc_like
trees the camera letter also names the outfit: A and B share outfit 0, C is
outfit 1. Optional masks live in a parallel tree under masks/ with the same
relative paths and a masks/palette.json.
"""

import re
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image

from app.core.errors import ConfigurationError, ContractError
from app.core.parsing import BodyPart, ParsingMask, load_palette, remap_label_map
from app.data.dataset import PALETTE_NAME, ReIDDataset, Sample, image_to_tensor
from app.models.reports import IngestionReport, SkippedFile
from app.utils.logger import get_logger

logger = get_logger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
SPLIT_ALIASES = {"train": "train", "query": "query", "gallery": "gallery", "test": "gallery"}
MASK_DIR = "masks"

LTCC_PATTERN = re.compile(r"^(?P<id>\d+)_(?P<outfit>\d+)_c(?P<camera>\d+)_(?P<frame>\d+)$")
PRCC_PATTERN = re.compile(r"^(?P<camera>[ABC])_(?P<frame>\d+)$")
PRCC_CAMERAS = {"A": 0, "B": 1, "C": 2}
PRCC_OUTFITS = {"A": 0, "B": 0, "C": 1}


class ParsedName(NamedTuple):
    person: str
    outfit: str
    camera: int
    split: str


def _parse_ltcc(rel: Path) -> Optional[ParsedName]:
    if len(rel.parts) != 2:
        return None
    match = LTCC_PATTERN.match(rel.stem)
    if not match:
        return None
    return ParsedName(match["id"], match["outfit"], int(match["camera"]), rel.parts[0])


def _parse_prcc(rel: Path) -> Optional[ParsedName]:
    if len(rel.parts) != 3 or not rel.parts[1].isdigit():
        return None
    match = PRCC_PATTERN.match(rel.stem)
    if not match:
        return None
    cam = match["camera"]
    return ParsedName(rel.parts[1], str(PRCC_OUTFITS[cam]), PRCC_CAMERAS[cam], rel.parts[0])


PARSERS = {"ltcc_like": _parse_ltcc, "prcc_like": _parse_prcc}


def parse_filename(rel: Path, layout: str) -> Optional[ParsedName]:
    """
    Labels encoded in a relative path, or None when it does not fit the grammar.

    Raises:
        ConfigurationError: unknown layout
    """
    if layout not in PARSERS:
        raise ConfigurationError(f"unknown layout '{layout}'")
    parsed = PARSERS[layout](rel)
    if parsed is None or parsed.split.lower() not in SPLIT_ALIASES:
        return None
    return parsed._replace(split=SPLIT_ALIASES[parsed.split.lower()])


def _load_mask(path: Path, palette: Optional[Dict[int, BodyPart]], shape: Tuple[int, int]) -> ParsingMask:
    with Image.open(path) as m:
        raw = np.asarray(m)
    if raw.ndim != 2 or raw.shape != shape:
        raise ContractError(f"mask {raw.shape} does not match image {shape}")
    label_map = remap_label_map(raw, palette) if palette else torch.from_numpy(raw.astype(np.int64))
    return ParsingMask(label_map)


def ingest_directory(root: Union[str, Path], layout: str) -> Tuple[ReIDDataset, IngestionReport]:
    """
    Build a dataset from a directory tree.

    Identities are indexed in sorted order of their names, clothing labels in
    sorted order of (identity, outfit) pairs, so re-ingestion is idempotent.

    Args:
        root: dataset root
        layout: "ltcc_like" or "prcc_like"

    Returns:
        (dataset, report); unparseable files are skipped and listed in the report

    Raises:
        ConfigurationError: root missing or unknown layout
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root not found: {root}")
    if layout not in PARSERS:
        raise ConfigurationError(f"unknown layout '{layout}'")

    mask_root = root / MASK_DIR
    palette = load_palette(mask_root / PALETTE_NAME) if (mask_root / PALETTE_NAME).is_file() else None
    report = IngestionReport(root=str(root), layout=layout)

    parsed: List[Tuple[Path, ParsedName]] = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root)
        if rel.parts[0] == MASK_DIR:
            continue
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            if path.suffix.lower() != ".json":
                report.skipped.append(SkippedFile(path=str(rel), reason="not an image"))
            continue
        name = parse_filename(rel, layout)
        if name is None:
            report.skipped.append(SkippedFile(path=str(rel), reason=f"does not match {layout} grammar"))
            logger.warning("ingest_unparseable_filename", path=str(rel), layout=layout)
            continue
        parsed.append((rel, name))

    id_keys = sorted({n.person for _, n in parsed}, key=lambda k: (len(k), k))
    clo_keys = sorted({(n.person, n.outfit) for _, n in parsed}, key=lambda k: ((len(k[0]), k[0]), k[1]))
    identity_map = {k: i for i, k in enumerate(id_keys)}
    clothing_map = {k: i for i, k in enumerate(clo_keys)}

    samples: List[Sample] = []
    for rel, name in parsed:
        try:
            with Image.open(root / rel) as img:
                image = image_to_tensor(img)
            mask = None
            mask_path = (mask_root / rel).with_suffix(".png")
            if mask_path.is_file():
                mask = _load_mask(mask_path, palette, tuple(image.shape[-2:]))
        except (OSError, ContractError) as e:
            report.skipped.append(SkippedFile(path=str(rel), reason=str(e)))
            logger.warning("ingest_unreadable_file", path=str(rel), error=str(e))
            continue
        samples.append(
            Sample(
                image=image,
                identity=identity_map[name.person],
                clothing=clothing_map[(name.person, name.outfit)],
                camera=name.camera,
                split=name.split,
                mask=mask,
                path=str(rel),
            )
        )

    report.num_samples = len(samples)
    report.num_with_masks = sum(s.has_mask for s in samples)
    report.identity_map = identity_map
    report.clothing_map = {f"{p}/{o}": i for (p, o), i in clothing_map.items()}
    logger.info(
        "directory_ingested",
        root=str(root),
        layout=layout,
        samples=report.num_samples,
        skipped=len(report.skipped),
        with_masks=report.num_with_masks,
    )
    dataset = ReIDDataset(
        samples=samples,
        num_identities=len(identity_map),
        num_clothes=len(clothing_map),
        layout=layout,
    )
    return dataset, report
