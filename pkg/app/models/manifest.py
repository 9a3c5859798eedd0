"""
Pydantic models for the dataset manifest JSON.
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator

MANIFEST_FORMAT = "promptreid-manifest/1"

Split = Literal["train", "query", "gallery"]


class ManifestEntry(BaseModel):
    """One image of a dataset."""

    path: str = Field(..., description="Image path relative to the manifest directory")
    mask_path: Optional[str] = Field(None, description="Indexed mask PNG; None when absent")
    identity: int = Field(..., ge=0)
    clothing: int = Field(..., ge=0, description="Global clothing label")
    camera: int = Field(..., ge=0)
    split: Split
    sha256: Optional[str] = Field(None, description="Digest of the image file")


class DatasetManifest(BaseModel):
    """Dataset description written next to the images."""

    format: str = MANIFEST_FORMAT
    layout: Optional[str] = Field(None, description="Source layout; None for synthetic data")
    palette: Optional[str] = Field(None, description="Palette JSON mapping part names to mask ids")
    image_height: int
    image_width: int
    num_identities: int
    num_clothes: int
    samples: List[ManifestEntry] = Field(default_factory=list)

    @field_validator("format")
    @classmethod
    def validate_format(cls, v: str) -> str:
        if v != MANIFEST_FORMAT:
            raise ValueError(f"unsupported manifest format '{v}'")
        return v
