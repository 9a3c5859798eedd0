"""
Pydantic models for run configuration.

Every level forbids unknown keys so a typo in a YAML file fails validation
instead of silently falling back to a default.
"""

from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Fixed words of the prompt templates: "a photo of a" + terminal word
TEMPLATE_FIXED_WORDS = 5


class StrictModel(BaseModel):
    """Base model rejecting unknown keys."""

    model_config = ConfigDict(extra="forbid")


class EncoderConfig(StrictModel):
    """Geometry and width of the image and text encoders."""

    image_height: int = Field(default=64, gt=0, description="Input height in pixels")
    image_width: int = Field(default=32, gt=0, description="Input width in pixels")
    patch_size: int = Field(default=8, gt=0, description="Patch side P in pixels")
    patch_stride: int = Field(
        default=8,
        gt=0,
        description="Patch stride S; S == P tiles, S < P overlaps"
    )
    depth: int = Field(default=4, ge=2, description="Image transformer layers")
    heads: int = Field(default=4, gt=0, description="Attention heads per layer")
    mlp_ratio: int = Field(default=4, gt=0, description="MLP hidden width / token_dim")
    token_dim: int = Field(default=64, gt=0)
    shared_dim: int = Field(default=32, gt=0, description="Joint image-text embedding width")
    text_depth: int = Field(default=2, ge=1, description="Text transformer layers")
    vocab_size: int = Field(default=16, gt=0)
    max_text_len: int = Field(default=16, gt=0)
    num_identities: Optional[int] = Field(
        default=None,
        gt=0,
        description="N_i; resolved from the dataset when omitted"
    )
    num_clothes: Optional[int] = Field(
        default=None,
        gt=0,
        description="N_c; resolved from the dataset when omitted"
    )

    @model_validator(mode="after")
    def validate_geometry(self) -> "EncoderConfig":
        if self.patch_stride > self.patch_size:
            raise ValueError("patch_stride must not exceed patch_size")
        for name, extent in (("height", self.image_height), ("width", self.image_width)):
            if extent < self.patch_size:
                raise ValueError(f"image {name} {extent} smaller than patch_size {self.patch_size}")
            if (extent - self.patch_size) % self.patch_stride != 0:
                raise ValueError(
                    f"(image {name} - patch_size) = {extent - self.patch_size} "
                    f"not divisible by patch_stride {self.patch_stride}"
                )
        if self.token_dim % self.heads != 0:
            raise ValueError("token_dim must be divisible by heads")
        return self

    @property
    def grid_size(self) -> Tuple[int, int]:
        """Patch grid (rows, columns)."""
        rows = 1 + (self.image_height - self.patch_size) // self.patch_stride
        cols = 1 + (self.image_width - self.patch_size) // self.patch_stride
        return rows, cols

    @property
    def num_patches(self) -> int:
        """Patch token count N."""
        rows, cols = self.grid_size
        return rows * cols

    def with_label_spaces(self, num_identities: int, num_clothes: int) -> "EncoderConfig":
        """Copy with N_i and N_c filled in."""
        return self.model_copy(update={"num_identities": num_identities, "num_clothes": num_clothes})


class ModelConfig(StrictModel):
    """Method switches and loss constants."""

    num_prompt_tokens: int = Field(default=4, gt=0, description="Learnable context tokens M")
    use_cis: bool = Field(default=True, description="Clothing information stripping")
    use_bga: bool = Field(default=True, description="Bio-guided attention")
    use_dhp: bool = Field(default=True, description="Dual-length hybrid patch")
    clothing_prompts: bool = Field(
        default=True,
        description="Align clothing features with clothing prompts inside CIS"
    )
    bio_source: Literal["bio", "head"] = Field(
        default="bio",
        description="Parts kept in the BGA guidance image"
    )
    temperature: float = Field(default=1.0, gt=0, description="tau of the contrastive losses")
    triplet_margin: float = Field(default=0.3, ge=0)
    label_smoothing: float = Field(default=0.0, ge=0, lt=1)
    eval_shuffle: bool = Field(
        default=True,
        description="Shuffle DHP groups at evaluation with per-image seeds"
    )
    pretrained: Optional[str] = Field(
        default=None,
        description="Path to a pretrained-weight archive"
    )

    @property
    def is_baseline(self) -> bool:
        return not (self.use_cis or self.use_bga or self.use_dhp)


class SyntheticSpec(StrictModel):
    """Parameters of the synthetic cloth-changing dataset."""

    num_identities: int = Field(default=10, gt=0)
    outfits_per_identity: int = Field(default=3, gt=0)
    images_per_outfit: int = Field(default=4, gt=0)
    cameras: int = Field(default=2, gt=0)
    occlusion_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = 7
    image_height: int = Field(default=64, gt=0)
    image_width: int = Field(default=32, gt=0)

    @property
    def total_images(self) -> int:
        return self.num_identities * self.outfits_per_identity * self.images_per_outfit

    @property
    def num_clothes(self) -> int:
        return self.num_identities * self.outfits_per_identity


class DataConfig(StrictModel):
    """Where samples come from."""

    source: Literal["synthetic", "manifest", "directory"] = "synthetic"
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    manifest: Optional[str] = Field(default=None, description="Dataset manifest JSON path")
    root: Optional[str] = Field(default=None, description="Dataset root for directory ingestion")
    layout: Optional[Literal["prcc_like", "ltcc_like"]] = None

    @model_validator(mode="after")
    def validate_source(self) -> "DataConfig":
        if self.source == "manifest" and not self.manifest:
            raise ValueError("data.manifest is required when source is 'manifest'")
        if self.source == "directory" and not (self.root and self.layout):
            raise ValueError("data.root and data.layout are required when source is 'directory'")
        return self


class AugmentConfig(StrictModel):
    """Stage-2 training augmentation."""

    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    erase_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    erase_area: Tuple[float, float] = (0.02, 0.33)
    erase_min_aspect: float = Field(default=0.3, gt=0.0)
    erase_fill: float = 0.0

    @field_validator("erase_area")
    @classmethod
    def validate_area(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("erase_area must satisfy 0 < low <= high < 1")
        return v


class OptimizerConfig(StrictModel):
    """Adaptive-moment optimizer settings."""

    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = Field(default=0.0, ge=0.0)


class Stage1Config(StrictModel):
    """Prompt-learning stage."""

    epochs: int = Field(default=120, gt=0)
    batch_size: int = Field(default=64, gt=0)
    base_lr: float = Field(default=3.5e-4, gt=0)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)


class Stage2Config(StrictModel):
    """Image-encoder stage."""

    epochs: int = Field(default=120, gt=0)
    ids_per_batch: int = Field(default=16, gt=0, description="P")
    images_per_id: int = Field(default=4, gt=0, description="K")
    warmup_epochs: int = Field(default=10, ge=1)
    warmup_start_lr: float = Field(default=5e-7, gt=0)
    base_lr: float = Field(default=5e-6, gt=0)
    milestones: List[int] = Field(default_factory=lambda: [30, 50])
    gamma: float = Field(default=0.1, gt=0)
    repeats_per_epoch: int = Field(
        default=1,
        gt=0,
        description="Balanced-sampler passes per epoch"
    )
    eval_period: int = Field(default=0, ge=0, description="Epochs between metric snapshots; 0 disables")
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * self.images_per_id

    @field_validator("milestones")
    @classmethod
    def validate_milestones(cls, v: List[int]) -> List[int]:
        if sorted(v) != v or any(m <= 0 for m in v):
            raise ValueError("milestones must be positive and increasing")
        return v


class Protocol(StrictModel):
    """Gallery filtering rules of one evaluation."""

    mode: Literal["standard", "cloth_changing", "same_clothes"] = "cloth_changing"
    exclude_same_camera: bool = False

    @property
    def name(self) -> str:
        suffix = "+cross_camera" if self.exclude_same_camera else ""
        return f"{self.mode}{suffix}"


class EvalConfig(StrictModel):
    """Evaluation settings."""

    protocol: Optional[Protocol] = Field(
        default=None,
        description="Gallery filtering; defaults per dataset layout"
    )
    max_rank: int = Field(default=50, gt=0)
    ranking_top_k: int = Field(default=10, gt=0)
    batch_size: int = Field(default=64, gt=0)


class AblationConfig(StrictModel):
    """Variants and seeds compared by the ablate command."""

    variants: List[Literal["baseline", "cis", "bga", "dhp", "cis+bga", "full"]] = Field(
        default_factory=lambda: ["baseline", "full"]
    )
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])


class RunConfig(StrictModel):
    """Complete configuration of one run."""

    seed: int = 7
    output_dir: Optional[str] = Field(
        default=None,
        description="Run directory; defaults to <output_root>/<run id>"
    )
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    stage1: Stage1Config = Field(default_factory=Stage1Config)
    stage2: Stage2Config = Field(default_factory=Stage2Config)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="after")
    def validate_compatibility(self) -> "RunConfig":
        # sos + fixed words + M slots + eos
        needed = TEMPLATE_FIXED_WORDS + self.model.num_prompt_tokens + 2
        if self.encoder.max_text_len < needed:
            raise ValueError(
                f"encoder.max_text_len {self.encoder.max_text_len} cannot hold a "
                f"{self.model.num_prompt_tokens}-slot prompt ({needed} tokens)"
            )
        n = self.encoder.num_patches
        if self.model.use_dhp and (n < 4 or n % 4 != 0):
            raise ValueError(f"patch count {n} must be >= 4 and divisible by 4 for the hybrid patch branch")
        return self


def default_protocol(layout: Optional[str]) -> Protocol:
    """
    Per-dataset default evaluation protocol.

    Args:
        layout: Dataset layout name (None for synthetic data)

    Returns:
        Protocol used when the run configuration does not set one
    """
    if layout == "ltcc_like":
        return Protocol(mode="cloth_changing", exclude_same_camera=True)
    if layout == "celeb_like":
        return Protocol(mode="standard")
    return Protocol(mode="cloth_changing")
