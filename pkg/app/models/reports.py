"""
Pydantic models for artifacts written by runs.
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from app.models.config import Protocol


class LossRecord(BaseModel):
    """One TrainLog line per optimization step."""

    kind: str = Field(default="step")
    stage: int = Field(..., description="Training stage (1 or 2)")
    epoch: int
    step: int = Field(..., description="Global step within the stage")
    lr: float
    name: str = Field(..., description="Composite loss name")
    value: float
    terms: Dict[str, float] = Field(default_factory=dict)


class EpochRecord(BaseModel):
    """One TrainLog line per finished epoch."""

    kind: str = Field(default="epoch")
    stage: int
    epoch: int
    lr: float
    mean_loss: float
    metrics: Optional[Dict[str, float]] = Field(
        None,
        description="rank-1 / mAP snapshot when evaluation ran this epoch"
    )


class ConfigRecord(BaseModel):
    """First TrainLog line: config echo and seeds."""

    kind: str = Field(default="config")
    stage: int
    seed: int
    config: Dict[str, Any]


class EvalReport(BaseModel):
    """Retrieval metrics under one protocol."""

    protocol: Protocol
    cmc: List[float] = Field(..., description="CMC curve, index k-1 is rank-k")
    mAP: float
    per_query_ap: List[float]
    num_valid_queries: int
    num_dropped_queries: int = 0
    seed: Optional[int] = None
    checkpoint: Optional[str] = None

    @property
    def rank1(self) -> float:
        return self.cmc[0] if self.cmc else 0.0

    def headline(self) -> Dict[str, float]:
        """rank-1/5/10 and mAP."""
        out = {"mAP": self.mAP}
        for k in (1, 5, 10):
            if k <= len(self.cmc):
                out[f"rank{k}"] = self.cmc[k - 1]
        return out


class SkippedFile(BaseModel):
    """A file ingestion could not use."""

    path: str
    reason: str


class IngestionReport(BaseModel):
    """Outcome of directory ingestion."""

    root: str
    layout: str
    num_samples: int = 0
    num_with_masks: int = 0
    skipped: List[SkippedFile] = Field(default_factory=list)
    identity_map: Dict[str, int] = Field(default_factory=dict)
    clothing_map: Dict[str, int] = Field(default_factory=dict)


class AblationRow(BaseModel):
    """rank-1/mAP of one variant trained with one seed."""

    variant: str
    seed: int
    rank1: float
    mAP: float


class RunSummary(BaseModel):
    """What a run directory contains, written as run.json."""

    run_id: str
    command: str
    seed: int
    versions: Dict[str, str]
    artifacts: Dict[str, str] = Field(default_factory=dict)
    metrics: Optional[Dict[str, float]] = None
