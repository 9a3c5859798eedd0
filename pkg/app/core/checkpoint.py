"""
Checkpoint archives and pretrained-weight ingestion.

An archive is one torch.save file holding a dict:

    manifest     format tag, stage tag, seed, config echo, parameter shapes
    state_dict   model tensors except the prompt bank
    prompt_bank  prompt-bank tensors, under their own key
    rng          torch and numpy generator states
    optimizer    optional optimizer state
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch

from app.core.errors import ConfigurationError
from app.core.model import PROMPT_BANK, PromptReIDModel, build_model
from app.models.config import EncoderConfig, ModelConfig
from app.utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "promptreid-checkpoint/1"
PRETRAINED_FORMAT = "promptreid-weights/1"
STAGE_TAGS = ("init", "stage1", "stage2")

_BANK_PREFIX = f"{PROMPT_BANK}."


@dataclass
class Checkpoint:
    """Loaded archive contents."""

    manifest: Dict[str, Any]
    state_dict: Dict[str, torch.Tensor]
    prompt_bank: Dict[str, torch.Tensor]
    rng: Dict[str, Any] = field(default_factory=dict)
    optimizer: Optional[Dict[str, Any]] = None

    @property
    def stage(self) -> str:
        return self.manifest["stage"]

    @property
    def seed(self) -> int:
        return self.manifest["seed"]


@dataclass
class PretrainedReport:
    """Outcome of pretrained-weight ingestion."""

    loaded: List[str] = field(default_factory=list)
    shape_mismatch: List[str] = field(default_factory=list)
    unexpected: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)


def split_state(model: PromptReIDModel) -> tuple:
    """(state without prompt bank, prompt-bank state) as CPU tensors."""
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    bank = {k[len(_BANK_PREFIX):]: state.pop(k) for k in list(state) if k.startswith(_BANK_PREFIX)}
    return state, bank


def state_hash(model: PromptReIDModel, prefix: Optional[str] = None) -> str:
    """sha256 over parameter names and bytes, optionally restricted to a name prefix."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        if prefix is not None and not name.startswith(prefix):
            continue
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def capture_rng(torch_generator: torch.Generator, numpy_rng: np.random.Generator) -> Dict[str, Any]:
    return {"torch": torch_generator.get_state(), "numpy": numpy_rng.bit_generator.state}


def restore_rng(state: Dict[str, Any], torch_generator: torch.Generator, numpy_rng: np.random.Generator) -> None:
    torch_generator.set_state(state["torch"])
    numpy_rng.bit_generator.state = state["numpy"]


def save_checkpoint(
    path: Union[str, Path],
    model: PromptReIDModel,
    stage: str,
    seed: int,
    config: Dict[str, Any],
    rng: Optional[Dict[str, Any]] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint archive.

    Args:
        path: destination file
        model: model to save
        stage: stage tag
        seed: run seed
        config: run-config echo
        rng: generator states from capture_rng
        optimizer: included when resumption is intended
        extra: additional manifest entries

    Returns:
        The written path
    """
    if stage not in STAGE_TAGS:
        raise ConfigurationError(f"unknown stage tag '{stage}'")
    state, bank = split_state(model)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "seed": seed,
        "config": config,
        "encoder": model.encoder_config.model_dump(),
        "model": model.model_config.model_dump(),
        "parameters": {k: list(v.shape) for k, v in state.items()},
        "prompt_bank_key": PROMPT_BANK,
        **(extra or {}),
    }
    archive = {"manifest": manifest, "state_dict": state, PROMPT_BANK: bank, "rng": rng or {}}
    if optimizer is not None:
        archive["optimizer"] = optimizer.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(archive, path)
    logger.info("checkpoint_saved", path=str(path), stage=stage, with_optimizer=optimizer is not None)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint archive.

    Raises:
        ConfigurationError: file missing or not a checkpoint archive
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    # Archives carry numpy generator state, so full unpickling is required
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(archive, dict) or archive.get("manifest", {}).get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return Checkpoint(
        manifest=archive["manifest"],
        state_dict=archive["state_dict"],
        prompt_bank=archive[archive["manifest"].get("prompt_bank_key", PROMPT_BANK)],
        rng=archive.get("rng", {}),
        optimizer=archive.get("optimizer"),
    )


def apply_checkpoint(model: PromptReIDModel, checkpoint: Checkpoint) -> PromptReIDModel:
    """Load archive tensors into an existing model of matching structure."""
    state = dict(checkpoint.state_dict)
    state.update({_BANK_PREFIX + k: v for k, v in checkpoint.prompt_bank.items()})
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ConfigurationError(f"checkpoint does not match the model: {e}") from e
    model.prompt_bank.invalidate_cache()
    return model


def restore_model(checkpoint: Checkpoint) -> PromptReIDModel:
    """Rebuild the model recorded in a checkpoint and load its tensors."""
    encoder_config = EncoderConfig.model_validate(checkpoint.manifest["encoder"])
    model_config = ModelConfig.model_validate(checkpoint.manifest["model"])
    model = build_model(encoder_config, model_config, checkpoint.seed)
    return apply_checkpoint(model, checkpoint)


def load_pretrained(model: PromptReIDModel, path: Union[str, Path]) -> PretrainedReport:
    """
    Copy matching tensors from a pretrained-weight archive.

    The archive is a dict with manifest.format == "promptreid-weights/1" and a
    state_dict keyed by model parameter names. Tensors whose name and shape
    match are loaded; the rest are reported.

    Raises:
        ConfigurationError: missing file or wrong format
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"pretrained weights not found: {path}")
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(archive, dict) or archive.get("manifest", {}).get("format") != PRETRAINED_FORMAT:
        raise ConfigurationError(f"{path} is not a {PRETRAINED_FORMAT} archive")

    report = PretrainedReport()
    own = model.state_dict()
    incoming = archive["state_dict"]
    update = {}
    for name, tensor in incoming.items():
        if name not in own:
            report.unexpected.append(name)
        elif tuple(own[name].shape) != tuple(tensor.shape):
            report.shape_mismatch.append(name)
        else:
            update[name] = tensor
            report.loaded.append(name)
    report.missing = sorted(set(own) - set(incoming))
    model.load_state_dict(update, strict=False)
    model.prompt_bank.invalidate_cache()
    logger.info(
        "pretrained_weights_loaded",
        path=str(path),
        loaded=len(report.loaded),
        shape_mismatch=len(report.shape_mismatch),
        unexpected=len(report.unexpected),
        missing=len(report.missing),
    )
    return report


def save_pretrained(model: PromptReIDModel, path: Union[str, Path]) -> Path:
    """Export the model tensors as a pretrained-weight archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save({"manifest": {"format": PRETRAINED_FORMAT}, "state_dict": state}, path)
    return path
