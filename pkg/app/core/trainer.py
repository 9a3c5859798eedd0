"""
Two-stage training.

Stage 1 learns the prompt bank against frozen encoders. Stage 2 freezes the
prompt bank and text encoder and trains the image encoder, mapping head and
classifier heads. Freeze contracts are checked after every step.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel

from app.core.checkpoint import (
    Checkpoint,
    apply_checkpoint,
    capture_rng,
    load_checkpoint,
    restore_rng,
    save_checkpoint,
    state_hash,
)
from app.core.errors import ConfigurationError, FreezeContractError, NumericError
from app.core.losses import (
    LossReport,
    clothing_stripping_loss,
    cross_entropy,
    decoupling_loss,
    guide_loss,
    spatial_consistency,
    stage1_loss,
    stage2_loss,
    triplet_loss,
)
from app.core.model import (
    HEADS,
    IMAGE_ENCODER,
    MAPPING_HEAD,
    PARAMETER_GROUPS,
    PROMPT_BANK,
    TEXT_ENCODER,
    FeatureBundle,
    PromptReIDModel,
)
from app.data.dataset import Batch, Sample, TrainingView, collate, iter_chunks
from app.data.sampler import balanced_batches, shuffled_batches
from app.data.transforms import augment
from app.models.config import OptimizerConfig, RunConfig, Stage2Config
from app.models.reports import ConfigRecord, EpochRecord, EvalReport, LossRecord
from app.utils.logger import get_logger

logger = get_logger(__name__)

STAGE1_CHECKPOINT = "stage1.pt"
STAGE2_CHECKPOINT = "stage2.pt"
TRAIN_LOG = "trainlog.jsonl"

Evaluate = Callable[[PromptReIDModel], EvalReport]


# Learning-rate schedules

def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base * 0.5 * (1 + cos(pi * step / total)); step is 0-based."""
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def warmup_multistep_lr(epoch: int, config: Stage2Config) -> float:
    """
    Linear warmup followed by step decay; epoch is 1-based.

    lr rises linearly from warmup_start_lr at epoch 1 to base_lr at
    warmup_epochs, then is multiplied by gamma once per milestone reached.
    """
    if epoch < 1:
        raise ConfigurationError(f"epochs are 1-based, got {epoch}")
    if epoch <= config.warmup_epochs:
        if config.warmup_epochs == 1:
            return config.base_lr
        frac = (epoch - 1) / (config.warmup_epochs - 1)
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * frac
    decays = sum(1 for m in config.milestones if epoch >= m)
    return config.base_lr * config.gamma ** decays


def schedule_table(config: RunConfig, steps_per_epoch_stage1: int = 1) -> List[Tuple[str, int, float]]:
    """Anchor rows (stage, epoch, lr) for a dry run."""
    s1 = config.stage1
    total = s1.epochs * steps_per_epoch_stage1
    rows = [
        ("stage1", 1, cosine_lr(0, total, s1.base_lr)),
        ("stage1", s1.epochs, cosine_lr(total - 1, total, s1.base_lr)),
    ]
    s2 = config.stage2
    anchors = sorted({1, min(s2.warmup_epochs, s2.epochs), *[m for m in s2.milestones if m <= s2.epochs], s2.epochs})
    rows.extend(("stage2", e, warmup_multistep_lr(e, s2)) for e in anchors)
    return rows


# Stage plans and freeze contracts

@dataclass(frozen=True)
class StagePlan:
    """Which parameter groups a stage trains and which it must leave untouched."""

    stage: int
    trainable: FrozenSet[str]
    frozen: FrozenSet[str]
    epochs: int
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self) -> None:
        if self.trainable & self.frozen:
            raise ConfigurationError(f"groups both trainable and frozen: {sorted(self.trainable & self.frozen)}")
        uncovered = set(PARAMETER_GROUPS) - self.trainable - self.frozen
        if uncovered:
            raise ConfigurationError(f"groups neither trainable nor frozen: {sorted(uncovered)}")

    @property
    def tag(self) -> str:
        return f"stage{self.stage}"


def stage1_plan(config: RunConfig) -> StagePlan:
    return StagePlan(
        stage=1,
        trainable=frozenset({PROMPT_BANK}),
        frozen=frozenset({IMAGE_ENCODER, TEXT_ENCODER, MAPPING_HEAD, HEADS}),
        epochs=config.stage1.epochs,
        optimizer=config.stage1.optimizer,
    )


def stage2_plan(config: RunConfig) -> StagePlan:
    return StagePlan(
        stage=2,
        trainable=frozenset({IMAGE_ENCODER, MAPPING_HEAD, HEADS}),
        frozen=frozenset({PROMPT_BANK, TEXT_ENCODER}),
        epochs=config.stage2.epochs,
        optimizer=config.stage2.optimizer,
    )


class FreezeGuard:
    """Records hashes of frozen groups and verifies them after each step."""

    def __init__(self, model: PromptReIDModel, frozen: Sequence[str]):
        self.model = model
        self.frozen = sorted(frozen)
        self.hashes = {g: state_hash(model, prefix=f"{g}.") for g in self.frozen}

    def check_gradients(self) -> None:
        """Fail if any frozen parameter holds a non-zero gradient."""
        groups = self.model.parameter_groups()
        for group in self.frozen:
            for name, param in groups[group]:
                if param.grad is not None and bool(param.grad.ne(0).any()):
                    raise FreezeContractError(f"gradient on frozen parameter '{name}'", group=group)

    def verify(self) -> None:
        """Fail if any frozen group changed since the guard was created."""
        for group in self.frozen:
            if state_hash(self.model, prefix=f"{group}.") != self.hashes[group]:
                raise FreezeContractError(f"frozen group '{group}' changed", group=group)


# TrainLog

class TrainLog:
    """Append-only JSON-lines record of a stage; holds no wall-clock values."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: BaseModel) -> None:
        with self.path.open("a") as f:
            f.write(record.model_dump_json() + "\n")

    def records(self) -> List[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line]


def _check_loss(report: LossReport) -> None:
    if not torch.isfinite(report.value):
        raise NumericError(f"non-finite {report.name} loss: {report.as_floats()}")


def _make_optimizer(model: PromptReIDModel, plan: StagePlan, lr: float) -> torch.optim.Optimizer:
    model.set_trainable(plan.trainable)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ConfigurationError(f"{plan.tag} has no trainable parameters")
    opt = plan.optimizer
    return torch.optim.Adam(params, lr=lr, betas=opt.betas, eps=opt.eps, weight_decay=opt.weight_decay)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _generators(seed: int, stage: int) -> Tuple[torch.Generator, np.random.Generator]:
    torch_gen = torch.Generator()
    torch_gen.manual_seed(seed * 1000 + stage)
    return torch_gen, np.random.default_rng([seed, stage])


def _eval_samples(samples: Sequence[Sample], config: RunConfig) -> List[Sample]:
    size = (config.encoder.image_height, config.encoder.image_width)
    return [augment(s, train=False, size=size, config=config.augment) for s in samples]


class _StageTrainer:
    """Shared step bookkeeping of both stages."""

    plan: StagePlan

    def __init__(self, model: PromptReIDModel, view: TrainingView, config: RunConfig, seed: int, log: Optional[TrainLog]):
        self.model = model
        self.view = view
        self.config = config
        self.seed = seed
        self.log = log
        self.global_step = 0
        self.epoch = 0
        self.torch_gen, self.numpy_rng = _generators(seed, self.plan.stage)

    def _after_backward(self, guard: FreezeGuard) -> None:
        guard.check_gradients()
        self.optimizer.step()
        guard.verify()

    def rng_state(self) -> Dict:
        return capture_rng(self.torch_gen, self.numpy_rng)

    def resume(self, checkpoint: Checkpoint) -> None:
        """Restore weights, optimizer and generator states from a checkpoint of this stage."""
        apply_checkpoint(self.model, checkpoint)
        self.model.set_trainable(self.plan.trainable)
        if checkpoint.optimizer is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer)
        if checkpoint.rng:
            restore_rng(checkpoint.rng, self.torch_gen, self.numpy_rng)
        self.global_step = checkpoint.manifest.get("global_step", 0)
        self.epoch = checkpoint.manifest.get("epoch", 0)
        self.guard = FreezeGuard(self.model, self.plan.frozen)

    def save(self, path: Union[str, Path], with_optimizer: bool = False) -> Path:
        return save_checkpoint(
            path,
            self.model,
            stage=self.plan.tag,
            seed=self.seed,
            config=self.config.model_dump(mode="json"),
            rng=self.rng_state(),
            optimizer=self.optimizer if with_optimizer else None,
            extra={"global_step": self.global_step, "epoch": self.epoch},
        )

    def _log_config(self) -> None:
        if self.log is not None:
            self.log.append(ConfigRecord(stage=self.plan.stage, seed=self.seed, config=self.config.model_dump(mode="json")))

    def _log_step(self, report: LossReport, lr: float) -> None:
        if self.log is not None:
            self.log.append(
                LossRecord(
                    stage=self.plan.stage,
                    epoch=self.epoch,
                    step=self.global_step,
                    lr=lr,
                    name=report.name,
                    value=float(report.value.detach()),
                    terms=report.as_floats(),
                )
            )


class Stage1Trainer(_StageTrainer):
    """
    Prompt learning against frozen encoders.

    Image and clothing features are extracted once, since the image encoder
    cannot change during this stage.
    """

    def __init__(self, model: PromptReIDModel, view: TrainingView, config: RunConfig, seed: int, log: Optional[TrainLog] = None):
        self.plan = stage1_plan(config)
        super().__init__(model, view, config, seed, log)
        self.use_clothing = config.model.use_cis and config.model.clothing_prompts
        self.optimizer = _make_optimizer(model, self.plan, config.stage1.base_lr)
        self.guard = FreezeGuard(model, self.plan.frozen)
        self.steps_per_epoch = math.ceil(len(view) / config.stage1.batch_size)
        self.total_steps = self.steps_per_epoch * self.plan.epochs
        self._extract_features()

    @torch.no_grad()
    def _extract_features(self) -> None:
        ids, clothes, feats, clo_feats, valid = [], [], [], [], []
        for _, chunk in iter_chunks(self.view.samples, self.config.eval.batch_size):
            batch = collate(_eval_samples(chunk, self.config), self.view)
            ids.append(batch.identities)
            clothes.append(batch.clothes)
            feats.append(self.model.image_encoder(batch.images))
            f_clo, ok = self.model.clothing_features(batch.images, batch.label_maps, batch.has_mask)
            clo_feats.append(f_clo)
            valid.append(ok)
        self.identities = torch.cat(ids)
        self.clothes = torch.cat(clothes)
        self.image_features = torch.cat(feats)
        self.clothing_features = torch.cat(clo_feats)
        self.clothing_valid = torch.cat(valid)

    def step(self, indices: Sequence[int]) -> LossReport:
        """One optimizer step on the given training-sample indices."""
        lr = cosine_lr(self.global_step, self.total_steps, self.config.stage1.base_lr)
        _set_lr(self.optimizer, lr)
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        t_id, t_clo = self.model.text_embeddings()

        clothing_features = clothing_labels = None
        if self.use_clothing:
            keep = idx[self.clothing_valid[idx]]
            if keep.numel():
                clothing_features = self.clothing_features[keep]
                clothing_labels = self.clothes[keep]

        report = stage1_loss(
            self.image_features[idx],
            clothing_features,
            t_id,
            t_clo,
            self.identities[idx],
            clothing_labels,
            tau=self.config.model.temperature,
        )
        _check_loss(report)
        self.optimizer.zero_grad(set_to_none=True)
        report.value.backward()
        self._after_backward(self.guard)
        self._log_step(report, lr)
        self.global_step += 1
        return report

    def run(self) -> List[float]:
        """Train all epochs; returns the mean loss of each epoch."""
        self._log_config()
        means = []
        while self.epoch < self.plan.epochs:
            self.epoch += 1
            losses = [
                float(self.step(batch).value.detach())
                for batch in shuffled_batches(len(self.view), self.config.stage1.batch_size, self.numpy_rng)
            ]
            mean = float(np.mean(losses))
            means.append(mean)
            if self.log is not None:
                self.log.append(EpochRecord(stage=1, epoch=self.epoch, lr=self.optimizer.param_groups[0]["lr"], mean_loss=mean))
            logger.info("stage1_epoch_completed", epoch=self.epoch, mean_loss=mean)
        self.model.prompt_bank.invalidate_cache()
        return means


def compute_stage2_loss(
    model: PromptReIDModel,
    bundle: FeatureBundle,
    batch: Batch,
    t_id: torch.Tensor,
    t_clo: torch.Tensor,
) -> LossReport:
    """
    Stage-2 objective from one forward pass.

    Classification and triplet terms use the final feature; the stripping
    term is zero without CIS and the bio-guided term is zero without BGA.
    """
    cfg = model.model_config
    ce = cross_entropy(bundle.logits, batch.identities, label_smoothing=cfg.label_smoothing)
    tri = triplet_loss(bundle.final, batch.identities, margin=cfg.triplet_margin)

    cs = torch.zeros((), dtype=bundle.final.dtype)
    if bundle.cis is not None:
        cis = bundle.cis
        guide = guide_loss(
            cis.f_ori,
            cis.f_clo if cfg.clothing_prompts else None,
            t_id,
            t_clo if cfg.clothing_prompts else None,
            batch.identities,
            batch.clothes if cfg.clothing_prompts else None,
        )
        sc = spatial_consistency(cis.f_img2clo, cis.f_clo, cis.valid)
        de = decoupling_loss(cis.f_ori, cis.f_img2clo, cis.valid)
        cs = clothing_stripping_loss(guide, sc, de).value

    bg = bundle.bga.loss if bundle.bga is not None else torch.zeros((), dtype=bundle.final.dtype)
    return stage2_loss(ce, tri, cs, bg)


class Stage2Trainer(_StageTrainer):
    """Image-encoder training with frozen prompts and text encoder."""

    def __init__(
        self,
        model: PromptReIDModel,
        view: TrainingView,
        config: RunConfig,
        seed: int,
        log: Optional[TrainLog] = None,
        evaluate: Optional[Evaluate] = None,
    ):
        self.plan = stage2_plan(config)
        super().__init__(model, view, config, seed, log)
        self.evaluate = evaluate
        self.size = (config.encoder.image_height, config.encoder.image_width)
        self.optimizer = _make_optimizer(model, self.plan, warmup_multistep_lr(1, config.stage2))
        self.guard = FreezeGuard(model, self.plan.frozen)

    def lr(self, epoch: int) -> float:
        return warmup_multistep_lr(epoch, self.config.stage2)

    def step(self, indices: Sequence[int]) -> LossReport:
        """One optimizer step on the given training-sample indices."""
        lr = self.lr(max(self.epoch, 1))
        _set_lr(self.optimizer, lr)
        samples = [
            augment(self.view.samples[i], True, self.size, self.config.augment, self.torch_gen) for i in indices
        ]
        batch = collate(samples, self.view)
        t_id, t_clo = self.model.text_embeddings()
        self.model.train()
        bundle = self.model.forward_stage2(batch.images, batch.label_maps, batch.has_mask, self.torch_gen)
        report = compute_stage2_loss(self.model, bundle, batch, t_id, t_clo)
        _check_loss(report)
        self.optimizer.zero_grad(set_to_none=True)
        report.value.backward()
        self._after_backward(self.guard)
        self._log_step(report, lr)
        self.global_step += 1
        return report

    def epoch_batches(self) -> List[List[int]]:
        s2 = self.config.stage2
        batches: List[List[int]] = []
        for _ in range(s2.repeats_per_epoch):
            batches.extend(balanced_batches(self.view, s2.ids_per_batch, s2.images_per_id, self.numpy_rng))
        return batches

    def run(self) -> List[float]:
        """Train all epochs; returns the mean loss of each epoch."""
        self._log_config()
        means = []
        period = self.config.stage2.eval_period
        while self.epoch < self.plan.epochs:
            self.epoch += 1
            losses = [float(self.step(b).value.detach()) for b in self.epoch_batches()]
            mean = float(np.mean(losses))
            means.append(mean)
            metrics = None
            if self.evaluate is not None and period and self.epoch % period == 0:
                self.model.eval()
                metrics = self.evaluate(self.model).headline()
            if self.log is not None:
                self.log.append(
                    EpochRecord(stage=2, epoch=self.epoch, lr=self.lr(self.epoch), mean_loss=mean, metrics=metrics)
                )
            logger.info("stage2_epoch_completed", epoch=self.epoch, mean_loss=mean, metrics=metrics)
        self.model.eval()
        return means


def run_stage1(
    view: TrainingView,
    model: PromptReIDModel,
    config: RunConfig,
    run_dir: Union[str, Path],
    seed: int,
) -> Path:
    """
    Learn the prompt bank and write the stage-1 checkpoint.

    Returns:
        Path of stage1.pt
    """
    run_dir = Path(run_dir)
    trainer = Stage1Trainer(model, view, config, seed, TrainLog(run_dir / TRAIN_LOG))
    logger.info("stage1_started", epochs=trainer.plan.epochs, steps=trainer.total_steps)
    trainer.run()
    return trainer.save(run_dir / STAGE1_CHECKPOINT)


def run_stage2(
    view: TrainingView,
    model: PromptReIDModel,
    stage1_checkpoint: Optional[Union[str, Path]],
    config: RunConfig,
    run_dir: Union[str, Path],
    seed: int,
    evaluate: Optional[Evaluate] = None,
) -> Path:
    """
    Train the image side from a stage-1 checkpoint and write the stage-2 checkpoint.

    Raises:
        ConfigurationError: stage-1 checkpoint missing or of another stage

    Returns:
        Path of stage2.pt
    """
    if stage1_checkpoint is None or not Path(stage1_checkpoint).is_file():
        raise ConfigurationError(f"stage 2 needs a stage-1 checkpoint, none found at {stage1_checkpoint}")
    checkpoint = load_checkpoint(stage1_checkpoint)
    if checkpoint.stage != "stage1":
        raise ConfigurationError(f"{stage1_checkpoint} is a {checkpoint.stage} checkpoint, expected stage1")
    apply_checkpoint(model, checkpoint)

    run_dir = Path(run_dir)
    trainer = Stage2Trainer(model, view, config, seed, TrainLog(run_dir / TRAIN_LOG), evaluate)
    logger.info("stage2_started", epochs=trainer.plan.epochs, batch_size=config.stage2.batch_size)
    trainer.run()
    return trainer.save(run_dir / STAGE2_CHECKPOINT)
