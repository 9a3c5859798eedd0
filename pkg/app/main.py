"""
PromptReID - cloth-changing person re-identification at desk scale.

Command-line entry point.

Usage:
    python -m app.main generate --config configs/desk.yaml --output-dir runs/data
    python -m app.main train --config configs/desk.yaml --stage both
    python -m app.main eval --config configs/desk.yaml --checkpoint runs/x/stage2.pt
    python -m app.main export-similarity --checkpoint runs/x/stage2.pt --split query
    python -m app.main ablate --config configs/desk.yaml

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
failure, 4 freeze-contract violation.
"""

import argparse
import csv
import json
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Generator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from pydantic import ValidationError

from app.config import settings
from app.core.checkpoint import load_checkpoint, load_pretrained, restore_model, save_pretrained
from app.core.errors import (
    ConfigurationError,
    FreezeContractError,
    NumericError,
    PromptReIDError,
)
from app.core.evaluator import evaluate, export_similarity_matrix, extract_features, write_eval_artifacts
from app.core.model import PromptReIDModel, build_model
from app.core.trainer import STAGE1_CHECKPOINT, TRAIN_LOG, run_stage1, run_stage2, schedule_table
from app.data.dataset import ReIDDataset, file_sha256, load_manifest, save_dataset
from app.data.ingest import ingest_directory
from app.data.synthetic import generate_synthetic
from app.db.models import init_db, list_runs, record_run_end, record_run_start
from app.models.config import EncoderConfig, Protocol, RunConfig
from app.models.reports import AblationRow, RunSummary
from app.utils.logger import bind_run_context, configure_logging, get_logger
from app.utils.run_dir import new_run_id, package_versions, run_lock, write_config_echo, write_run_summary

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_FREEZE = 4

ABLATION_JSON = "ablation.json"
ABLATION_CSV = "ablation.csv"
SIMILARITY_CSV = "similarity.csv"
SIMILARITY_PNG = "similarity.png"
WEIGHTS_EXPORT = "weights.pt"

# variant -> (use_cis, use_bga, use_dhp)
VARIANTS: Dict[str, Tuple[bool, bool, bool]] = {
    "baseline": (False, False, False),
    "cis": (True, False, False),
    "bga": (False, True, False),
    "dhp": (False, False, True),
    "cis+bga": (True, True, False),
    "full": (True, True, True),
}


# Configuration

def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply dotted.key=value overrides to a raw config dict.

    Values are parsed as YAML scalars, so "3" is an int and "[1, 2]" a list.
    """
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override '{item}' is not of the form key=value")
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"override '{key}' descends into a non-mapping at '{part}'")
            node = child
        node[leaf] = yaml.safe_load(raw)
    return data


def load_run_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> RunConfig:
    """
    Build the RunConfig from a YAML file, --set overrides and explicit flags.

    Raises:
        ConfigurationError: unreadable file
        ValidationError: invalid values or unknown keys
    """
    data: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(config_path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"config file {path} is not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    return RunConfig.model_validate(data)


def load_dataset(config: RunConfig) -> ReIDDataset:
    """Dataset named by config.data."""
    source = config.data
    if source.source == "synthetic":
        return generate_synthetic(source.synthetic)
    if source.source == "manifest":
        return load_manifest(source.manifest)
    dataset, report = ingest_directory(source.root, source.layout)
    logger.info("dataset_ingested", samples=report.num_samples, skipped=len(report.skipped))
    return dataset


def label_spaces(dataset: ReIDDataset) -> Tuple[int, int]:
    """Identity and clothing label counts the heads and prompts are sized by."""
    if dataset.train:
        view = dataset.training_view()
        return view.num_identities, view.num_clothes
    return dataset.num_identities, dataset.num_clothes


def resolve_encoder_config(encoder: EncoderConfig, num_identities: int, num_clothes: int) -> EncoderConfig:
    """
    Fill in N_i and N_c from the dataset.

    Raises:
        ConfigurationError: the config sets label counts that disagree with the dataset
    """
    for name, given, found in (
        ("num_identities", encoder.num_identities, num_identities),
        ("num_clothes", encoder.num_clothes, num_clothes),
    ):
        if given is not None and given != found:
            raise ConfigurationError(f"encoder.{name} is {given} but the training data has {found}")
    return encoder.with_label_spaces(num_identities, num_clothes)


def prepare_model(config: RunConfig, dataset: ReIDDataset) -> PromptReIDModel:
    """Build the model for a dataset and load pretrained weights when configured."""
    encoder = resolve_encoder_config(config.encoder, *label_spaces(dataset))
    model = build_model(encoder, config.model, config.seed)
    if config.model.pretrained:
        load_pretrained(model, config.model.pretrained)
    return model


def variant_config(config: RunConfig, variant: str, seed: int) -> RunConfig:
    """Copy of config with the switches of an ablation variant and another seed."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant '{variant}'")
    use_cis, use_bga, use_dhp = VARIANTS[variant]
    model = config.model.model_copy(update={"use_cis": use_cis, "use_bga": use_bga, "use_dhp": use_dhp})
    return config.model_copy(update={"model": model, "seed": seed})


# Run bookkeeping

@dataclass
class RunContext:
    """Run directory, registry id and summary of one command."""

    run_id: str
    run_dir: Path
    summary: RunSummary

    def artifact(self, name: str, path: Path) -> Path:
        try:
            self.summary.artifacts[name] = str(Path(path).relative_to(self.run_dir))
        except ValueError:
            self.summary.artifacts[name] = str(path)
        return path


def _ensure_sqlite_dir(url: str) -> None:
    prefix = "sqlite:///"
    if url.startswith(prefix) and url != prefix + ":memory:":
        Path(url[len(prefix):]).parent.mkdir(parents=True, exist_ok=True)


@contextmanager
def run_context(command: str, config: RunConfig, stage: Optional[str] = None) -> Generator[RunContext, None, None]:
    """
    Own a run directory for one command.

    Locks the directory, echoes the config, registers the run, and on exit
    writes run.json and marks the registry row completed or failed.
    """
    run_id = new_run_id()
    run_dir = Path(config.output_dir) if config.output_dir else settings.output_root_path / f"{command}-{run_id}"
    bind_run_context(run_id, command)
    url = settings.registry_url
    _ensure_sqlite_dir(url)
    init_db(url)

    with run_lock(run_dir, run_id):
        config_echo = config.model_dump(mode="json")
        record_run_start(url, run_id, command, config.seed, str(run_dir), config_echo, stage=stage)
        ctx = RunContext(
            run_id=run_id,
            run_dir=run_dir,
            summary=RunSummary(run_id=run_id, command=command, seed=config.seed, versions=package_versions()),
        )
        ctx.artifact("config", write_config_echo(run_dir, config_echo))
        logger.info("run_started", run_dir=str(run_dir), seed=config.seed)
        try:
            yield ctx
        except Exception as e:
            record_run_end(url, run_id, "failed", error=f"{type(e).__name__}: {e}")
            logger.error("run_failed", error=str(e), error_type=type(e).__name__)
            raise
        write_run_summary(run_dir, ctx.summary.model_dump(mode="json"))
        record_run_end(url, run_id, "completed", metrics=ctx.summary.metrics)
        logger.info("run_completed", metrics=ctx.summary.metrics)


def _print(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


# Commands

def cmd_generate(args: argparse.Namespace, config: RunConfig) -> int:
    """Write the synthetic dataset and its manifest."""
    with run_context("generate", config) as ctx:
        dataset = generate_synthetic(config.data.synthetic)
        out = Path(args.out) if args.out else ctx.run_dir / "dataset"
        manifest = ctx.artifact("manifest", save_dataset(dataset, out))
        counts = {
            "samples": len(dataset),
            "identities": dataset.num_identities,
            "clothes": dataset.num_clothes,
            "train": len(dataset.train),
            "query": len(dataset.query),
            "gallery": len(dataset.gallery),
        }
        _print({**counts, "manifest": str(manifest), "manifest_sha256": file_sha256(manifest)})
    return EXIT_OK


def train_stages(
    config: RunConfig,
    dataset: ReIDDataset,
    run_dir: Path,
    stage: str = "both",
    stage1_checkpoint: Optional[str] = None,
    with_snapshots: bool = True,
) -> Tuple[PromptReIDModel, Dict[str, Path]]:
    """
    Run stage 1, stage 2 or both into run_dir.

    Returns:
        The trained model and the checkpoints written, keyed by stage tag
    """
    view = dataset.training_view()
    model = prepare_model(config, dataset)
    written: Dict[str, Path] = {}
    if stage in ("1", "both"):
        written["stage1"] = run_stage1(view, model, config, run_dir, config.seed)
    if stage in ("2", "both"):
        source = written.get("stage1") or stage1_checkpoint or run_dir / STAGE1_CHECKPOINT
        snapshot = None
        if with_snapshots and config.stage2.eval_period and dataset.query and dataset.gallery:
            snapshot = lambda m: evaluate(m, dataset, config, config.seed).report  # noqa: E731
        written["stage2"] = run_stage2(view, model, source, config, run_dir, config.seed, snapshot)
    return model, written


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    """Train the requested stage(s); --dry-run prints the schedule table only."""
    if args.dry_run:
        rows = schedule_table(config)
        print("stage,epoch,lr")
        for stage, epoch, lr in rows:
            print(f"{stage},{epoch},{lr:.6g}")
        return EXIT_OK

    with run_context("train", config, stage=args.stage) as ctx:
        dataset = load_dataset(config)
        model, written = train_stages(config, dataset, ctx.run_dir, args.stage, args.stage1_checkpoint)
        for tag, path in written.items():
            ctx.artifact(tag, path)
        if "stage2" in written:
            ctx.artifact("weights", save_pretrained(model, ctx.run_dir / WEIGHTS_EXPORT))
        ctx.artifact("trainlog", ctx.run_dir / TRAIN_LOG)
        _print({tag: str(path) for tag, path in written.items()})
    return EXIT_OK


def _model_for(config: RunConfig, dataset: ReIDDataset, checkpoint: Optional[str]) -> PromptReIDModel:
    if checkpoint:
        return restore_model(load_checkpoint(checkpoint))
    logger.warning("evaluating_untrained_model")
    return prepare_model(config, dataset)


def _protocol(args: argparse.Namespace) -> Optional[Protocol]:
    if not getattr(args, "protocol", None):
        return None
    return Protocol(mode=args.protocol, exclude_same_camera=args.cross_camera)


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    """Score retrieval of the query split against the gallery split."""
    with run_context("eval", config) as ctx:
        dataset = load_dataset(config)
        model = _model_for(config, dataset, args.checkpoint)
        result = evaluate(model, dataset, config, config.seed, protocol=_protocol(args), checkpoint=args.checkpoint)
        for path in write_eval_artifacts(result, ctx.run_dir, config.eval.ranking_top_k):
            ctx.artifact(path.stem, path)
        ctx.summary.metrics = result.report.headline()
        _print({"protocol": result.report.protocol.name, "seed": config.seed, **result.report.headline()})
    return EXIT_OK


def cmd_export_similarity(args: argparse.Namespace, config: RunConfig) -> int:
    """Write the cosine-similarity matrix of one split's final features."""
    with run_context("export-similarity", config) as ctx:
        dataset = load_dataset(config)
        model = _model_for(config, dataset, args.checkpoint)
        samples = dataset.samples if args.split == "all" else dataset.split(args.split)
        if not samples:
            raise ConfigurationError(f"split '{args.split}' is empty")
        features = extract_features(model, samples, config, config.seed)
        heatmap = ctx.run_dir / SIMILARITY_PNG if args.heatmap else None
        path = ctx.artifact("similarity", export_similarity_matrix(features.features, ctx.run_dir / SIMILARITY_CSV, heatmap))
        if heatmap is not None:
            ctx.artifact("heatmap", heatmap)
        _print({"similarity": str(path), "size": len(samples)})
    return EXIT_OK


def run_ablation(config: RunConfig, dataset: ReIDDataset, run_dir: Path) -> List[AblationRow]:
    """Train and evaluate every configured variant under every configured seed."""
    rows: List[AblationRow] = []
    for variant in config.ablation.variants:
        for seed in config.ablation.seeds:
            sub_config = variant_config(config, variant, seed)
            sub_dir = run_dir / variant / f"seed{seed}"
            model, _ = train_stages(sub_config, dataset, sub_dir, with_snapshots=False)
            report = evaluate(model, dataset, sub_config, seed).report
            rows.append(AblationRow(variant=variant, seed=seed, rank1=report.rank1, mAP=report.mAP))
            logger.info("ablation_variant_completed", variant=variant, seed=seed, rank1=report.rank1, mAP=report.mAP)
    return rows


def summarize_ablation(rows: Sequence[AblationRow]) -> Dict[str, Dict[str, float]]:
    """Mean rank-1 and mAP per variant."""
    out: Dict[str, Dict[str, float]] = {}
    for variant in dict.fromkeys(r.variant for r in rows):
        picked = [r for r in rows if r.variant == variant]
        out[variant] = {
            "rank1": float(np.mean([r.rank1 for r in picked])),
            "mAP": float(np.mean([r.mAP for r in picked])),
            "runs": float(len(picked)),
        }
    return out


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    """Compare method variants over several seeds."""
    with run_context("ablate", config) as ctx:
        dataset = load_dataset(config)
        rows = run_ablation(config, dataset, ctx.run_dir)
        means = summarize_ablation(rows)
        json_path = ctx.run_dir / ABLATION_JSON
        json_path.write_text(
            json.dumps({"rows": [r.model_dump() for r in rows], "means": means}, indent=2, sort_keys=True)
        )
        csv_path = ctx.run_dir / ABLATION_CSV
        with csv_path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["variant", "seed", "rank1", "mAP"])
            writer.writerows([r.variant, r.seed, f"{r.rank1:.6f}", f"{r.mAP:.6f}"] for r in rows)
        ctx.artifact("ablation_json", json_path)
        ctx.artifact("ablation_csv", csv_path)
        _print(means)
    return EXIT_OK


def cmd_runs(args: argparse.Namespace, config: RunConfig) -> int:
    """Print registered runs, newest first."""
    url = settings.registry_url
    _ensure_sqlite_dir(url)
    init_db(url)
    runs = [
        {
            "id": run.id,
            "command": run.command,
            "status": run.status,
            "stage": run.stage,
            "seed": run.seed,
            "run_dir": run.run_dir,
            "metrics": run.metrics,
            "error": run.error,
            "created_at": run.created_at.isoformat() if run.created_at else None,
            "completed_at": run.completed_at.isoformat() if run.completed_at else None,
        }
        for run in list_runs(url, args.filter_command)
    ]
    _print({"runs": runs})
    return EXIT_OK


# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptreid",
        description="Cloth-changing person re-identification with learned prompts",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set stage2.epochs=5 (repeatable)")
    common.add_argument("--seed", type=int, help="Run seed (overrides the config)")
    common.add_argument("--output-dir", help="Run directory (default: $PROMPTREID_OUTPUT_ROOT/<command>-<run id>)")

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Write the synthetic dataset and manifest")
    gen.add_argument("--out", help="Dataset directory (default: <run dir>/dataset)")
    gen.set_defaults(handler=cmd_generate)

    train = sub.add_parser("train", parents=[common], help="Run training stage 1, 2 or both")
    train.add_argument("--stage", choices=["1", "2", "both"], default="both")
    train.add_argument("--stage1-checkpoint", help="Stage-1 archive for --stage 2 (default: <run dir>/stage1.pt)")
    train.add_argument("--dry-run", action="store_true", help="Validate the config and print the lr schedule")
    train.set_defaults(handler=cmd_train)

    protocols = ["standard", "cloth_changing", "same_clothes"]

    ev = sub.add_parser("eval", parents=[common], help="Evaluate retrieval on query/gallery")
    ev.add_argument("--checkpoint", help="Checkpoint archive (default: untrained model)")
    ev.add_argument("--protocol", choices=protocols, help="Override the configured protocol")
    ev.add_argument("--cross-camera", action="store_true", help="With --protocol, drop same-camera matches")
    ev.set_defaults(handler=cmd_eval)

    sim = sub.add_parser("export-similarity", parents=[common], help="Write the feature similarity matrix")
    sim.add_argument("--checkpoint", help="Checkpoint archive (default: untrained model)")
    sim.add_argument("--split", choices=["train", "query", "gallery", "all"], default="query")
    sim.add_argument("--heatmap", action="store_true", help="Also write a PNG heat map")
    sim.set_defaults(handler=cmd_export_similarity)

    ab = sub.add_parser("ablate", parents=[common], help="Train and evaluate method variants over seeds")
    ab.set_defaults(handler=cmd_ablate)

    runs = sub.add_parser("runs", parents=[common], help="List registered runs")
    runs.add_argument("--command", dest="filter_command", help="Only runs of this command")
    runs.set_defaults(handler=cmd_runs)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    configure_logging(settings.log_level)
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)

    try:
        if settings.device != "cpu":
            raise ConfigurationError(f"device '{settings.device}' is not supported; only cpu runs")
        config = load_run_config(args.config, args.overrides, args.seed, args.output_dir)
        return args.handler(args, config)
    except (ConfigurationError, ValidationError) as e:
        logger.error("configuration_error", error=str(e))
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        logger.error("numeric_failure", error=str(e), layer=e.layer)
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FreezeContractError as e:
        logger.error("freeze_contract_violated", error=str(e), group=e.group)
        print(f"freeze contract violated: {e}", file=sys.stderr)
        return EXIT_FREEZE
    except PromptReIDError as e:
        logger.error("run_error", error=str(e), error_type=type(e).__name__)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
