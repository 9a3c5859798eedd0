"""
Retrieval evaluation.

Gallery items are ranked by cosine distance with ties broken by gallery
index. Each protocol marks some same-identity gallery items as junk; junk
items are removed from the ranking before CMC and AP are computed.

    standard        junk: nothing (same camera with exclude_same_camera)
    cloth_changing  junk: same identity and same clothes
    same_clothes    junk: same identity and different clothes
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

from app.core.dhp import retrieval_feature
from app.core.errors import NoValidQueriesError
from app.core.model import PromptReIDModel
from app.data.dataset import ReIDDataset, Sample, collate, iter_chunks
from app.data.transforms import augment
from app.models.config import Protocol, RunConfig, default_protocol
from app.models.reports import EvalReport
from app.utils.logger import get_logger

logger = get_logger(__name__)

EVAL_REPORT = "eval_report.json"
CMC_CSV = "cmc.csv"
RANKING_CSV = "ranking.csv"
HEATMAP_CELL = 16


def distance_matrix(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """
    1 - cosine similarity.

    Args:
        query: [nq, D]
        gallery: [ng, D]

    Returns:
        [nq, ng] float64
    """
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return 1.0 - q @ g.T


def junk_mask(
    q_label: int,
    q_clothes: int,
    q_camera: int,
    g_labels: np.ndarray,
    g_clothes: np.ndarray,
    g_cameras: np.ndarray,
    protocol: Protocol,
) -> np.ndarray:
    """Boolean [ng] of gallery items removed for one query."""
    same_id = g_labels == q_label
    if protocol.mode == "cloth_changing":
        junk = same_id & (g_clothes == q_clothes)
    elif protocol.mode == "same_clothes":
        junk = same_id & (g_clothes != q_clothes)
    else:
        junk = np.zeros_like(same_id)
    if protocol.exclude_same_camera:
        junk |= same_id & (g_cameras == q_camera)
    return junk


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision at the rank of every relevant item; matches is ranked bool."""
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        return 0.0
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def cmc_map(
    distmat: np.ndarray,
    q_labels: Sequence[int],
    g_labels: Sequence[int],
    q_clothes: Sequence[int],
    g_clothes: Sequence[int],
    q_cameras: Sequence[int],
    g_cameras: Sequence[int],
    protocol: Protocol,
    max_rank: int = 50,
) -> EvalReport:
    """
    CMC curve and mAP under a protocol.

    Queries without any relevant gallery item after filtering are dropped
    and counted.

    Raises:
        NoValidQueriesError: every query was dropped
    """
    distmat = np.asarray(distmat)
    q_labels, g_labels = np.asarray(q_labels), np.asarray(g_labels)
    q_clothes, g_clothes = np.asarray(q_clothes), np.asarray(g_clothes)
    q_cameras, g_cameras = np.asarray(q_cameras), np.asarray(g_cameras)

    cmc_sum = np.zeros(max_rank, dtype=np.float64)
    aps: List[float] = []
    dropped = 0
    for i in range(distmat.shape[0]):
        order = np.argsort(distmat[i], kind="stable")
        junk = junk_mask(q_labels[i], q_clothes[i], q_cameras[i], g_labels, g_clothes, g_cameras, protocol)
        kept = order[~junk[order]]
        matches = g_labels[kept] == q_labels[i]
        if not matches.any():
            dropped += 1
            continue
        first = int(np.argmax(matches))
        if first < max_rank:
            cmc_sum[first:] += 1.0
        aps.append(average_precision(matches))

    if not aps:
        raise NoValidQueriesError(protocol.name)
    cmc = cmc_sum / len(aps)
    return EvalReport(
        protocol=protocol,
        cmc=cmc.tolist(),
        mAP=float(np.mean(aps)),
        per_query_ap=aps,
        num_valid_queries=len(aps),
        num_dropped_queries=dropped,
    )


@dataclass
class FeatureSet:
    """Retrieval features and labels of one split."""

    features: np.ndarray
    labels: np.ndarray
    clothes: np.ndarray
    cameras: np.ndarray


def extract_features(
    model: PromptReIDModel,
    samples: Sequence[Sample],
    config: RunConfig,
    seed: int,
    offset: int = 0,
) -> FeatureSet:
    """
    l2-normalised final features of samples.

    Sample i draws its DHP permutation from seed + offset + i.
    """
    size = (config.encoder.image_height, config.encoder.image_width)
    model.eval()
    feats = []
    for start, chunk in iter_chunks(samples, config.eval.batch_size):
        batch = collate([augment(s, train=False, size=size, config=config.augment) for s in chunk])
        seeds = [seed + offset + start + j for j in range(len(chunk))]
        feats.append(retrieval_feature(model.extract_features(batch.images, seeds)))
    features = torch.cat(feats).numpy() if feats else np.zeros((0, model.feature_dim), dtype=np.float32)
    return FeatureSet(
        features=features,
        labels=np.array([s.identity for s in samples], dtype=np.int64),
        clothes=np.array([s.clothing for s in samples], dtype=np.int64),
        cameras=np.array([s.camera for s in samples], dtype=np.int64),
    )


@dataclass
class EvalResult:
    """Report plus the arrays behind it."""

    report: EvalReport
    distmat: np.ndarray
    query: FeatureSet
    gallery: FeatureSet


def evaluate(
    model: PromptReIDModel,
    dataset: ReIDDataset,
    config: RunConfig,
    seed: int,
    protocol: Optional[Protocol] = None,
    checkpoint: Optional[str] = None,
) -> EvalResult:
    """
    Rank the gallery for every query and score the ranking.

    Args:
        model: model to evaluate
        dataset: provides query and gallery splits
        config: run configuration
        seed: run seed for evaluation-time DHP permutations
        protocol: overrides config.eval.protocol and the layout default
        checkpoint: echoed in the report

    Returns:
        EvalResult
    """
    protocol = protocol or config.eval.protocol or default_protocol(dataset.layout)
    query_samples = dataset.query
    query = extract_features(model, query_samples, config, seed)
    gallery = extract_features(model, dataset.gallery, config, seed, offset=len(query_samples))
    distmat = distance_matrix(query.features, gallery.features)
    report = cmc_map(
        distmat,
        query.labels,
        gallery.labels,
        query.clothes,
        gallery.clothes,
        query.cameras,
        gallery.cameras,
        protocol,
        config.eval.max_rank,
    )
    report.seed = seed
    report.checkpoint = checkpoint
    logger.info("evaluation_completed", protocol=protocol.name, **report.headline())
    return EvalResult(report=report, distmat=distmat, query=query, gallery=gallery)


def export_similarity_matrix(
    features: np.ndarray,
    out_path: Union[str, Path],
    heatmap_path: Optional[Union[str, Path]] = None,
) -> Path:
    """
    Write the n x n cosine-similarity matrix as CSV, optionally as a PNG heat map.

    Returns:
        Path of the CSV
    """
    sim = 1.0 - distance_matrix(features, features)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out_path, sim, delimiter=",", fmt="%.10f")
    if heatmap_path is not None:
        # -1 -> black, 1 -> white
        gray = np.clip((sim + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
        img = Image.fromarray(gray).resize(
            (gray.shape[1] * HEATMAP_CELL, gray.shape[0] * HEATMAP_CELL), Image.Resampling.NEAREST
        )
        img.save(heatmap_path)
    logger.info("similarity_matrix_exported", path=str(out_path), size=int(sim.shape[0]))
    return out_path


def export_rankings(result: EvalResult, protocol: Protocol, out_path: Union[str, Path], top_k: int = 10) -> Path:
    """
    Top-k gallery entries per query after protocol filtering.

    Columns: query, rank, gallery, distance, match.
    """
    out_path = Path(out_path)
    with out_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["query", "rank", "gallery", "distance", "match"])
        q, g = result.query, result.gallery
        for i, row in enumerate(result.distmat):
            order = np.argsort(row, kind="stable")
            junk = junk_mask(q.labels[i], q.clothes[i], q.cameras[i], g.labels, g.clothes, g.cameras, protocol)
            for rank, j in enumerate(order[~junk[order]][:top_k], start=1):
                writer.writerow([i, rank, int(j), f"{row[j]:.8f}", int(g.labels[j] == q.labels[i])])
    return out_path


def write_eval_artifacts(result: EvalResult, out_dir: Union[str, Path], top_k: int = 10) -> List[Path]:
    """Write eval_report.json, cmc.csv and ranking.csv into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / EVAL_REPORT
    report_path.write_text(result.report.model_dump_json(indent=2))
    cmc_path = out_dir / CMC_CSV
    with cmc_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "cmc"])
        writer.writerows([k, f"{v:.8f}"] for k, v in enumerate(result.report.cmc, start=1))
    ranking_path = export_rankings(result, result.report.protocol, out_dir / RANKING_CSV, top_k)
    return [report_path, cmc_path, ranking_path]
