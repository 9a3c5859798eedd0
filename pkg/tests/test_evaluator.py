"""
Tests for ranking metrics, evaluation and similarity export.
"""

import csv
import json

import numpy as np
import pytest
from PIL import Image

from app.core.errors import NoValidQueriesError
from app.core.evaluator import (
    CMC_CSV,
    EVAL_REPORT,
    RANKING_CSV,
    average_precision,
    cmc_map,
    distance_matrix,
    evaluate,
    export_similarity_matrix,
    junk_mask,
    write_eval_artifacts,
)
from app.models.config import Protocol
from tests import oracles
from tests.conftest import model_for

CLOTH_CHANGING = Protocol(mode="cloth_changing")
STANDARD = Protocol(mode="standard")


# ----------------------------------------------------------------------------
# Distances and metrics
# ----------------------------------------------------------------------------


class TestDistance:
    def test_identical_and_orthogonal(self):
        dist = distance_matrix(np.array([[1.0, 0.0]]), np.array([[2.0, 0.0], [0.0, 3.0]]))
        assert dist[0, 0] == pytest.approx(0.0)
        assert dist[0, 1] == pytest.approx(1.0)

    def test_matches_loop(self):
        rng = np.random.default_rng(0)
        q, g = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        dist = distance_matrix(q, g)
        for i in range(3):
            for j in range(3):
                assert dist[i, j] == pytest.approx(1.0 - oracles.cosine(q[i].tolist(), g[j].tolist()), abs=1e-12)


class TestMetrics:
    """CMC and mAP."""

    def test_single_query_exact_match(self):
        report = cmc_map(np.array([[0.0, 0.5]]), [0], [0, 1], [0], [1, 2], [0], [1, 1], CLOTH_CHANGING, max_rank=2)
        assert report.cmc == [1.0, 1.0]
        assert report.mAP == 1.0

    def test_average_precision_anchor(self):
        assert average_precision(np.array([True, False, True, False, False])) == pytest.approx(0.8333333, abs=1e-6)
        assert average_precision(np.array([False, False])) == 0.0

    def test_ties_break_by_gallery_index(self):
        dist = np.array([[0.2, 0.2]])
        report = cmc_map(dist, [0], [1, 0], [5], [6, 7], [0], [1, 1], STANDARD, max_rank=2)
        assert report.cmc == [0.0, 1.0]
        assert report.mAP == 0.5

    def test_same_clothes_gallery_is_junk(self):
        dist = np.array([[0.0, 0.1, 0.2]])
        report = cmc_map(dist, [0], [0, 1, 0], [3], [3, 4, 5], [0], [1, 1, 1], CLOTH_CHANGING, max_rank=3)
        assert report.cmc == [0.0, 1.0, 1.0]
        assert report.mAP == 0.5

    def test_dropped_queries_are_counted(self):
        dist = np.zeros((2, 2))
        report = cmc_map(dist, [0, 1], [0, 0], [9, 9], [1, 2], [0, 0], [1, 1], STANDARD, max_rank=2)
        assert report.num_valid_queries == 1
        assert report.num_dropped_queries == 1

    def test_no_valid_queries(self):
        with pytest.raises(NoValidQueriesError) as exc:
            cmc_map(np.zeros((1, 1)), [0], [0], [1], [1], [0], [1], CLOTH_CHANGING, max_rank=1)
        assert exc.value.protocol == "cloth_changing"

    def test_cmc_is_monotone(self):
        rng = np.random.default_rng(3)
        dist = rng.random((6, 12))
        g_labels = rng.integers(0, 3, 12)
        report = cmc_map(dist, [0, 1, 2, 0, 1, 2], g_labels, [9] * 6, list(range(12)), [0] * 6, [1] * 12, STANDARD, 12)
        assert all(a <= b for a, b in zip(report.cmc, report.cmc[1:]))
        assert report.cmc[-1] == 1.0

    def test_junk_mask_protocols(self):
        labels = np.array([0, 0, 0, 1])
        clothes = np.array([1, 2, 2, 3])
        cameras = np.array([0, 1, 0, 0])
        assert junk_mask(0, 1, 0, labels, clothes, cameras, CLOTH_CHANGING).tolist() == [True, False, False, False]
        assert junk_mask(0, 1, 0, labels, clothes, cameras, Protocol(mode="same_clothes")).tolist() == [False, True, True, False]
        cross = Protocol(mode="standard", exclude_same_camera=True)
        assert junk_mask(0, 1, 0, labels, clothes, cameras, cross).tolist() == [True, False, True, False]


class TestAgainstReference:
    """Vectorised metrics agree with a direct per-query reference."""

    def test_random_instances(self):
        rng = np.random.default_rng(42)
        modes = ["standard", "cloth_changing", "same_clothes"]
        for _ in range(100):
            nq, ng = int(rng.integers(1, 6)), int(rng.integers(1, 21))
            # few distinct distances so ties occur
            dist = rng.integers(0, 5, (nq, ng)).astype(np.float64) / 4
            q_labels, g_labels = rng.integers(0, 3, nq), rng.integers(0, 3, ng)
            q_clothes, g_clothes = rng.integers(0, 4, nq), rng.integers(0, 4, ng)
            q_cams, g_cams = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
            protocol = Protocol(mode=modes[int(rng.integers(0, 3))], exclude_same_camera=bool(rng.integers(0, 2)))
            max_rank = 5
            expected = oracles.cmc_map(
                dist.tolist(), q_labels.tolist(), g_labels.tolist(), q_clothes.tolist(), g_clothes.tolist(),
                q_cams.tolist(), g_cams.tolist(), protocol.mode, protocol.exclude_same_camera, max_rank,
            )
            args = (dist, q_labels, g_labels, q_clothes, g_clothes, q_cams, g_cams, protocol, max_rank)
            if expected is None:
                with pytest.raises(NoValidQueriesError):
                    cmc_map(*args)
                continue
            report = cmc_map(*args)
            cmc, m_ap, n_valid = expected
            assert report.cmc == pytest.approx(cmc, abs=1e-12)
            assert report.mAP == pytest.approx(m_ap, abs=1e-12)
            assert report.num_valid_queries == n_valid


# ----------------------------------------------------------------------------
# Similarity export
# ----------------------------------------------------------------------------


class TestSimilarityExport:
    @pytest.fixture
    def features(self) -> np.ndarray:
        feats = np.random.default_rng(1).normal(size=(15, 6))
        feats[7] = feats[2]
        return feats

    def test_csv_contents(self, tmp_path, features):
        path = export_similarity_matrix(features, tmp_path / "similarity.csv")
        sim = np.loadtxt(path, delimiter=",", ndmin=2)
        assert sim.shape == (15, 15)
        assert np.allclose(np.diag(sim), 1.0)
        assert np.allclose(sim, sim.T)
        assert sim[2, 7] == pytest.approx(1.0)
        assert np.allclose(sim[2], sim[7])
        assert np.all(sim <= 1.0 + 1e-9) and np.all(sim >= -1.0 - 1e-9)

    def test_heatmap(self, tmp_path, features):
        png = tmp_path / "similarity.png"
        export_similarity_matrix(features, tmp_path / "similarity.csv", png)
        with Image.open(png) as img:
            assert img.size == (240, 240)
            assert img.getpixel((0, 0)) == 255


# ----------------------------------------------------------------------------
# End-to-end evaluation
# ----------------------------------------------------------------------------


class TestEvaluate:
    def test_report_and_artifacts(self, tmp_path, run_config, synthetic_dataset, training_view):
        model = model_for(run_config, training_view)
        result = evaluate(model, synthetic_dataset, run_config, seed=3, checkpoint="stage2.pt")
        report = result.report
        assert result.distmat.shape == (12, 4)
        assert report.protocol == CLOTH_CHANGING
        assert report.num_valid_queries == 12
        assert report.seed == 3
        assert 0.0 <= report.rank1 <= 1.0
        assert len(report.cmc) == run_config.eval.max_rank
        assert np.allclose(np.linalg.norm(result.query.features, axis=1), 1.0, atol=1e-5)

        paths = write_eval_artifacts(result, tmp_path, top_k=3)
        assert [p.name for p in paths] == [EVAL_REPORT, CMC_CSV, RANKING_CSV]
        saved = json.loads((tmp_path / EVAL_REPORT).read_text())
        assert saved["checkpoint"] == "stage2.pt"
        with (tmp_path / RANKING_CSV).open() as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 12 * 3
        with (tmp_path / CMC_CSV).open() as f:
            assert next(csv.reader(f)) == ["rank", "cmc"]

    def test_same_seed_same_distances(self, run_config, synthetic_dataset, training_view):
        model = model_for(run_config, training_view)
        a = evaluate(model, synthetic_dataset, run_config, seed=3)
        b = evaluate(model, synthetic_dataset, run_config, seed=3)
        assert np.array_equal(a.distmat, b.distmat)
        assert a.report.mAP == b.report.mAP
