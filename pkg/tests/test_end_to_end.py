"""
Desk-scale runs: full two-stage training on the synthetic dataset.

These train ten models and take minutes; run them with `pytest -m slow`.
"""

from pathlib import Path

import pytest

from app.core.evaluator import evaluate
from app.main import load_dataset, load_run_config, prepare_model, run_ablation, summarize_ablation

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk_config():
    return load_run_config(str(DESK_CONFIG))


@pytest.fixture(scope="module")
def desk_dataset(desk_config):
    return load_dataset(desk_config)


@pytest.fixture(scope="module")
def ablation_rows(desk_config, desk_dataset, tmp_path_factory):
    return run_ablation(desk_config, desk_dataset, tmp_path_factory.mktemp("ablation"))


def test_untrained_model_is_near_chance(desk_config, desk_dataset):
    model = prepare_model(desk_config, desk_dataset)
    report = evaluate(model, desk_dataset, desk_config, desk_config.seed).report
    assert report.num_valid_queries == 40
    assert report.rank1 <= 0.2


def test_full_method_learns_in_most_seeds(ablation_rows):
    full = [r for r in ablation_rows if r.variant == "full"]
    assert len(full) == 5
    assert sum(r.rank1 >= 0.5 for r in full) >= 4


def test_full_method_at_least_matches_baseline(ablation_rows):
    by_seed = {}
    for r in ablation_rows:
        by_seed.setdefault(r.seed, {})[r.variant] = r.rank1
    assert sum(v["full"] >= v["baseline"] for v in by_seed.values()) >= 3
    means = summarize_ablation(ablation_rows)
    assert means["full"]["runs"] == 5.0
