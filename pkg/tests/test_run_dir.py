"""
Tests for run-directory locking and reproducibility records.
"""

import json

import pytest
import yaml

from app.core.errors import ConfigurationError, RunLockError
from app.utils.run_dir import (
    CONFIG_ECHO,
    LOCK_NAME,
    RUN_SUMMARY,
    new_run_id,
    package_versions,
    run_lock,
    write_config_echo,
    write_run_summary,
)


class TestRunLock:
    def test_lock_created_and_released(self, tmp_path):
        run_dir = tmp_path / "run"
        with run_lock(run_dir, "abc") as locked:
            assert locked == run_dir
            assert (run_dir / LOCK_NAME).read_text() == "abc"
        assert not (run_dir / LOCK_NAME).exists()

    def test_second_owner_refused(self, tmp_path):
        with run_lock(tmp_path, "first"):
            with pytest.raises(RunLockError, match="owned by run first"):
                with run_lock(tmp_path, "second"):
                    pass

    def test_lock_error_is_a_configuration_error(self):
        assert issubclass(RunLockError, ConfigurationError)

    def test_released_after_exception(self, tmp_path):
        with pytest.raises(ValueError):
            with run_lock(tmp_path, "x"):
                raise ValueError("inside")
        with run_lock(tmp_path, "y"):
            pass


class TestRecords:
    def test_config_echo_round_trips(self, tmp_path):
        path = write_config_echo(tmp_path, {"seed": 3, "stage2": {"epochs": 2}})
        assert path.name == CONFIG_ECHO
        assert yaml.safe_load(path.read_text()) == {"seed": 3, "stage2": {"epochs": 2}}

    def test_summary_is_json(self, tmp_path):
        path = write_run_summary(tmp_path, {"run_id": "r", "metrics": None})
        assert path.name == RUN_SUMMARY
        assert json.loads(path.read_text()) == {"metrics": None, "run_id": "r"}

    def test_versions_cover_python_and_torch(self):
        versions = package_versions()
        assert "python" in versions
        assert "torch" in versions

    def test_run_ids_are_unique(self):
        assert len({new_run_id() for _ in range(50)}) == 50
