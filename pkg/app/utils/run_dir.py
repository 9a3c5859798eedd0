"""
Run-directory ownership and reproducibility records.
"""

import json
import os
import platform
import uuid
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path
from typing import Dict, Generator, Union

import yaml

from app.core.errors import RunLockError
from app.utils.logger import get_logger

logger = get_logger(__name__)

LOCK_NAME = ".lock"
CONFIG_ECHO = "config.yaml"
RUN_SUMMARY = "run.json"

TRACKED_PACKAGES = ("torch", "torchvision", "numpy", "einops", "pydantic", "pillow", "structlog", "sqlalchemy", "pyyaml")


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


def package_versions() -> Dict[str, str]:
    """Installed versions of the packages that influence results."""
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


@contextmanager
def run_lock(run_dir: Union[str, Path], run_id: str) -> Generator[Path, None, None]:
    """
    Own run_dir exclusively for the duration of the block.

    Raises:
        RunLockError: another run holds the lock
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        owner = lock.read_text().strip() if lock.exists() else "unknown"
        raise RunLockError(f"{run_dir} is owned by run {owner}") from e
    with os.fdopen(fd, "w") as f:
        f.write(run_id)
    logger.debug("run_dir_locked", run_dir=str(run_dir), run_id=run_id)
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def write_config_echo(run_dir: Union[str, Path], config: dict) -> Path:
    path = Path(run_dir) / CONFIG_ECHO
    path.write_text(yaml.safe_dump(config, sort_keys=True))
    return path


def write_run_summary(run_dir: Union[str, Path], summary: dict) -> Path:
    path = Path(run_dir) / RUN_SUMMARY
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return path
