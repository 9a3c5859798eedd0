"""
Process settings for PromptReID using pydantic-settings.

Run-specific knobs (model geometry, schedules, protocols) live in the
RunConfig tree in app.models.config; this module only holds what belongs to
the process: where runs go, how loudly to log, which device to use.
"""

from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from PROMPTREID_* environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="PROMPTREID_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )

    log_level: str = "INFO"

    # Default root for run directories when neither the config nor a flag sets one
    output_root: str = "./runs"

    # Run registry; None means a sqlite file under output_root
    database_url: Optional[str] = None

    # Compute
    device: str = "cpu"
    num_threads: Optional[int] = None

    @property
    def output_root_path(self) -> Path:
        """Output root as a Path."""
        return Path(self.output_root)

    @property
    def registry_url(self) -> str:
        """Resolved SQLAlchemy URL of the run registry."""
        if self.database_url:
            return self.database_url
        return f"sqlite:///{self.output_root_path / 'runs.db'}"


# Global settings instance
settings = Settings()
