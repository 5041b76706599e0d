# src/app/settings.py
from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path
from typing import Any

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Compute project root: repo/ (two levels up from this file: repo/src/app/settings.py)
PROJECT_ROOT = Path(__file__).resolve().parents[2]
DATA_DIR = PROJECT_ROOT / "data"
DEFAULT_CORPUS = DATA_DIR / "sample_corpus.txt"
DEFAULT_REPORTS_DIR = DATA_DIR / "reports"
DEFAULT_CHECKPOINTS_DIR = DATA_DIR / "checkpoints"
CONFIGS_DIR = PROJECT_ROOT / "configs"


class Settings(BaseSettings):
    """
    Process-level configuration (where things live, how loud to log).

    Experiment hyperparameters are not here; they come from the TOML experiment file
    (see `app.config_loader`).

    Sources (highest precedence first):
      1. Environment variables (prefixed with DMC_, e.g. DMC_REPORTS_DIR)
      2. .env file at data/.env
      3. Defaults below
    """

    model_config = SettingsConfigDict(
        env_file=str(DATA_DIR / ".env"),
        env_prefix="DMC_",
        extra="ignore",
    )

    debug: bool = Field(default=False, description="Enable debug logging and ownership audits")
    log_level: str = Field(default="INFO", description="Root log level for the CLI")

    # Paths
    data_dir: Path = Field(default=DATA_DIR, description="Data root")
    corpus_path: Path = Field(default=DEFAULT_CORPUS, description="Default training corpus")
    reports_dir: Path = Field(default=DEFAULT_REPORTS_DIR, description="Reports output directory")
    checkpoints_dir: Path = Field(
        default=DEFAULT_CHECKPOINTS_DIR, description="Checkpoint output directory"
    )

    @field_validator("data_dir", "corpus_path", "reports_dir", "checkpoints_dir", mode="before")
    @classmethod
    def _normalize_pathlike_and_expand(cls, v: Any):
        """Accept str/Path/PathLike; expand ~ and $VARS; let Pydantic coerce to Path."""
        if v is None:
            return v
        if not isinstance(v, str | Path):
            try:
                v = os.fspath(v)
            except TypeError:
                return v  # let Pydantic raise if truly invalid
        return os.path.expandvars(os.path.expanduser(str(v)))

    @field_validator("log_level", mode="before")
    @classmethod
    def _upper_log_level(cls, v: Any):
        return v.strip().upper() if isinstance(v, str) else v

    def ensure_directories(self) -> None:
        """Create the reports and checkpoints dirs (idempotent)."""
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoints_dir.mkdir(parents=True, exist_ok=True)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """
    Singleton-style accessor so imports are cheap and consistent system-wide.
    Also ensures directories exist on first access.
    """
    s = Settings()
    s.ensure_directories()
    return s
