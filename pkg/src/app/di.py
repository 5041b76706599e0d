from __future__ import annotations

from pathlib import Path

import numpy as np

from app.settings import Settings, get_settings
from core.dtos import ModelConfig
from core.services.bench_service import BenchService
from core.services.pretrain_service import PretrainService
from core.services.retrofit_service import RetrofitService
from infra.paging.page_store import PagedStore
from infra.storage.checkpoint_repo import CheckpointRepo
from infra.storage.metrics_writer import MetricsWriter
from infra.storage.report_writer import ReportWriter

# -----------------------------
# Storage
# -----------------------------


def get_checkpoint_repo(settings: Settings | None = None) -> CheckpointRepo:
    settings = settings or get_settings()
    return CheckpointRepo(settings.checkpoints_dir)


def run_dir(
    run_name: str, out_dir: str | Path | None = None, settings: Settings | None = None
) -> Path:
    """`run.out_dir` when set, else a per-run folder under the reports dir."""
    if out_dir is not None:
        return Path(out_dir)
    return (settings or get_settings()).reports_dir / run_name


def get_report_writer(out_dir: str | Path | None = None, *, run_name: str = "run") -> ReportWriter:
    return ReportWriter(run_dir(run_name, out_dir))


def metrics_path(
    run_name: str,
    command: str,
    settings: Settings | None = None,
    *,
    out_dir: str | Path | None = None,
) -> Path:
    return run_dir(run_name, out_dir, settings) / f"{command}_metrics.jsonl"


def paged_store_for(config: ModelConfig, dtype=np.float64) -> PagedStore:
    return PagedStore(config.head_dim, dtype=dtype, audit=get_settings().debug)


# -----------------------------
# Services
# -----------------------------


def get_pretrain_service(
    metrics: MetricsWriter, checkpoints: CheckpointRepo | None = None
) -> PretrainService:
    return PretrainService(metrics=metrics, checkpoints=checkpoints or get_checkpoint_repo())


def get_retrofit_service(
    metrics: MetricsWriter, checkpoints: CheckpointRepo | None = None
) -> RetrofitService:
    return RetrofitService(metrics=metrics, checkpoints=checkpoints or get_checkpoint_repo())


def get_bench_service(paged: bool = True) -> BenchService:
    return BenchService(new_store=paged_store_for if paged else None)
