from core.model.checkpoint import Checkpoint, snapshot
from infra.storage.checkpoint_repo import CheckpointRepo, checkpoint_load, checkpoint_save
from infra.storage.metrics_writer import MetricsWriter, read_metrics, write_decision_trace
from infra.storage.report_writer import ReportWriter

__all__ = [
    "Checkpoint",
    "CheckpointRepo",
    "MetricsWriter",
    "ReportWriter",
    "checkpoint_load",
    "checkpoint_save",
    "read_metrics",
    "snapshot",
    "write_decision_trace",
]
