"""Unit tests for the JSON Lines metric and decision-trace streams."""

import json

import pytest

from core.dtos import DecisionRecord, MetricsRecord
from core.enums import RetrofitPhase
from infra.storage.metrics_writer import (
    MetricsWriter,
    read_decision_trace,
    read_metrics,
    write_decision_trace,
)

pytestmark = pytest.mark.unit


def test_in_memory_writer_keeps_records():
    writer = MetricsWriter()
    writer.write(MetricsRecord(phase=RetrofitPhase.PRETRAIN, step=1, lm_loss=2.0))
    assert writer.path is None
    assert [r.step for r in writer.records] == [1]


def test_file_writer_streams_one_record_per_line(tmp_path):
    path = tmp_path / "logs" / "metrics.jsonl"
    with MetricsWriter(path) as writer:
        writer.write(MetricsRecord(phase=RetrofitPhase.RAMP, step=0, lm_loss=3.0, target_cr=1.0))
        writer.write(
            MetricsRecord(kind="warning", phase=RetrofitPhase.RAMP, step=1, message="spike")
        )
        # flushed before close
        assert len(path.read_text().splitlines()) == 2
    lines = path.read_text().splitlines()
    assert "cr_loss" not in json.loads(lines[0])
    records = read_metrics(path)
    assert records[0].target_cr == 1.0
    assert records[1].kind == "warning"
    assert records[1].message == "spike"


def test_decision_trace_round_trip(tmp_path):
    records = [
        DecisionRecord(layer=0, head=1, t=t, alpha=t % 2, omega=0.25 * (t + 1)) for t in range(4)
    ]
    path = write_decision_trace(tmp_path / "trace.jsonl", records)
    assert read_decision_trace(path) == records
