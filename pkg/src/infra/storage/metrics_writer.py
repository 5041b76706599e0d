"""JSON Lines streams: training metrics and decision traces."""

from __future__ import annotations

import logging
import threading
from collections.abc import Iterable
from pathlib import Path
from typing import IO, TypeVar

from pydantic import BaseModel

from core.dtos import DecisionRecord, MetricsRecord

logger = logging.getLogger(__name__)

RecordT = TypeVar("RecordT", bound=BaseModel)


class MetricsWriter:
    """
    Single owner of a metrics file; every record is also kept in memory.

    With `path=None` nothing is written to disk, which is what tests use.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[MetricsRecord] = []
        self._lock = threading.Lock()
        self._fh: IO[str] | None = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w", encoding="utf-8")

    def write(self, record: MetricsRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self._fh is not None:
                self._fh.write(record.model_dump_json(exclude_none=True) + "\n")
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_jsonl(path: str | Path, records: Iterable[BaseModel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.model_dump_json() + "\n")
    return path


def read_jsonl(path: str | Path, model: type[RecordT]) -> list[RecordT]:
    with Path(path).open(encoding="utf-8") as fh:
        return [model.model_validate_json(line) for line in fh if line.strip()]


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    return read_jsonl(path, MetricsRecord)


def write_decision_trace(path: str | Path, records: Iterable[DecisionRecord]) -> Path:
    return write_jsonl(path, records)


def read_decision_trace(path: str | Path) -> list[DecisionRecord]:
    return read_jsonl(path, DecisionRecord)
