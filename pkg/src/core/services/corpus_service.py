"""Byte-level corpus ingestion: UTF-8 text in, a token stream over a 256-symbol vocabulary out."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.errors import IngestionError

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256


@dataclass(frozen=True)
class Corpus:
    train: np.ndarray
    validation: np.ndarray
    sources: tuple[Path, ...] = ()

    @property
    def n_tokens(self) -> int:
        return len(self.train) + len(self.validation)

    def split(self, name: str) -> np.ndarray:
        if name in ("train", "training"):
            return self.train
        if name in ("val", "valid", "validation"):
            return self.validation
        raise IngestionError(f"unknown split {name!r}", details={"known": ["train", "validation"]})


def tokenize(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> str:
    """Inverse of `tokenize`; byte runs that are not valid UTF-8 decode as U+FFFD."""
    data = np.asarray(tokens, dtype=np.int64)
    if data.size and (data.min() < 0 or data.max() >= BYTE_VOCAB):
        raise IngestionError("token ids must be byte values in [0, 256)")
    return data.astype(np.uint8).tobytes().decode("utf-8", errors="replace")


def _source_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.rglob("*.txt") if p.is_file())
        if not files:
            raise IngestionError(f"no .txt files under {path}")
        return files
    if not path.is_file():
        raise IngestionError(f"corpus not found: {path}")
    return [path]


def split_tokens(tokens: np.ndarray, train_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Head of the stream for training, tail for validation; both sides get at least one token."""
    if not 0.0 < train_fraction < 1.0:
        raise IngestionError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(tokens) < 2:
        raise IngestionError("corpus needs at least two tokens to form both splits")
    cut = min(max(int(len(tokens) * train_fraction), 1), len(tokens) - 1)
    return tokens[:cut], tokens[cut:]


def ingest_corpus(path: str | Path, train_fraction: float = 0.9) -> Corpus:
    """
    Read UTF-8 text from a file (or every `*.txt` under a directory, in sorted order) and
    split the byte stream into train/validation.
    """
    path = Path(path)
    files = _source_files(path)
    chunks = []
    for f in files:
        try:
            raw = f.read_bytes()
            raw.decode("utf-8")
        except OSError as e:
            raise IngestionError(f"cannot read {f}: {e}") from e
        except UnicodeDecodeError as e:
            raise IngestionError(f"{f} is not valid UTF-8", details={"offset": e.start}) from e
        chunks.append(np.frombuffer(raw, dtype=np.uint8))
    tokens = np.concatenate(chunks).astype(np.int64) if chunks else np.empty(0, dtype=np.int64)
    if tokens.size == 0:
        raise IngestionError(f"corpus at {path} is empty")
    train, validation = split_tokens(tokens, train_fraction)
    logger.info(
        "ingested %d tokens from %d file(s): %d train / %d validation",
        tokens.size,
        len(files),
        train.size,
        validation.size,
    )
    return Corpus(train=train, validation=validation, sources=tuple(files))
