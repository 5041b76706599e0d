"""Random training windows and fixed evaluation windows over a token stream."""

from __future__ import annotations

import numpy as np

from app.errors import DataError


def _check_length(tokens: np.ndarray, seq_len: int) -> None:
    if len(tokens) < seq_len + 1:
        raise DataError(
            f"split holds {len(tokens)} tokens, need at least {seq_len + 1} for one window"
        )


class BatchSampler:
    """Windows of seq_len + 1 tokens at uniformly random offsets from a seeded stream."""

    def __init__(
        self, tokens: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator
    ) -> None:
        self.tokens = np.asarray(tokens, dtype=np.int64)
        _check_length(self.tokens, seq_len)
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.rng = rng

    def sample(self) -> np.ndarray:
        starts = self.rng.integers(0, len(self.tokens) - self.seq_len, size=self.batch_size)
        return np.stack([self.tokens[s : s + self.seq_len + 1] for s in starts])


def eval_windows(tokens: np.ndarray, seq_len: int, max_windows: int | None = None) -> np.ndarray:
    """Consecutive non-overlapping windows of seq_len + 1 tokens from the start of the split."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_length(tokens, seq_len)
    count = (len(tokens) - 1) // seq_len
    if max_windows is not None:
        count = min(count, max_windows)
    return np.stack([tokens[i * seq_len : i * seq_len + seq_len + 1] for i in range(count)])


def eval_batches(
    tokens: np.ndarray, batch_size: int, seq_len: int, n_batches: int
) -> list[np.ndarray]:
    windows = eval_windows(tokens, seq_len, batch_size * n_batches)
    return [windows[i : i + batch_size] for i in range(0, len(windows), batch_size)]
