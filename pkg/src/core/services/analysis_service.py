"""
Compression analysis of a DMC checkpoint from decode-time decision traces.

Every statistic is a ratio of summed token counts to summed kept slots, so the global CR
reconstructed from the per-head matrix equals the one the caches report.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from app.errors import PreconditionError
from core.dmc.inference import DMCCaches
from core.dtos import AnalysisReport, DecisionRecord, SegmentationEntry
from core.model.checkpoint import Checkpoint
from core.model.transformer import TransformerLM
from core.services.corpus_service import detokenize
from core.training.batching import eval_windows

logger = logging.getLogger(__name__)


def curve_lengths(n: int) -> list[int]:
    """Powers of two up to n, plus n itself."""
    lengths = []
    p = 1
    while p <= n:
        lengths.append(p)
        p *= 2
    if not lengths or lengths[-1] != n:
        lengths.append(n)
    return lengths


def global_cr_from_matrix(matrix: np.ndarray, seen_per_head: np.ndarray | int) -> float:
    """Invert per-head ratios back to slot counts: sum(seen) / sum(seen / cr)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    seen = np.broadcast_to(np.asarray(seen_per_head, dtype=np.float64), matrix.shape)
    return float(seen.sum() / (seen / matrix).sum())


def segment_ids(alphas: np.ndarray) -> np.ndarray:
    """Slot index each position lands in: a new segment starts wherever alpha is 0."""
    alphas = np.asarray(alphas, dtype=np.int64)
    return np.cumsum(1 - alphas) - 1


def render_segments(tokens: np.ndarray, ids: np.ndarray) -> str:
    """One bracket pair per slot around the text merged into it, e.g. "[Th][e ][cat]"."""
    parts = []
    for seg in range(int(ids.max()) + 1 if ids.size else 0):
        text = detokenize(tokens[ids == seg])
        parts.append("[" + text.replace("\n", "\\n") + "]")
    return "".join(parts)


@dataclass
class TraceTable:
    """Applied merge decisions as a dense (layer, head, t) array for one sequence."""

    alpha: np.ndarray

    @classmethod
    def from_records(
        cls, records: list[DecisionRecord], n_layers: int, n_heads: int, n: int
    ) -> TraceTable:
        alpha = np.zeros((n_layers, n_heads, n), dtype=np.int64)
        for r in records:
            alpha[r.layer, r.head, r.t] = r.alpha
        return cls(alpha)


@dataclass
class AnalysisRun:
    """The report plus the decision trace of the first window."""

    report: AnalysisReport
    traces: list[DecisionRecord] = field(default_factory=list)


def trace_sequence(
    model: TransformerLM,
    tokens: np.ndarray,
    *,
    window_cap: int | None = None,
    scripted_alpha: np.ndarray | None = None,
) -> tuple[TraceTable, list[DecisionRecord], np.ndarray]:
    """Decode `tokens` with DMC caches; returns the trace and the final per-head slot counts."""
    cfg = model.config
    caches = DMCCaches(
        cfg, window_cap=window_cap, scripted_alpha=scripted_alpha, record_trace=True
    )
    for token in tokens:
        model.decode_token(int(token), caches)
    records = caches.trace or []
    table = TraceTable.from_records(records, cfg.n_layers, cfg.n_heads, len(tokens))
    return table, records, np.asarray(caches.lengths(), dtype=np.int64)


def analyze(
    source: Checkpoint | TransformerLM,
    tokens: np.ndarray,
    *,
    seq_len: int,
    max_windows: int = 8,
    window_cap: int | None = None,
    segmentation_heads: int | None = None,
    scripted_alpha: np.ndarray | None = None,
) -> AnalysisRun:
    """
    Decode up to `max_windows` validation windows and summarize the applied decisions.

    The segmentation section covers the first window for every (layer, head), or only the
    first `segmentation_heads` heads of each layer. `scripted_alpha` (broadcastable to
    (n_layers, n_heads, seq_len)) replaces the model's merge decisions.
    """
    model = source.model() if isinstance(source, Checkpoint) else source
    cfg = model.config
    if not cfg.dmc_enabled:
        raise PreconditionError("analysis needs a DMC checkpoint")
    windows = eval_windows(tokens, seq_len, max_windows)
    inputs = windows[:, :-1]
    n = inputs.shape[1]
    lengths = curve_lengths(n)

    kept = np.zeros((cfg.n_layers, cfg.n_heads), dtype=np.int64)
    # appends among the first L positions, summed over windows, per curve length
    kept_prefix = np.zeros((len(lengths), cfg.n_layers, cfg.n_heads), dtype=np.int64)
    alpha_sum = np.zeros(n, dtype=np.float64)
    traces: list[DecisionRecord] = []
    first: TraceTable | None = None

    for index, window in enumerate(inputs):
        table, records, slots = trace_sequence(
            model, window, window_cap=window_cap, scripted_alpha=scripted_alpha
        )
        kept += slots
        appends = np.cumsum(1 - table.alpha, axis=-1)
        for i, length in enumerate(lengths):
            kept_prefix[i] += appends[..., length - 1]
        alpha_sum += table.alpha.mean(axis=(0, 1))
        if index == 0:
            first, traces = table, records

    n_windows = len(inputs)
    seen = n_windows * n
    matrix = seen / kept
    global_cr = float(seen * cfg.n_layers * cfg.n_heads / kept.sum())
    curve = [
        (length, float(n_windows * length * cfg.n_layers * cfg.n_heads / kept_prefix[i].sum()))
        for i, length in enumerate(lengths)
    ]

    segmentation = []
    if first is not None:
        heads = cfg.n_heads if segmentation_heads is None else min(segmentation_heads, cfg.n_heads)
        for layer in range(cfg.n_layers):
            for head in range(heads):
                ids = segment_ids(first.alpha[layer, head])
                segmentation.append(
                    SegmentationEntry(
                        layer=layer,
                        head=head,
                        segment_ids=ids.tolist(),
                        rendered=render_segments(inputs[0], ids),
                    )
                )

    report = AnalysisReport(
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        cr_matrix=matrix.tolist(),
        global_cr=global_cr,
        cr_vs_length=curve,
        alpha_vs_position=(alpha_sum / n_windows).tolist(),
        segmentation=segmentation,
    )
    logger.info("analysis over %d windows of %d tokens: global CR %.3f", n_windows, n, global_cr)
    return AnalysisRun(report=report, traces=traces)
