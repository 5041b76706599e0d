"""Plot-ready CSV files and human-readable text for analysis and benchmark reports."""

from __future__ import annotations

import csv
import logging
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from core.dtos import AnalysisReport, BenchRecord, MemoryReport

logger = logging.getLogger(__name__)


def write_csv(rows: Sequence[Mapping[str, Any]], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    return path


def fmt(x: float) -> str:
    return f"{x:.3f}"


# ---------------------------------------------------------------------------
# Text renderings
# ---------------------------------------------------------------------------


def render_analysis(report: AnalysisReport) -> str:
    lines = [f"global compression ratio: {fmt(report.global_cr)}", ""]
    lines.append("compression ratio per layer (rows) and head (columns):")
    for layer, row in enumerate(report.cr_matrix):
        lines.append(f"  L{layer:<3} " + " ".join(f"{x:7.3f}" for x in row))
    lines.append("")
    lines.append("compression ratio by sequence length:")
    for length, cr in report.cr_vs_length:
        lines.append(f"  {length:>6}  {fmt(cr)}")
    lines.append("")
    if report.alpha_vs_position:
        mean = sum(report.alpha_vs_position) / len(report.alpha_vs_position)
        lines.append(
            f"mean merge decision over {len(report.alpha_vs_position)} positions: {fmt(mean)}"
        )
        lines.append("")
    for entry in report.segmentation:
        lines.append(f"segmentation L{entry.layer} H{entry.head}:")
        lines.append(f"  {entry.rendered}")
    return "\n".join(lines) + "\n"


def render_memory(report: MemoryReport) -> str:
    lines = [
        f"page size:            {report.page_size}",
        f"logical slots:        {report.total_logical}",
        f"allocated slots:      {report.total_allocated_slots} ({report.total_pages} pages)",
        f"vanilla equivalent:   {report.vanilla_equivalent}",
        f"compression ratio:    {fmt(report.compression_ratio)}",
        f"page overhead:        {fmt(report.overhead)}",
        f"pool:                 {report.pool_pages} pages, {report.free_pages} free",
    ]
    return "\n".join(lines) + "\n"


def render_bench(record: BenchRecord) -> str:
    lines = [
        f"batch={record.batch} prompt={record.prompt_len} generated={record.gen_len}",
        f"{'method':<12}{'tok/s':>10}{'peak slots':>12}{'peak elems':>12}{'CR':>8}",
    ]
    for run in record.runs:
        lines.append(
            f"{run.method:<12}{run.tokens_per_second:>10.1f}{run.peak_kv_slots:>12}"
            f"{run.peak_kv_elements:>12}{run.measured_cr:>8.3f}"
        )
    for run in record.runs:
        if run.memory is not None:
            lines.append("")
            lines.append(f"[{run.method} paged memory]")
            lines.append(render_memory(run.memory).rstrip())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


class ReportWriter:
    """Writes report bundles into one directory."""

    def __init__(self, out_dir: str | Path) -> None:
        self.out_dir = Path(out_dir)

    def write_analysis(self, report: AnalysisReport) -> list[Path]:
        d = self.out_dir
        paths = [
            write_csv(
                [
                    {"layer": layer, "head": head, "cr": cr}
                    for layer, row in enumerate(report.cr_matrix)
                    for head, cr in enumerate(row)
                ],
                d / "cr_matrix.csv",
            ),
            write_csv(
                [{"length": n, "cr": cr} for n, cr in report.cr_vs_length],
                d / "cr_vs_length.csv",
            ),
            write_csv(
                [{"position": t, "mean_alpha": a} for t, a in enumerate(report.alpha_vs_position)],
                d / "alpha_vs_position.csv",
            ),
            write_csv(
                [
                    {"layer": e.layer, "head": e.head, "position": t, "segment": s}
                    for e in report.segmentation
                    for t, s in enumerate(e.segment_ids)
                ],
                d / "segmentation.csv",
            ),
        ]
        text = d / "analysis.txt"
        text.write_text(render_analysis(report), encoding="utf-8")
        (d / "analysis.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
        paths += [text, d / "analysis.json"]
        logger.info("wrote analysis report to %s", d)
        return paths

    def write_bench(self, record: BenchRecord) -> list[Path]:
        d = self.out_dir
        rows = [
            {
                "method": r.method,
                "tokens_per_second": r.tokens_per_second,
                "peak_kv_slots": r.peak_kv_slots,
                "peak_kv_elements": r.peak_kv_elements,
                "vanilla_kv_slots": r.vanilla_kv_slots,
                "measured_cr": r.measured_cr,
            }
            for r in record.runs
        ]
        csv_path = write_csv(rows, d / "bench.csv")
        text = d / "bench.txt"
        text.write_text(render_bench(record), encoding="utf-8")
        logger.info("wrote bench report to %s", d)
        return [csv_path, text]
