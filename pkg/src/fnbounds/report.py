"""Report emission: score/summary CSVs, the mean-(sd) summary table, and
precision-recall scatter data for external plotting."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .metrics import ScoreRow, ScoreSummary
from .search import SearchResult

SCORE_HEADER = ("binary", "dataset", "detector", "class", "tp", "fp", "fn",
                "precision", "recall", "f1")
SUMMARY_HEADER = ("dataset", "detector", "n", "precision_mean", "precision_sd",
                  "recall_mean", "recall_sd", "f1_mean", "f1_sd")
TABLE_HEADER = ("dataset", "detector", "precision", "recall", "f1")
SCATTER_HEADER = ("binary", "dataset", "detector", "precision", "recall")
SEARCH_LOG_HEADER = ("candidate_idx", "payload_hex", "mean_f1", "delta_f1",
                     "fp_total", "fn_total")


def format_mean_sd(mean: float, sd: float) -> str:
    """Render a statistic the way the summary tables print it: `0.982 (0.040)`."""
    return f"{mean:.3f} ({sd:.3f})"


def _csv_text(header: tuple[str, ...], rows: list[list], config_hash: str | None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash: {config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_scores_csv(rows: list[ScoreRow], config_hash: str | None = None) -> str:
    data = [
        [r.binary_id, r.dataset, r.detector_id, r.cls, r.tp, r.fp, r.fn,
         f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}"]
        for r in rows
    ]
    return _csv_text(SCORE_HEADER, data, config_hash)


def render_summary_csv(summaries: list[ScoreSummary], config_hash: str | None = None) -> str:
    data = [
        [s.dataset, s.detector_id, s.n_binaries,
         f"{s.precision_mean:.6f}", f"{s.precision_sd:.6f}",
         f"{s.recall_mean:.6f}", f"{s.recall_sd:.6f}",
         f"{s.f1_mean:.6f}", f"{s.f1_sd:.6f}"]
        for s in summaries
    ]
    return _csv_text(SUMMARY_HEADER, data, config_hash)


def render_summary_table(summaries: list[ScoreSummary], config_hash: str | None = None) -> str:
    """Table in the evaluation-summary style: one row per (dataset, detector)
    with `mean (sd)` entries per metric."""
    data = [
        [s.dataset, s.detector_id,
         format_mean_sd(s.precision_mean, s.precision_sd),
         format_mean_sd(s.recall_mean, s.recall_sd),
         format_mean_sd(s.f1_mean, s.f1_sd)]
        for s in summaries
    ]
    return _csv_text(TABLE_HEADER, data, config_hash)


def render_scatter_csv(rows: list[ScoreRow], config_hash: str | None = None) -> str:
    """Per-binary precision/recall points (micro-average rows only)."""
    data = [
        [r.binary_id, r.dataset, r.detector_id, f"{r.precision:.6f}", f"{r.recall:.6f}"]
        for r in rows
        if r.cls == "SE"
    ]
    return _csv_text(SCATTER_HEADER, data, config_hash)


def render_search_log(result: SearchResult, config_hash: str | None = None) -> str:
    data = [
        [row.candidate_idx, row.payload.hex(), f"{row.mean_f1:.6f}",
         f"{row.delta_f1:.6f}", row.fp_total, row.fn_total]
        for row in result.log
    ]
    return _csv_text(SEARCH_LOG_HEADER, data, config_hash)


def render_seeds_csv(seeds, config_hash: str | None = None) -> str:
    data = [[s.rank, s.kind, s.incidence, s.pattern.hex()] for s in seeds]
    return _csv_text(("rank", "kind", "incidence", "pattern_hex"), data, config_hash)


def emit_report(
    score_rows: list[ScoreRow],
    summaries: list[ScoreSummary],
    out_dir: str | Path,
    search_result: SearchResult | None = None,
    config_hash: str | None = None,
) -> dict[str, Path]:
    """Write all report artifacts; returns the paths keyed by artifact name."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {
        "scores": (out_dir / "scores.csv", render_scores_csv(score_rows, config_hash)),
        "summary": (out_dir / "summary.csv", render_summary_csv(summaries, config_hash)),
        "summary_table": (out_dir / "summary_table.csv", render_summary_table(summaries, config_hash)),
        "scatter": (out_dir / "scatter.csv", render_scatter_csv(score_rows, config_hash)),
    }
    if search_result is not None:
        artifacts["search_log"] = (
            out_dir / "search_log.csv", render_search_log(search_result, config_hash)
        )
    paths = {}
    for name, (path, text) in artifacts.items():
        path.write_text(text, encoding="utf-8", newline="")
        paths[name] = path
    return paths
