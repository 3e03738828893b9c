"""Scoring: confusion counts against ground truth, precision/recall/F1,
and per-group mean/SD summaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

from .binary import LabelMap
from .detectors import Detection
from .errors import BinaryMismatch, JoinFailure

CLASSES = ("S", "E")


@dataclass(frozen=True)
class ConfusionCounts:
    binary_id: str
    detector_id: str
    classes: tuple[str, ...]
    tp: dict[str, int]
    fp: dict[str, int]
    fn: dict[str, int]

    def totals(self) -> tuple[int, int, int]:
        return (
            sum(self.tp[c] for c in self.classes),
            sum(self.fp[c] for c in self.classes),
            sum(self.fn[c] for c in self.classes),
        )


def confusion(
    gt: LabelMap,
    pred: list[Detection],
    classes: tuple[str, ...] = CLASSES,
    *,
    detector_id: str = "",
    binary_id: str | None = None,
    tolerance: int = 0,
) -> ConfusionCounts:
    """Exact-address confusion counts per class.

    A predicted S at a ground-truth E address is one FP(S) plus one FN(E);
    duplicate predictions at one address collapse. `tolerance` widens matching
    to +/- that many bytes for external-detector comparisons only; it defaults
    to 0 and acceptance runs never set it.
    """
    if binary_id is not None and binary_id != gt.binary_id:
        raise BinaryMismatch(f"ground truth is for {gt.binary_id!r}, predictions for {binary_id!r}")
    gt_sets = {"S": set(gt.starts), "E": set(gt.ends)}
    pred_sets: dict[str, set[int]] = {c: set() for c in CLASSES}
    for det in pred:
        pred_sets[det.label].add(det.address)

    tp: dict[str, int] = {}
    fp: dict[str, int] = {}
    fn: dict[str, int] = {}
    for cls in classes:
        truth, guess = gt_sets[cls], pred_sets[cls]
        if tolerance <= 0:
            hits = truth & guess
            tp[cls] = len(hits)
            fp[cls] = len(guess - hits)
            fn[cls] = len(truth - hits)
        else:
            matched_truth: set[int] = set()
            matched_pred: set[int] = set()
            for p in sorted(guess):
                best = None
                for t in sorted(truth - matched_truth):
                    if abs(t - p) <= tolerance and (best is None or abs(t - p) < abs(best - p)):
                        best = t
                if best is not None:
                    matched_truth.add(best)
                    matched_pred.add(p)
            tp[cls] = len(matched_pred)
            fp[cls] = len(guess) - len(matched_pred)
            fn[cls] = len(truth) - len(matched_truth)
    return ConfusionCounts(
        binary_id=gt.binary_id,
        detector_id=detector_id,
        classes=tuple(classes),
        tp=tp,
        fp=fp,
        fn=fn,
    )


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 with zero-denominator conventions mapping to 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def prf1_of(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Micro-averaged P/R/F1 over the counted classes."""
    return prf1(*counts.totals())


@dataclass(frozen=True)
class ScoreRow:
    """One per-binary score line (`class` is S, E, or SE for the micro average)."""

    binary_id: str
    dataset: str
    detector_id: str
    cls: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def score_rows(
    counts: ConfusionCounts, dataset: str, starts_only: bool = False
) -> list[ScoreRow]:
    """Expand confusion counts to per-class rows plus the micro-average row."""
    rows = []
    wanted = ("S",) if starts_only else counts.classes
    for cls in wanted:
        p, r, f = prf1(counts.tp[cls], counts.fp[cls], counts.fn[cls])
        rows.append(
            ScoreRow(
                counts.binary_id, dataset, counts.detector_id, cls,
                counts.tp[cls], counts.fp[cls], counts.fn[cls], p, r, f,
            )
        )
    if not starts_only:
        tp, fp, fn = counts.totals()
        p, r, f = prf1(tp, fp, fn)
        rows.append(
            ScoreRow(counts.binary_id, dataset, counts.detector_id, "SE", tp, fp, fn, p, r, f)
        )
    return rows


@dataclass(frozen=True)
class ScoreSummary:
    dataset: str
    detector_id: str
    n_binaries: int
    precision_mean: float
    precision_sd: float
    recall_mean: float
    recall_sd: float
    f1_mean: float
    f1_sd: float


def _mean_sd(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n  # population SD
    return mean, sqrt(var)


def aggregate(
    rows: list[ScoreRow],
    manifest_keys: set[tuple[str, str]] | None = None,
    cls: str = "SE",
) -> list[ScoreSummary]:
    """Group per-binary rows of one class by (dataset, detector) and summarize.

    `manifest_keys` is the set of valid (binary_id, dataset) pairs; rows that
    do not join raise JoinFailure.
    """
    groups: dict[tuple[str, str], list[ScoreRow]] = {}
    for row in rows:
        if row.cls != cls:
            continue
        if manifest_keys is not None and (row.binary_id, row.dataset) not in manifest_keys:
            raise JoinFailure(f"score row {row.binary_id!r}/{row.dataset!r} has no manifest entry")
        groups.setdefault((row.dataset, row.detector_id), []).append(row)

    summaries = []
    for (dataset, detector_id), members in sorted(groups.items()):
        pm, ps = _mean_sd([m.precision for m in members])
        rm, rs = _mean_sd([m.recall for m in members])
        fm, fs = _mean_sd([m.f1 for m in members])
        summaries.append(
            ScoreSummary(dataset, detector_id, len(members), pm, ps, rm, rs, fm, fs)
        )
    return summaries
