"""Misclassification mining: collect false positives/negatives with byte
context and rank heavy-hitter patterns into attack seeds."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .binary import CodeImage, LabelMap
from .detectors import Detection
from .errors import BinaryMismatch, PatternLongerThanContext

KINDS = ("FP_S", "FP_E", "FN_S", "FN_E")

ANCHOR_AT_ADDRESS = "at_address"
ANCHOR_BEFORE_ADDRESS = "before_address"
ANCHOR_CENTERED = "centered"
ANCHORS = (ANCHOR_AT_ADDRESS, ANCHOR_BEFORE_ADDRESS, ANCHOR_CENTERED)


@dataclass(frozen=True)
class MisclassRecord:
    binary_id: str
    address: int
    kind: str
    context: bytes  # radius bytes before and after the address
    context_start: int  # address of context[0]
    truncated: bool
    detector_id: str

    def pattern(self, k: int, anchor: str = ANCHOR_AT_ADDRESS) -> bytes | None:
        """The canonical k-byte pattern for this record, or None when the
        (possibly truncated) context cannot supply all k bytes."""
        if anchor == ANCHOR_AT_ADDRESS:
            lo = self.address
        elif anchor == ANCHOR_BEFORE_ADDRESS:
            lo = self.address - k
        elif anchor == ANCHOR_CENTERED:
            lo = self.address - k // 2
        else:
            raise ValueError(f"unknown anchor rule {anchor!r}")
        offset = lo - self.context_start
        if offset < 0 or offset + k > len(self.context):
            return None
        return self.context[offset : offset + k]


@dataclass(frozen=True)
class AttackSeed:
    pattern: bytes
    incidence: int
    rank: int
    kind: str


def collect_misclassifications(
    gt: LabelMap,
    pred: list[Detection],
    image: CodeImage,
    radius: int,
    detector_id: str = "",
) -> list[MisclassRecord]:
    """One record per false positive / false negative, with surrounding bytes.

    Context is 2*radius+1 bytes centered at the misclassified address,
    truncated (and flagged) at section edges.
    """
    if gt.binary_id != image.id:
        raise BinaryMismatch(f"ground truth {gt.binary_id!r} vs image {image.id!r}")
    gt_sets = {"S": gt.start_set, "E": gt.end_set}
    pred_sets: dict[str, set[int]] = {"S": set(), "E": set()}
    for det in pred:
        pred_sets[det.label].add(det.address)

    events: list[tuple[int, str]] = []
    for cls in ("S", "E"):
        for addr in pred_sets[cls] - gt_sets[cls]:
            events.append((addr, f"FP_{cls}"))
        for addr in gt_sets[cls] - pred_sets[cls]:
            events.append((addr, f"FN_{cls}"))
    events.sort()

    records = []
    for addr, kind in events:
        sec = image.section_at(addr)
        if sec is None:
            continue
        lo = max(sec.virtual_address, addr - radius)
        hi = min(sec.end_address, addr + radius)
        context = image.bytes_at(lo, hi - lo + 1)
        records.append(
            MisclassRecord(
                binary_id=gt.binary_id,
                address=addr,
                kind=kind,
                context=context,
                context_start=lo,
                truncated=len(context) != 2 * radius + 1,
                detector_id=detector_id,
            )
        )
    return records


def rank_heavy_hitters(
    records: list[MisclassRecord],
    pattern_length: int,
    anchor: str = ANCHOR_AT_ADDRESS,
) -> list[AttackSeed]:
    """Count distinct (binary, address) occurrences of each canonical pattern
    per misclassification kind and rank them by incidence.

    Ties order lexicographically by pattern bytes, then by kind.
    """
    if not records:
        return []
    radius_bound = max(len(r.context) for r in records)
    if pattern_length > radius_bound:
        raise PatternLongerThanContext(
            f"k={pattern_length} exceeds the longest context ({radius_bound} bytes)"
        )
    occurrences: dict[tuple[bytes, str], set[tuple[str, int]]] = {}
    for rec in records:
        pattern = rec.pattern(pattern_length, anchor)
        if pattern is None:
            continue
        occurrences.setdefault((pattern, rec.kind), set()).add((rec.binary_id, rec.address))

    counted = Counter({key: len(sites) for key, sites in occurrences.items()})
    ordered = sorted(
        counted.items(),
        key=lambda item: (-item[1], item[0][0], KINDS.index(item[0][1])),
    )
    return [
        AttackSeed(pattern=pattern, incidence=count, rank=rank, kind=kind)
        for rank, ((pattern, kind), count) in enumerate(ordered, start=1)
    ]
