"""Black-box adversarial search: candidate payload generation, corpus-wide
injection and scoring, ranked results, attack validation, and adversarial
retraining."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .binary import CodeImage, LabelMap
from .detectors import Detection, TrainConfig, WindowClassifierModel, train_window_classifier
from .errors import (
    IncompatibleGuard,
    NoUsablePads,
    PayloadTooLarge,
    TargetWithoutPad,
)
from .metrics import confusion, prf1_of
from .rewriter import (
    MODE_VERBATIM,
    MODES,
    InjectionPlan,
    PadRegion,
    apply_injections,
    plan_injection,
    scan_pads,
)
from .x86 import is_single_valid_instruction

OBJECTIVE_MIN_F1 = "min_f1"
OBJECTIVE_MAX_FP = "max_fp_count"
OBJECTIVES = (OBJECTIVE_MIN_F1, OBJECTIVE_MAX_FP)

TARGET_KINDS = ("induce_FN", "induce_FP")


def random_payloads(
    k: int,
    n: int,
    rng_seed: int,
    require_valid_instruction: bool = False,
) -> list[bytes]:
    """`n` distinct uniformly drawn k-byte sequences, deterministic per seed.

    With the validity filter on, only sequences decoding as one complete
    instruction of length k are kept.
    """
    if k < 1 or n < 1:
        raise ValueError("need k >= 1 and n >= 1")
    if not require_valid_instruction and n > 256 ** min(k, 8):
        raise ValueError(f"cannot draw {n} distinct sequences of {k} bytes")
    rng = random.Random(rng_seed)
    seen: set[bytes] = set()
    out: list[bytes] = []
    attempts = 0
    limit = max(1_000_000, 10_000 * n)
    while len(out) < n:
        attempts += 1
        if attempts > limit:
            raise ValueError(
                f"exhausted {limit} draws finding {n} distinct"
                f"{' valid-instruction' if require_valid_instruction else ''} payloads"
            )
        candidate = bytes(rng.randrange(256) for _ in range(k))
        if candidate in seen:
            continue
        seen.add(candidate)
        if require_valid_instruction and not is_single_valid_instruction(candidate):
            continue
        out.append(candidate)
    return out


@dataclass
class CorpusBundle:
    """Loaded corpus: (image, label map) pairs plus cached pad scans."""

    pairs: list[tuple[CodeImage, LabelMap]]
    _pads: dict[str, list[PadRegion]] = field(default_factory=dict, repr=False)

    def pads_for(self, image: CodeImage, gt: LabelMap) -> list[PadRegion]:
        if image.id not in self._pads:
            self._pads[image.id] = scan_pads(image, gt)
        return self._pads[image.id]

    def binary_ids(self) -> list[str]:
        return [image.id for image, _ in self.pairs]


@dataclass(frozen=True)
class BinaryScore:
    binary_id: str
    precision: float
    recall: float
    f1: float
    fp: int
    fn: int


@dataclass(frozen=True)
class PayloadEvaluation:
    payload: bytes
    mode: str
    per_binary: tuple[BinaryScore, ...]
    deltas: tuple[float, ...]  # per-binary F1 minus the NOP baseline F1

    @property
    def mean_f1(self) -> float:
        return sum(s.f1 for s in self.per_binary) / len(self.per_binary)

    @property
    def fp_total(self) -> int:
        return sum(s.fp for s in self.per_binary)

    @property
    def fn_total(self) -> int:
        return sum(s.fn for s in self.per_binary)


def _score_detections(
    gt: LabelMap, detections: list[Detection], binary_id: str
) -> BinaryScore:
    counts = confusion(gt, detections)
    precision, recall, f1 = prf1_of(counts)
    _, fp, fn = counts.totals()
    return BinaryScore(binary_id, precision, recall, f1, fp, fn)


def baseline_scores(detector, bundle: CorpusBundle) -> tuple[BinaryScore, ...]:
    """Detector scores on the unmutated corpus (pads left as NOPs)."""
    return tuple(
        _score_detections(gt, detector.detect(image), image.id)
        for image, gt in bundle.pairs
    )


def usable_plans(
    pads: list[PadRegion], payload: bytes, mode: str
) -> list[InjectionPlan]:
    plans = []
    for pad in pads:
        try:
            plans.append(plan_injection(pad, payload, mode))
        except (PayloadTooLarge, IncompatibleGuard):
            continue
    return plans


def evaluate_payload(
    detector,
    bundle: CorpusBundle,
    payload: bytes,
    mode: str = MODE_VERBATIM,
    baseline: tuple[BinaryScore, ...] | None = None,
) -> PayloadEvaluation:
    """Inject `payload` into every usable pad of every corpus binary (the
    same sequence everywhere), re-run inference, and score against the
    unchanged ground truth."""
    if mode not in MODES:
        raise ValueError(f"unknown injection mode {mode!r}")
    if baseline is None:
        baseline = baseline_scores(detector, bundle)
    scores: list[BinaryScore] = []
    any_usable = False
    for image, gt in bundle.pairs:
        plans = usable_plans(bundle.pads_for(image, gt), payload, mode)
        if plans:
            any_usable = True
            mutated = apply_injections(image, plans)
        else:
            mutated = image
        scores.append(_score_detections(gt, detector.detect(mutated), image.id))
    if not any_usable:
        raise NoUsablePads(f"no pad in the corpus admits a {len(payload)}-byte {mode} payload")
    deltas = tuple(s.f1 - b.f1 for s, b in zip(scores, baseline))
    return PayloadEvaluation(payload=payload, mode=mode, per_binary=tuple(scores), deltas=deltas)


@dataclass(frozen=True)
class SearchConfig:
    payload_length: int = 4
    budget: int = 64
    seeds: tuple[bytes, ...] = ()
    mode: str = MODE_VERBATIM
    target_kind: str = "induce_FN"
    rng_seed: int = 1
    objective: str = OBJECTIVE_MIN_F1
    require_valid_instruction: bool = False

    def __post_init__(self):
        if self.payload_length < 1:
            raise ValueError("payload_length must be >= 1")
        if self.budget < max(1, len(self.seeds)):
            raise ValueError("budget must cover at least the seed list")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.target_kind!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown injection mode {self.mode!r}")


@dataclass(frozen=True)
class SearchLogRow:
    candidate_idx: int
    payload: bytes
    mean_f1: float
    delta_f1: float
    fp_total: int
    fn_total: int


@dataclass(frozen=True)
class SearchResult:
    config: SearchConfig
    baseline: tuple[BinaryScore, ...]
    evaluations: tuple[PayloadEvaluation, ...]
    log: tuple[SearchLogRow, ...]

    @property
    def baseline_mean_f1(self) -> float:
        return sum(s.f1 for s in self.baseline) / len(self.baseline)

    def ranked(self) -> list[tuple[bytes, float, PayloadEvaluation]]:
        """Candidates ordered by the objective (best first)."""
        if self.config.objective == OBJECTIVE_MIN_F1:
            keyed = sorted(
                self.evaluations, key=lambda ev: (ev.mean_f1, ev.payload)
            )
            return [(ev.payload, ev.mean_f1, ev) for ev in keyed]
        keyed = sorted(
            self.evaluations, key=lambda ev: (-ev.fp_total, ev.payload)
        )
        return [(ev.payload, float(ev.fp_total), ev) for ev in keyed]

    @property
    def best(self) -> PayloadEvaluation:
        return self.ranked()[0][2]


def attack_search(detector, bundle: CorpusBundle, config: SearchConfig) -> SearchResult:
    """Evaluate seed payloads first, then uniformly random candidates up to
    the budget; rank by the configured objective. Deterministic per rng_seed."""
    candidates: list[bytes] = [bytes(s) for s in config.seeds]
    seen = set(candidates)
    if len(candidates) < config.budget:
        fresh = random_payloads(
            config.payload_length,
            config.budget,
            config.rng_seed,
            config.require_valid_instruction,
        )
        for payload in fresh:
            if len(candidates) >= config.budget:
                break
            if payload not in seen:
                seen.add(payload)
                candidates.append(payload)

    baseline = baseline_scores(detector, bundle)
    baseline_f1 = sum(s.f1 for s in baseline) / len(baseline)
    evaluations: list[PayloadEvaluation] = []
    log: list[SearchLogRow] = []
    for idx, payload in enumerate(candidates):
        evaluation = evaluate_payload(detector, bundle, payload, config.mode, baseline)
        evaluations.append(evaluation)
        log.append(
            SearchLogRow(
                candidate_idx=idx,
                payload=payload,
                mean_f1=evaluation.mean_f1,
                delta_f1=evaluation.mean_f1 - baseline_f1,
                fp_total=evaluation.fp_total,
                fn_total=evaluation.fn_total,
            )
        )
    return SearchResult(
        config=config,
        baseline=baseline,
        evaluations=tuple(evaluations),
        log=tuple(log),
    )


# ---------------------------------------------------------------------------
# Attack validation round
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FunctionTarget:
    binary_id: str
    start: int


@dataclass(frozen=True)
class TargetOutcome:
    payload: bytes
    binary_id: str
    start: int
    intended: str
    confirmed: bool
    detail: str


@dataclass(frozen=True)
class BinaryRecovery:
    binary_id: str
    recovered: int
    total: int

    def format(self) -> str:
        return f"recovered {self.recovered} of {self.total} functions"


@dataclass(frozen=True)
class ValidationReport:
    outcomes: tuple[TargetOutcome, ...]
    recoveries: tuple[BinaryRecovery, ...]

    @property
    def confirmed(self) -> int:
        return sum(1 for o in self.outcomes if o.confirmed)


def select_targets(bundle: CorpusBundle, policy: str = "all", limit: int = 0) -> list[FunctionTarget]:
    """Explicit target-selection policies: every function, or the first
    `limit` functions per binary."""
    targets = []
    for image, gt in bundle.pairs:
        starts = gt.starts if policy == "all" or limit <= 0 else gt.starts[:limit]
        targets.extend(FunctionTarget(image.id, s) for s in starts)
    return targets


def _function_pads(
    pads: list[PadRegion], gt: LabelMap, start: int
) -> list[PadRegion]:
    index = gt.starts.index(start)
    end = gt.ends[index]
    mine = []
    for pad in pads:
        if pad.position == "epilogue_pad" and pad.address == end + 1:
            mine.append(pad)
        elif pad.position == "entry_pad" and pad.end == start:
            mine.append(pad)
    return mine


def validate_attack(
    detector,
    bundle: CorpusBundle,
    payloads: list[bytes],
    targets: list[FunctionTarget],
    mode: str = MODE_VERBATIM,
    target_kind: str = "induce_FN",
) -> ValidationReport:
    """Re-inject only into the targeted functions' pads and confirm per target
    that the intended misclassification occurred."""
    by_binary: dict[str, list[FunctionTarget]] = {}
    for target in targets:
        by_binary.setdefault(target.binary_id, []).append(target)

    outcomes: list[TargetOutcome] = []
    recoveries: list[BinaryRecovery] = []
    for image, gt in bundle.pairs:
        mine = by_binary.get(image.id, [])
        if not mine:
            continue
        pads = bundle.pads_for(image, gt)
        before = detector.detect(image)
        before_s = {d.address for d in before if d.label == "S"}
        before_e = {d.address for d in before if d.label == "E"}
        for payload in payloads:
            plans: list[InjectionPlan] = []
            pad_ranges: dict[int, list[PadRegion]] = {}
            for target in mine:
                if target.start not in gt.start_set:
                    raise ValueError(f"target {target.start:#x} is not a function start")
                target_pads = _function_pads(pads, gt, target.start)
                usable = usable_plans(target_pads, payload, mode)
                if not usable:
                    raise TargetWithoutPad(
                        f"{image.id}: function at {target.start:#x} has no usable pad"
                    )
                plans.extend(usable)
                pad_ranges[target.start] = [plan.pad for plan in usable]
            mutated = apply_injections(image, plans)
            after = detector.detect(mutated)
            after_s = {d.address for d in after if d.label == "S"}
            after_e = {d.address for d in after if d.label == "E"}
            for target in mine:
                index = gt.starts.index(target.start)
                end = gt.ends[index]
                if target_kind == "induce_FN":
                    was = [
                        addr
                        for addr, pre in ((target.start, before_s), (end, before_e))
                        if addr in pre
                    ]
                    now_gone = [
                        addr
                        for addr in was
                        if (addr == target.start and addr not in after_s)
                        or (addr == end and addr not in after_e)
                    ]
                    confirmed = bool(was) and bool(now_gone)
                    detail = (
                        f"boundaries {'/'.join(hex(a) for a in now_gone)} suppressed"
                        if confirmed
                        else "boundary still detected"
                        if was
                        else "boundary undetected pre-injection"
                    )
                else:
                    hits = [
                        addr
                        for addr in after_s | after_e
                        if any(
                            pad.address <= addr < pad.end
                            for pad in pad_ranges[target.start]
                        )
                        and addr not in before_s | before_e
                    ]
                    confirmed = bool(hits)
                    detail = (
                        f"new detections at {'/'.join(hex(a) for a in sorted(hits))}"
                        if confirmed
                        else "no new detection in the pad"
                    )
                outcomes.append(
                    TargetOutcome(
                        payload=payload,
                        binary_id=image.id,
                        start=target.start,
                        intended=target_kind,
                        confirmed=confirmed,
                        detail=detail,
                    )
                )
            recovered = sum(1 for s in gt.starts if s in after_s)
            recoveries.append(BinaryRecovery(image.id, recovered, len(gt.starts)))
    return ValidationReport(outcomes=tuple(outcomes), recoveries=tuple(recoveries))


# ---------------------------------------------------------------------------
# Adversarial retraining
# ---------------------------------------------------------------------------

def mean_f1(detector, pairs: list[tuple[CodeImage, LabelMap]]) -> float:
    scores = [
        _score_detections(gt, detector.detect(image), image.id).f1 for image, gt in pairs
    ]
    return sum(scores) / len(scores)


def build_attack_corpus(
    bundle: CorpusBundle, payload: bytes, mode: str = MODE_VERBATIM
) -> list[tuple[CodeImage, LabelMap]]:
    """Corpus with `payload` injected into every usable pad; ground truth is
    carried over unchanged (injection never moves true boundaries)."""
    mutated_pairs = []
    for image, gt in bundle.pairs:
        plans = usable_plans(bundle.pads_for(image, gt), payload, mode)
        mutated = apply_injections(image, plans) if plans else image
        mutated_pairs.append((mutated, gt))
    return mutated_pairs


@dataclass(frozen=True)
class RetrainReport:
    attack_f1_before: float
    attack_f1_after: float
    holdout_f1_before: float | None
    holdout_f1_after: float | None
    clean_f1_before: float
    clean_f1_after: float


def adversarial_retrain(
    model: WindowClassifierModel,
    clean_pairs: list[tuple[CodeImage, LabelMap]],
    attack_pairs: list[tuple[CodeImage, LabelMap]],
    hyper: TrainConfig,
    seed: int = 0,
    holdout_pairs: list[tuple[CodeImage, LabelMap]] | None = None,
) -> tuple[WindowClassifierModel, RetrainReport]:
    """Continue training on clean plus attack corpora and report the F1
    movement on the attack corpus and on a held-out variant corpus."""
    attack_before = mean_f1(model, attack_pairs)
    clean_before = mean_f1(model, clean_pairs)
    holdout_before = mean_f1(model, holdout_pairs) if holdout_pairs else None

    retrained = train_window_classifier(
        clean_pairs + attack_pairs, hyper=hyper, seed=seed, warm_start=model
    )

    report = RetrainReport(
        attack_f1_before=attack_before,
        attack_f1_after=mean_f1(retrained, attack_pairs),
        holdout_f1_before=holdout_before,
        holdout_f1_after=mean_f1(retrained, holdout_pairs) if holdout_pairs else None,
        clean_f1_before=clean_before,
        clean_f1_after=mean_f1(retrained, clean_pairs),
    )
    return retrained, report
