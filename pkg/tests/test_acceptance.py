"""Acceptance suite: every criterion at its stated tolerance, one pass/fail
line per criterion (run with `pytest tests/test_acceptance.py -v -s`).

All corpora, models, and searches are seeded; expected magnitudes were pinned
from the first oracle runs of the final implementation.
"""

import dataclasses
import random
import time
from pathlib import Path

import pytest

from fnbounds.analysis import collect_misclassifications, rank_heavy_hitters
from fnbounds.binary import (
    LabelMap,
    extract_ground_truth,
    function_symbols,
    render_label_map,
)
from fnbounds.corpus import SyntheticSpec, generate_synthetic_corpus, load_corpus
from fnbounds.detectors import (
    Detection,
    PatternDetector,
    TrainConfig,
    train_window_classifier,
)
from fnbounds.errors import PayloadTooLarge
from fnbounds.metrics import confusion
from fnbounds.pipeline import PipelineConfig, run_pipeline
from fnbounds.report import emit_report, format_mean_sd, render_summary_table
from fnbounds.rewriter import (
    MODE_JUMP,
    MODE_VERBATIM,
    apply_injections,
    plan_injection,
    scan_pads,
    verify_injection,
)
from fnbounds.search import (
    CorpusBundle,
    SearchConfig,
    adversarial_retrain,
    attack_search,
    baseline_scores,
    build_attack_corpus,
    mean_f1,
)

HYPER = TrainConfig(radius=8, epochs=20, learning_rate=0.5)


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def ctx(tmp_path_factory):
    """Shared seeded fixtures for criteria 3-6."""
    root = tmp_path_factory.mktemp("acceptance")

    def gen(seed, sub, **kw):
        _, _, manifest = generate_synthetic_corpus(SyntheticSpec(**kw), seed, root / sub)
        return load_corpus(manifest)

    data = {}
    data["base_train"] = gen(11, "tr", n_binaries=6, functions_per_binary=40,
                             variants=("plain",), pad_size=4, package="tr")
    data["eval"] = gen(21, "ev", n_binaries=4, functions_per_binary=40,
                       variants=("plain",), pad_size=4, package="ev")
    data["variant_eval"] = gen(21, "var", n_binaries=4, functions_per_binary=40,
                               variants=("stack_protector", "cfi"), pad_size=4,
                               package="var")
    data["variant_train"] = gen(12, "vartr", n_binaries=4, functions_per_binary=40,
                                variants=("stack_protector", "cfi"), pad_size=4,
                                package="vartr")
    data["base_model"] = train_window_classifier(data["base_train"], hyper=HYPER, seed=3)
    data["root"] = root
    data["gen"] = gen
    return data


def test_criterion_1_metrics_oracle_equivalence():
    """confusion() equals a brute-force per-address oracle on 1000 seeded
    random instances; zero tolerance, under 10 seconds."""
    started = time.monotonic()
    rng = random.Random(1000)
    domain = ((0x0, 0x3F),)  # 64 addresses
    mismatches = 0
    for _ in range(1000):
        n_fn = rng.randint(0, 8)
        starts = rng.sample(range(64), n_fn)
        ends = rng.sample(range(64), n_fn)
        gt = LabelMap("b", tuple(starts), tuple(ends), domain)
        pred = [
            Detection(rng.randrange(64), rng.choice("SE"))
            for _ in range(rng.randint(0, 12))
        ]
        counts = confusion(gt, pred)

        pred_sets = {"S": set(), "E": set()}
        for det in pred:
            pred_sets[det.label].add(det.address)
        for cls, gt_set in (("S", gt.start_set), ("E", gt.end_set)):
            tp = fp = fn = 0
            for addr in range(64):  # brute force: every address, every class
                truth, guess = addr in gt_set, addr in pred_sets[cls]
                tp += truth and guess
                fp += guess and not truth
                fn += truth and not guess
            if (counts.tp[cls], counts.fp[cls], counts.fn[cls]) != (tp, fp, fn):
                mismatches += 1
    elapsed = time.monotonic() - started
    _report(
        "C1 metrics-oracle-equivalence",
        mismatches == 0 and elapsed < 10.0,
        f"1000 cases, {mismatches} mismatches, {elapsed:.1f}s < 10s",
    )


def test_criterion_2_rewriter_safety(tmp_path):
    """10,000 seeded (image, plan) trials: size preserved, diffs only in pad
    bytes, verification green, ground truth bit-identical; under 2 minutes."""
    started = time.monotonic()
    pairs = []
    for i, (variants, pad) in enumerate((
        (("plain",), 4),
        (("plain", "cfi", "frameless"), 8),
        (("stack_protector", "stack_clash", "safestack"), 12),
    )):
        spec = SyntheticSpec(n_binaries=3, functions_per_binary=12, variants=variants,
                             pad_size=pad, package=f"rw{i}")
        _, _, manifest = generate_synthetic_corpus(spec, 60 + i, tmp_path / f"rw{i}")
        pairs.extend(load_corpus(manifest))

    prepared = []
    for image, lm in pairs:
        gt_text = render_label_map(
            extract_ground_truth(image, function_symbols(image.to_bytes()))[1]
        )
        prepared.append((image, scan_pads(image, lm), gt_text))

    rng = random.Random(4242)
    trials = failures = 0
    while trials < 10_000:
        image, pads, gt_text = prepared[rng.randrange(len(prepared))]
        pad = pads[rng.randrange(len(pads))]
        payload = bytes(rng.randrange(256) for _ in range(rng.randint(1, 8)))
        mode = rng.choice((MODE_VERBATIM, MODE_JUMP))
        try:
            plan = plan_injection(pad, payload, mode)
        except PayloadTooLarge:
            continue
        trials += 1
        mutated = apply_injections(image, [plan])
        before, after = image.to_bytes(), mutated.to_bytes()
        ok = len(before) == len(after)
        sec = image.section_at(pad.address)
        lo = sec.file_offset + (pad.address - sec.virtual_address)
        diff = [i for i, (a, b) in enumerate(zip(before, after)) if a != b]
        ok = ok and all(lo <= i < lo + pad.length for i in diff)
        ok = ok and verify_injection(image, mutated, [plan]).passed
        ok = ok and render_label_map(
            extract_ground_truth(mutated, function_symbols(after))[1]
        ) == gt_text
        failures += not ok
    elapsed = time.monotonic() - started
    _report(
        "C2 rewriter-safety",
        failures == 0 and elapsed < 120.0,
        f"10000 trials, {failures} failures, {elapsed:.1f}s < 120s",
    )


def test_criterion_3_inadvertent_attack_effect(ctx):
    """Plain-trained model loses >= 0.15 F1 on the stack-protector+endbr64
    variant corpus; retraining with variants recovers to within 0.05."""
    started = time.monotonic()
    model = ctx["base_model"]
    in_dist = mean_f1(model, ctx["eval"])
    on_variants = mean_f1(model, ctx["variant_eval"])
    drop = in_dist - on_variants

    expanded = train_window_classifier(
        ctx["base_train"] + ctx["variant_train"], hyper=HYPER, seed=3
    )
    in_dist_after = mean_f1(expanded, ctx["eval"])
    on_variants_after = mean_f1(expanded, ctx["variant_eval"])
    recovered = in_dist_after - on_variants_after <= 0.05
    elapsed = time.monotonic() - started
    _report(
        "C3 inadvertent-attack-effect",
        drop >= 0.15 and recovered and elapsed < 300.0,
        f"in-dist {in_dist:.3f}, variants {on_variants:.3f} (drop {drop:.3f} >= 0.15); "
        f"after expansion {on_variants_after:.3f} vs {in_dist_after:.3f} (gap <= 0.05); "
        f"{elapsed:.1f}s < 300s",
    )


def test_criterion_4_nop_resilience(ctx):
    """With pads in the training data, NOP-only padding moves window F1 by
    < 0.05, and the pattern detector's S-detections are exactly unchanged
    under every epilogue-pad injection the rewriter can produce."""
    started = time.monotonic()
    gen = ctx["gen"]
    mixed_train = ctx["base_train"][:4] + gen(
        12, "trnopad", n_binaries=4, functions_per_binary=40, variants=("plain",),
        pad_size=0, package="trB",
    )
    model = train_window_classifier(mixed_train, hyper=HYPER, seed=3)
    padded = mean_f1(model, ctx["eval"])
    unpadded = mean_f1(
        model,
        gen(22, "evnopad", n_binaries=4, functions_per_binary=40, variants=("plain",),
            pad_size=0, package="evn"),
    )
    window_ok = abs(padded - unpadded) < 0.05

    detector = PatternDetector()
    rng = random.Random(777)
    payloads = [bytes(rng.randrange(256) for _ in range(rng.randint(1, 4)))
                for _ in range(300)]
    payloads += [bytes.fromhex("554889e5"), bytes.fromhex("f30f1efa"),
                 bytes.fromhex("0f1f4000")]
    changed = 0
    checked = 0
    for image, lm in ctx["eval"] + ctx["variant_eval"]:
        pads = [p for p in scan_pads(image, lm) if p.position == "epilogue_pad"]
        base_starts = {d.address for d in detector.detect(image) if d.label == "S"}
        for payload in payloads:
            plans = []
            for pad in pads:
                try:
                    plans.append(plan_injection(pad, payload, MODE_VERBATIM))
                except PayloadTooLarge:
                    continue
            if not plans:
                continue
            mutated = apply_injections(image, plans)
            now = {d.address for d in detector.detect(mutated) if d.label == "S"}
            changed += now != base_starts
            checked += 1
    elapsed = time.monotonic() - started
    _report(
        "C4 nop-resilience-baseline",
        window_ok and changed == 0 and checked > 2000 and elapsed < 120.0,
        f"window |{padded:.3f}-{unpadded:.3f}| < 0.05; pattern S-set changed in "
        f"{changed}/{checked} injections; {elapsed:.1f}s < 120s",
    )


def test_criterion_5_adversarial_degradation(ctx):
    """Heavy-hitter-seeded search (k=4, budget <= 256) finds a payload taking
    >= 0.2 mean F1 off the NOP baseline; on the gcal-mechanism fixture the
    seeded search reaches that objective in <= half the evaluations of the
    unseeded search."""
    started = time.monotonic()
    model = ctx["base_model"]
    bundle = CorpusBundle(list(ctx["eval"]))
    base = baseline_scores(model, bundle)
    base_f1 = sum(s.f1 for s in base) / len(base)

    records = []
    for image, lm in ctx["variant_eval"]:
        records.extend(
            collect_misclassifications(lm, model.detect(image), image, radius=8,
                                       detector_id="window")
        )
    seeds = rank_heavy_hitters(records, 4)
    config = SearchConfig(payload_length=4, budget=64,
                          seeds=tuple(s.pattern for s in seeds[:8]), rng_seed=1)
    result = attack_search(model, bundle, config)
    best = result.best
    drop = base_f1 - best.mean_f1
    part_a = drop >= 0.2

    # gcal-mechanism fixture: the learned frameless prologue bytes recur
    # mid-function; mining hands the search the devastating payload directly.
    gen = ctx["gen"]
    gcal_train = []
    for i, (variant, pad) in enumerate((("plain", 4), ("plain", 0),
                                        ("frameless", 4), ("frameless", 0))):
        gcal_train += gen(50 + i, f"gct{i}", n_binaries=2, functions_per_binary=40,
                          variants=(variant,), pad_size=pad, package=f"gct{i}")
    gcal_hyper = TrainConfig(radius=4, epochs=20, learning_rate=0.5)
    gcal_model = train_window_classifier(gcal_train, hyper=gcal_hyper, seed=3)
    gcal_pairs = gen(42, "gce", n_binaries=2, functions_per_binary=60,
                     variants=("plain",), pad_size=8, confusable_rate=0.15,
                     package="gce")
    gcal_bundle = CorpusBundle(gcal_pairs)
    gcal_base = baseline_scores(gcal_model, gcal_bundle)
    gcal_f1 = sum(s.f1 for s in gcal_base) / len(gcal_base)
    gcal_records = []
    for image, lm in gcal_pairs:
        gcal_records.extend(
            collect_misclassifications(lm, gcal_model.detect(image), image, radius=4)
        )
    gcal_seeds = rank_heavy_hitters(gcal_records, 4)
    assert gcal_seeds[0].pattern == bytes.fromhex("4883ec08")

    def evals_to_objective(search_result, budget):
        for row in search_result.log:
            if gcal_f1 - row.mean_f1 >= 0.2:
                return row.candidate_idx + 1
        return budget  # objective not reached within the budget

    seeded_cfg = SearchConfig(payload_length=4, budget=64,
                              seeds=tuple(s.pattern for s in gcal_seeds[:4]), rng_seed=7)
    unseeded_cfg = SearchConfig(payload_length=4, budget=256, seeds=(), rng_seed=7)
    seeded_evals = evals_to_objective(attack_search(gcal_model, gcal_bundle, seeded_cfg), 64)
    unseeded_evals = evals_to_objective(
        attack_search(gcal_model, gcal_bundle, unseeded_cfg), 256
    )
    part_b = seeded_evals <= unseeded_evals / 2
    elapsed = time.monotonic() - started
    _report(
        "C5 adversarial-degradation",
        part_a and part_b and elapsed < 600.0,
        f"best payload {best.payload.hex()} drop {drop:.3f} >= 0.2; gcal seeded "
        f"{seeded_evals} vs unseeded {unseeded_evals} evaluations; {elapsed:.1f}s < 600s",
    )


def test_criterion_6_adversarial_retraining_tradeoff(ctx):
    """Retraining on the attack corpus recovers >= 0.3 attack F1 without
    raising held-out variant F1, and a fresh budget-256 search (alternative
    pad dataset, new rng) still finds a >= 0.15 drop."""
    started = time.monotonic()
    model = ctx["base_model"]
    bundle = CorpusBundle(list(ctx["eval"]))
    attack_pairs = build_attack_corpus(bundle, bytes.fromhex("554889e5"))
    retrained, report = adversarial_retrain(
        model, ctx["base_train"], attack_pairs, HYPER, seed=5,
        holdout_pairs=ctx["variant_eval"],
    )
    gain = report.attack_f1_after - report.attack_f1_before
    holdout_ok = report.holdout_f1_after <= report.holdout_f1_before

    alt_pairs = ctx["gen"](31, "alt3", n_binaries=4, functions_per_binary=40,
                           variants=("plain",), pad_size=3, package="alt3")
    alt_bundle = CorpusBundle(alt_pairs)
    alt_base = baseline_scores(retrained, alt_bundle)
    alt_f1 = sum(s.f1 for s in alt_base) / len(alt_base)
    research = attack_search(
        retrained, alt_bundle,
        SearchConfig(payload_length=3, budget=256, seeds=(), rng_seed=2),
    )
    re_drop = alt_f1 - research.best.mean_f1
    elapsed = time.monotonic() - started
    _report(
        "C6 adversarial-retraining-tradeoff",
        gain >= 0.3 and holdout_ok and re_drop >= 0.15 and elapsed < 600.0,
        f"attack F1 {report.attack_f1_before:.3f}->{report.attack_f1_after:.3f} "
        f"(gain {gain:.3f} >= 0.3); holdout {report.holdout_f1_before:.3f}->"
        f"{report.holdout_f1_after:.3f} (no increase); re-search drop {re_drop:.3f} "
        f">= 0.15 with payload {research.best.payload.hex()}; {elapsed:.1f}s < 600s",
    )


def test_criterion_7_pipeline_determinism(tmp_path):
    """Two end-to-end runs with identical seeds produce bit-identical trees."""
    started = time.monotonic()
    config = PipelineConfig(
        corpus_source="synth",
        synth_spec=SyntheticSpec(n_binaries=4, functions_per_binary=12,
                                 variants=("plain",), pad_size=4),
        detector="window",
        train=TrainConfig(radius=6, epochs=8, learning_rate=0.5),
        train_fraction=0.5,
        search=SearchConfig(payload_length=4, budget=8, rng_seed=1),
        rng=7,
        out_dir=str(tmp_path / "a"),
    )
    assert run_pipeline(config) == 0
    assert run_pipeline(dataclasses.replace(config, out_dir=str(tmp_path / "b"))) == 0

    def tree(root: Path):
        return {
            str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()
        }
    tree_a, tree_b = tree(tmp_path / "a"), tree(tmp_path / "b")
    identical = tree_a == tree_b
    elapsed = time.monotonic() - started
    _report(
        "C7 pipeline-determinism",
        identical and len(tree_a) > 10,
        f"{len(tree_a)} artifacts bit-identical across runs; {elapsed:.1f}s",
    )


def test_criterion_8_report_fidelity(tmp_path):
    """Summary formatting matches the `mean (sd)` table style exactly and the
    aggregate -> emit_report round trip is byte-stable against goldens."""
    from fnbounds.metrics import ScoreRow, ScoreSummary, aggregate

    literal_ok = (
        format_mean_sd(0.982, 0.040) == "0.982 (0.040)"
        and format_mean_sd(0.959, 0.062) == "0.959 (0.062)"
        and format_mean_sd(0.969, 0.044) == "0.969 (0.044)"
    )
    totals = ScoreSummary("Totals", "XDA", 7, 0.982, 0.040, 0.959, 0.062, 0.969, 0.044)
    row_ok = (
        render_summary_table([totals]).splitlines()[1]
        == "Totals,XDA,0.982 (0.040),0.959 (0.062),0.969 (0.044)"
    )

    rows = [
        ScoreRow("bin0", "Normal", "pattern", "SE", 4, 1, 0, 0.8, 0.8, 0.8),
        ScoreRow("bin1", "Normal", "pattern", "SE", 4, 0, 1, 1.0, 1.0, 1.0),
    ]
    paths = emit_report(rows, aggregate(rows), tmp_path)
    golden_table = (
        "dataset,detector,precision,recall,f1\n"
        "Normal,pattern,0.900 (0.100),0.900 (0.100),0.900 (0.100)\n"
    )
    golden_scatter = (
        "binary,dataset,detector,precision,recall\n"
        "bin0,Normal,pattern,0.800000,0.800000\n"
        "bin1,Normal,pattern,1.000000,1.000000\n"
    )
    files_ok = (
        paths["summary_table"].read_text() == golden_table
        and paths["scatter"].read_text() == golden_scatter
    )
    again = emit_report(rows, aggregate(rows), tmp_path)
    stable = again["summary_table"].read_text() == golden_table
    _report(
        "C8 report-fidelity",
        literal_ok and row_ok and files_ok and stable,
        "mean (sd) literals, Totals row, and golden files round-trip exactly",
    )
