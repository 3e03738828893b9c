import pytest

from fnbounds.detectors import (
    PatternDetector,
    TrainConfig,
    parse_pattern_table,
    train_window_classifier,
)
from fnbounds.errors import NoUsablePads, TargetWithoutPad
from fnbounds.rewriter import MODE_JUMP, MODE_VERBATIM
from fnbounds.search import (
    CorpusBundle,
    FunctionTarget,
    SearchConfig,
    adversarial_retrain,
    attack_search,
    baseline_scores,
    build_attack_corpus,
    evaluate_payload,
    mean_f1,
    random_payloads,
    select_targets,
    validate_attack,
)
from fnbounds.x86 import NOP_ENCODINGS, is_single_valid_instruction

from conftest import needs_objdump, objdump_raw, synth_corpus  # noqa: F401


def test_random_payloads_exhaustive_at_k1():
    payloads = random_payloads(1, 256, rng_seed=0)
    assert sorted(payloads) == [bytes([v]) for v in range(256)]


def test_random_payloads_deterministic():
    assert random_payloads(4, 50, rng_seed=3) == random_payloads(4, 50, rng_seed=3)
    assert random_payloads(4, 50, rng_seed=3) != random_payloads(4, 50, rng_seed=4)


def test_random_payloads_distinct():
    payloads = random_payloads(2, 400, rng_seed=1)
    assert len(set(payloads)) == 400


def test_random_payloads_bounds():
    with pytest.raises(ValueError):
        random_payloads(0, 1, 0)
    with pytest.raises(ValueError):
        random_payloads(1, 257, 0)


@needs_objdump
def test_validity_filter_yields_single_instructions(tmp_path):
    payloads = random_payloads(4, 60, rng_seed=2, require_valid_instruction=True)
    assert len(payloads) == 60
    for payload in payloads:
        assert is_single_valid_instruction(payload)
    for payload in payloads[:12]:
        dump = objdump_raw(payload, tmp_path)
        assert "(bad)" not in dump


@pytest.fixture
def padded_bundle(synth_corpus):
    pairs = synth_corpus(seed=21, n_binaries=3, functions_per_binary=20,
                         variants=("plain",), pad_size=4, subdir="bundle")
    return CorpusBundle(pairs)


@pytest.fixture
def trained_model(synth_corpus):
    pairs = synth_corpus(seed=11, n_binaries=4, functions_per_binary=30,
                         variants=("plain",), pad_size=4, subdir="train")
    return train_window_classifier(
        pairs, hyper=TrainConfig(radius=8, epochs=15, learning_rate=0.5), seed=3
    )


def test_nop_payload_is_a_no_op(trained_model, padded_bundle):
    evaluation = evaluate_payload(trained_model, padded_bundle, NOP_ENCODINGS[4])
    assert all(delta == 0.0 for delta in evaluation.deltas)


def test_prologue_payload_collapses_naive_pattern_precision(padded_bundle):
    detector = PatternDetector(extent_mode=False)
    baseline = baseline_scores(detector, padded_bundle)
    evaluation = evaluate_payload(
        detector, padded_bundle, bytes.fromhex("554889e5"), baseline=baseline
    )
    n_pads = sum(len(padded_bundle.pads_for(i, l)) for i, l in padded_bundle.pairs)
    assert evaluation.fp_total == sum(b.fp for b in baseline) + n_pads
    assert all(s.precision < b.precision for s, b in zip(evaluation.per_binary, baseline))


def test_no_usable_pads(synth_corpus, trained_model):
    tight = synth_corpus(seed=21, n_binaries=1, functions_per_binary=5,
                         variants=("plain",), pad_size=0, alignment=0, subdir="tight")
    with pytest.raises(NoUsablePads):
        evaluate_payload(trained_model, CorpusBundle(tight), b"\x01\x02")


def test_ground_truth_used_for_scoring_is_pre_injection(trained_model, padded_bundle):
    evaluation = evaluate_payload(trained_model, padded_bundle, b"\xde\xad\xbe\xef")
    for score, (image, lm) in zip(evaluation.per_binary, padded_bundle.pairs):
        counts_total = score.fp + score.fn
        assert score.binary_id == image.id
        assert counts_total >= 0
        assert len(lm.starts) == 20  # label maps untouched by the search


def test_budget_one_with_single_seed(trained_model, padded_bundle):
    payload = bytes.fromhex("554889e5")
    config = SearchConfig(payload_length=4, budget=1, seeds=(payload,), rng_seed=1)
    result = attack_search(trained_model, padded_bundle, config)
    assert len(result.evaluations) == 1
    assert result.ranked()[0][0] == payload
    assert result.log[0].candidate_idx == 0


def test_search_budget_bounds():
    with pytest.raises(ValueError):
        SearchConfig(budget=1, seeds=(b"\x00" * 4, b"\x01" * 4))
    with pytest.raises(ValueError):
        SearchConfig(payload_length=0)
    with pytest.raises(ValueError):
        SearchConfig(objective="nope")


def test_search_determinism(trained_model, padded_bundle):
    config = SearchConfig(payload_length=4, budget=12, rng_seed=5)
    a = attack_search(trained_model, padded_bundle, config)
    b = attack_search(trained_model, padded_bundle, config)
    assert [r.payload for r in a.log] == [r.payload for r in b.log]
    assert [r.mean_f1 for r in a.log] == [r.mean_f1 for r in b.log]
    assert [p.hex() for p, _, _ in a.ranked()] == [p.hex() for p, _, _ in b.ranked()]


def test_search_seeds_evaluated_first(trained_model, padded_bundle):
    seeds = (b"\x01\x02\x03\x04", b"\x05\x06\x07\x08")
    config = SearchConfig(payload_length=4, budget=6, seeds=seeds, rng_seed=5)
    result = attack_search(trained_model, padded_bundle, config)
    assert [r.payload for r in result.log[:2]] == list(seeds)
    assert len(result.log) == 6


def test_max_fp_objective_ranking(padded_bundle):
    detector = PatternDetector(extent_mode=False)
    seeds = (bytes.fromhex("554889e5"), b"\x00\x01\x02\x03")
    config = SearchConfig(payload_length=4, budget=2, seeds=seeds, rng_seed=1,
                          objective="max_fp_count", target_kind="induce_FP")
    result = attack_search(detector, padded_bundle, config)
    assert result.ranked()[0][0] == seeds[0]  # prologue bytes flood FPs


# -- validation round ------------------------------------------------------------

def test_validate_empty_targets(trained_model, padded_bundle):
    report = validate_attack(trained_model, padded_bundle, [b"\x01\x02\x03\x04"], [])
    assert report.outcomes == () and report.recoveries == ()


def test_validate_confirms_induced_misses(trained_model, padded_bundle):
    evaluation = evaluate_payload(trained_model, padded_bundle, b"\xde\xad\xbe\xef")
    assert evaluation.fn_total > 0
    targets = select_targets(padded_bundle, policy="first", limit=5)
    report = validate_attack(
        trained_model, padded_bundle, [b"\xde\xad\xbe\xef"], targets,
        target_kind="induce_FN",
    )
    assert report.outcomes
    assert report.confirmed > 0
    assert all(o.intended == "induce_FN" for o in report.outcomes)


def test_validate_recovery_format(trained_model, padded_bundle):
    targets = select_targets(padded_bundle, policy="first", limit=2)
    report = validate_attack(trained_model, padded_bundle, [b"\xde\xad\xbe\xef"], targets)
    assert report.recoveries
    line = report.recoveries[0].format()
    assert line.startswith("recovered ") and " of " in line and line.endswith(" functions")


def test_validate_target_without_pad(synth_corpus, trained_model):
    tight = synth_corpus(seed=21, n_binaries=1, functions_per_binary=5,
                         variants=("plain",), pad_size=0, alignment=0, subdir="tight2")
    bundle = CorpusBundle(tight)
    targets = [FunctionTarget(tight[0][0].id, tight[0][1].starts[0])]
    with pytest.raises(TargetWithoutPad):
        validate_attack(trained_model, bundle, [b"\x01"], targets)


def test_validate_fp_targets(padded_bundle):
    detector = PatternDetector(extent_mode=False)
    targets = select_targets(padded_bundle, policy="first", limit=3)
    report = validate_attack(
        detector, padded_bundle, [bytes.fromhex("554889e5")], targets,
        target_kind="induce_FP",
    )
    assert report.confirmed == len(report.outcomes) > 0


# -- retraining -------------------------------------------------------------------

def test_adversarial_retrain_improves_attack_and_reports(synth_corpus, trained_model, padded_bundle):
    hyper = TrainConfig(radius=8, epochs=15, learning_rate=0.5)
    train_pairs = synth_corpus(seed=11, n_binaries=4, functions_per_binary=30,
                               variants=("plain",), pad_size=4, subdir="train")
    holdout = synth_corpus(seed=33, n_binaries=2, functions_per_binary=30,
                           variants=("safestack",), pad_size=4, subdir="holdout")
    attack_pairs = build_attack_corpus(padded_bundle, bytes.fromhex("554889e5"))
    retrained, report = adversarial_retrain(
        trained_model, train_pairs, attack_pairs, hyper, seed=5, holdout_pairs=holdout
    )
    assert report.attack_f1_after > report.attack_f1_before
    assert report.holdout_f1_after is not None
    assert retrained.fingerprint() != trained_model.fingerprint()
    assert mean_f1(retrained, attack_pairs) == report.attack_f1_after
