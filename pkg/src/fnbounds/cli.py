"""Command-line interface.

Subcommands: corpus (build/synth/import-binkit), gt extract, detect, score,
analyze, rewrite (inject/verify), search run, report, pipeline run.
Exit codes: 0 ok, 2 configuration error, 3 phase failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .analysis import collect_misclassifications, rank_heavy_hitters
from .binary import (
    extract_ground_truth,
    function_symbols,
    load_code_image,
    load_label_map,
    parse_label_lines,
    store_label_map,
)
from .corpus import (
    STANDARD_CONFIGURATIONS,
    SourcePackage,
    SyntheticSpec,
    Toolchain,
    build_corpus,
    generate_synthetic_corpus,
    import_binkit,
    ingest_manifest,
    load_corpus,
    write_manifest,
)
from .detectors import (
    DEFAULT_PATTERNS,
    Detection,
    ExternalDetector,
    PatternDetector,
    TrainConfig,
    WindowClassifierModel,
    parse_pattern_table,
    train_window_classifier,
)
from .errors import FnBoundsError
from .metrics import aggregate, confusion, score_rows
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PHASE,
    ConfigError,
    PipelineConfig,
    run_pipeline,
)
from .report import (
    emit_report,
    render_scores_csv,
    render_seeds_csv,
    render_summary_csv,
    render_summary_table,
)
from .rewriter import (
    MODES,
    PadRegion,
    apply_injections,
    plan_injection,
    scan_pads,
    verify_injection,
)
from .search import CorpusBundle, SearchConfig, attack_search

log = logging.getLogger("fnbounds")


def _load_labeled_corpus(manifest_path: str, labels_dir: str | None):
    manifest = ingest_manifest(manifest_path)
    return manifest, load_corpus(manifest, labels_dir)


def _build_detector(args, pairs):
    if args.detector == "pattern":
        table = DEFAULT_PATTERNS
        if args.pattern_table:
            table = parse_pattern_table(Path(args.pattern_table).read_text(encoding="utf-8"))
        return PatternDetector(table=table, extent_mode=not args.no_extents)
    if args.detector == "external":
        if not args.external_cmd:
            raise FnBoundsError("--external-cmd required for the external detector")
        return ExternalDetector(command=tuple(args.external_cmd.split()))
    if args.model and Path(args.model + ".npy").is_file():
        return WindowClassifierModel.load(args.model)
    hyper = TrainConfig(radius=args.radius, epochs=args.epochs, learning_rate=args.lr)
    model = train_window_classifier(pairs, hyper=hyper, seed=args.rng)
    if args.model:
        Path(args.model).parent.mkdir(parents=True, exist_ok=True)
        model.save(args.model)
    return model


def _add_detector_flags(parser):
    parser.add_argument("--detector", choices=("pattern", "window", "external"), default="pattern")
    parser.add_argument("--pattern-table", help="pattern table file (hex bytes + tag per line)")
    parser.add_argument("--no-extents", action="store_true", help="match patterns at every offset")
    parser.add_argument("--external-cmd", help="external detector command line")
    parser.add_argument("--model", help="window model path prefix (load, or save after training)")
    parser.add_argument("--radius", type=int, default=8)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--lr", type=float, default=0.5)


def _cmd_corpus_build(args) -> int:
    packages = [SourcePackage(name=Path(p).name, root=Path(p)) for p in args.package]
    toolchains = []
    for spec in args.toolchain:
        ident, _, rest = spec.partition(":")
        version, _, cc = rest.partition(":")
        toolchains.append(Toolchain(ident, version or "0", cc or ident))
    wanted = set(args.config) if args.config else None
    configs = [c for c in STANDARD_CONFIGURATIONS if wanted is None or c.name in wanted]
    manifest, failures = build_corpus(
        packages, toolchains, configs, args.out, optimizations=tuple(args.opt or ["O0"])
    )
    print(f"built {len(manifest.entries)} binaries, {len(failures)} failures -> {args.out}")
    return EXIT_OK


def _cmd_corpus_synth(args) -> int:
    spec = SyntheticSpec.from_json(Path(args.spec).read_text(encoding="utf-8")) \
        if args.spec else SyntheticSpec()
    paths, _, _ = generate_synthetic_corpus(spec, args.seed, args.out)
    print(f"generated {len(paths)} binaries -> {args.out}")
    return EXIT_OK


def _cmd_corpus_import(args) -> int:
    manifest = import_binkit(args.directory)
    out = Path(args.out) if args.out else Path(args.directory) / "manifest.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out)
    print(f"imported {len(manifest.entries)} binaries -> {out}")
    return EXIT_OK


def _cmd_gt_extract(args) -> int:
    manifest = ingest_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        image = load_code_image(manifest.resolve(entry), image_id=entry.binary_id)
        _, lm = extract_ground_truth(image, function_symbols(image.to_bytes()))
        store_label_map(lm, out / f"{entry.binary_id}.labels")
    print(f"extracted ground truth for {len(manifest.entries)} binaries -> {out}")
    return EXIT_OK


def _cmd_detect(args) -> int:
    _, pairs = _load_labeled_corpus(args.manifest, args.labels)
    detector = _build_detector(args, pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image, _ in pairs:
        detections = detector.detect(image)
        lines = sorted((d.address, 0 if d.label == "S" else 1, d.label) for d in detections)
        (out / f"{image.id}.txt").write_text(
            "".join(f"{a:#x} {tag}\n" for a, _, tag in lines), encoding="ascii", newline=""
        )
    print(f"wrote detections for {len(pairs)} binaries -> {out}")
    return EXIT_OK


def _load_detections(directory: Path, binary_id: str) -> list[Detection]:
    starts, ends = parse_label_lines((directory / f"{binary_id}.txt").read_text(encoding="ascii"))
    dets = [Detection(a, "S") for a in starts] + [Detection(a, "E") for a in ends]
    dets.sort(key=lambda d: (d.address, d.label))
    return dets


def _cmd_score(args) -> int:
    manifest, pairs = _load_labeled_corpus(args.manifest, args.labels)
    dataset_of = {e.binary_id: e.dataset_tag for e in manifest.entries}
    rows = []
    for image, lm in pairs:
        preds = _load_detections(Path(args.detections), image.id)
        counts = confusion(lm, preds, detector_id=args.detector_id)
        rows.extend(score_rows(counts, dataset_of[image.id], starts_only=args.starts_only))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(render_scores_csv(rows), encoding="utf-8", newline="")
    if args.summary:
        cls = "S" if args.starts_only else "SE"
        summaries = aggregate(rows, cls=cls)
        Path(args.summary).write_text(render_summary_csv(summaries), encoding="utf-8", newline="")
        print(render_summary_table(summaries), end="")
    print(f"scored {len(pairs)} binaries -> {args.out}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    _, pairs = _load_labeled_corpus(args.manifest, args.labels)
    records = []
    for image, lm in pairs:
        preds = _load_detections(Path(args.detections), image.id)
        records.extend(
            collect_misclassifications(lm, preds, image, args.radius, detector_id=args.detector_id)
        )
    seeds = rank_heavy_hitters(records, args.k)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(render_seeds_csv(seeds), encoding="utf-8", newline="")
    print(f"{len(records)} misclassifications, {len(seeds)} seeds -> {args.out}")
    return EXIT_OK


def _read_plan_file(path: str, pads_by_binary) -> dict[str, list]:
    plans: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(row for row in handle if not row.startswith("#"))
        for row in reader:
            pad = PadRegion(
                address=int(row["address"], 0),
                length=int(row["length"]),
                position="epilogue_pad",
                guard="after_return",
            )
            scanned = pads_by_binary.get(row["binary"], [])
            for candidate in scanned:
                if candidate.address == pad.address and candidate.length == pad.length:
                    pad = candidate
                    break
            plans.setdefault(row["binary"], []).append(
                plan_injection(pad, bytes.fromhex(row["payload_hex"]), row["mode"])
            )
    return plans


def _cmd_rewrite_inject(args) -> int:
    manifest, pairs = _load_labeled_corpus(args.manifest, args.labels)
    pads_by_binary = {image.id: scan_pads(image, lm) for image, lm in pairs}
    plans = _read_plan_file(args.plan, pads_by_binary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for image, _ in pairs:
        mine = plans.get(image.id, [])
        mutated = apply_injections(image, mine) if mine else image
        (out / f"{image.id}.elf").write_bytes(mutated.to_bytes())
        written += 1
    print(f"wrote {written} binaries ({sum(len(v) for v in plans.values())} injections) -> {out}")
    return EXIT_OK


def _cmd_rewrite_verify(args) -> int:
    original = load_code_image(args.original)
    mutated = load_code_image(args.mutated)
    _, lm = extract_ground_truth(original, function_symbols(original.to_bytes()))
    pads = {(p.address, p.length): p for p in scan_pads(original, lm)}
    plans = []
    with open(args.plan, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(row for row in handle if not row.startswith("#"))
        for row in reader:
            pad = pads.get((int(row["address"], 0), int(row["length"])))
            if pad is None:
                print(f"no pad at {row['address']} x{row['length']}", file=sys.stderr)
                return EXIT_PHASE
            plans.append(plan_injection(pad, bytes.fromhex(row["payload_hex"]), row["mode"]))
    report = verify_injection(original, mutated, plans)
    for violation in report.violations:
        print(f"VIOLATION {violation.check} @ {violation.address:#x}: {violation.detail}")
    print("verification:", "PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_PHASE


def _cmd_search_run(args) -> int:
    _, pairs = _load_labeled_corpus(args.manifest, args.labels)
    detector = _build_detector(args, pairs)
    seeds: tuple[bytes, ...] = ()
    if args.seed_file:
        with open(args.seed_file, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(row for row in handle if not row.startswith("#"))
            seeds = tuple(
                bytes.fromhex(row["pattern_hex"])
                for row in reader
                if len(bytes.fromhex(row["pattern_hex"])) == args.k
            )[: args.max_seeds]
    config = SearchConfig(
        payload_length=args.k,
        budget=max(args.budget, len(seeds) or 1),
        seeds=seeds,
        mode=args.mode,
        rng_seed=args.rng,
        objective=args.objective,
        require_valid_instruction=args.valid_instructions,
    )
    bundle = CorpusBundle(pairs)
    result = attack_search(detector, bundle, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .report import render_search_log

    (out / "search_log.csv").write_text(render_search_log(result), encoding="utf-8", newline="")
    best = result.best
    summary = {
        "baseline_mean_f1": round(result.baseline_mean_f1, 6),
        "best_payload_hex": best.payload.hex(),
        "best_mean_f1": round(best.mean_f1, 6),
        "delta_f1": round(best.mean_f1 - result.baseline_mean_f1, 6),
    }
    (out / "result.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="ascii"
    )
    print(
        f"search done: baseline F1 {result.baseline_mean_f1:.4f}, "
        f"best payload {best.payload.hex()} -> F1 {best.mean_f1:.4f}"
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = []
    with open(args.scores, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(row for row in handle if not row.startswith("#"))
        from .metrics import ScoreRow

        for row in reader:
            rows.append(
                ScoreRow(
                    row["binary"], row["dataset"], row["detector"], row["class"],
                    int(row["tp"]), int(row["fp"]), int(row["fn"]),
                    float(row["precision"]), float(row["recall"]), float(row["f1"]),
                )
            )
    cls = "S" if args.starts_only else "SE"
    summaries = aggregate(rows, cls=cls)
    paths = emit_report(rows, summaries, args.out)
    print("report artifacts:", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def _cmd_pipeline_run(args) -> int:
    if args.config:
        config = PipelineConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    else:
        config = PipelineConfig()
    if args.out:
        config.out_dir = args.out
    if args.rng is not None:
        config.rng = args.rng
    return run_pipeline(config, jobs=args.jobs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fnbounds")
    parser.add_argument("--rng", type=int, default=None, help="master RNG seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="produce or import benchmark corpora")
    corpus_sub = corpus.add_subparsers(dest="subcommand", required=True)

    build = corpus_sub.add_parser("build", help="compile the toolchain/config matrix")
    build.add_argument("--package", action="append", required=True, help="source package directory")
    build.add_argument("--toolchain", action="append", required=True, help="id[:version[:cc]]")
    build.add_argument("--config", action="append", help="configuration names (default: all)")
    build.add_argument("--opt", action="append", default=None, help="optimization levels")
    build.add_argument("--out", required=True)
    build.set_defaults(func=_cmd_corpus_build)

    synth = corpus_sub.add_parser("synth", help="generate the synthetic corpus")
    synth.add_argument("--seed", type=int, required=True)
    synth.add_argument("--spec", help="generator spec JSON file")
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=_cmd_corpus_synth)

    imp = corpus_sub.add_parser("import-binkit", help="convert a BinKit-layout tree")
    imp.add_argument("directory")
    imp.add_argument("--out", help="manifest output path")
    imp.set_defaults(func=_cmd_corpus_import)

    gt = sub.add_parser("gt", help="ground-truth operations")
    gt_sub = gt.add_subparsers(dest="subcommand", required=True)
    extract = gt_sub.add_parser("extract", help="extract label maps from symbol tables")
    extract.add_argument("--manifest", required=True)
    extract.add_argument("--out", required=True)
    extract.set_defaults(func=_cmd_gt_extract)

    detect = sub.add_parser("detect", help="run a detector over the corpus")
    detect.add_argument("--manifest", required=True)
    detect.add_argument("--labels", help="label-map directory (for window training)")
    detect.add_argument("--out", required=True)
    detect.add_argument("--rng", type=int, default=0)
    _add_detector_flags(detect)
    detect.set_defaults(func=_cmd_detect)

    score = sub.add_parser("score", help="score detections against ground truth")
    score.add_argument("--manifest", required=True)
    score.add_argument("--labels")
    score.add_argument("--detections", required=True)
    score.add_argument("--detector-id", default="detector")
    score.add_argument("--starts-only", action="store_true")
    score.add_argument("--out", required=True)
    score.add_argument("--summary")
    score.set_defaults(func=_cmd_score)

    analyze = sub.add_parser("analyze", help="mine misclassification heavy hitters")
    analyze.add_argument("--manifest", required=True)
    analyze.add_argument("--labels")
    analyze.add_argument("--detections", required=True)
    analyze.add_argument("--detector-id", default="detector")
    analyze.add_argument("--radius", type=int, default=8)
    analyze.add_argument("--k", type=int, default=4)
    analyze.add_argument("--out", required=True)
    analyze.set_defaults(func=_cmd_analyze)

    rewrite = sub.add_parser("rewrite", help="inject payloads / verify mutations")
    rewrite_sub = rewrite.add_subparsers(dest="subcommand", required=True)
    inject = rewrite_sub.add_parser("inject")
    inject.add_argument("--plan", required=True, help="CSV: binary,address,length,mode,payload_hex")
    inject.add_argument("--manifest", required=True)
    inject.add_argument("--labels")
    inject.add_argument("--out", required=True)
    inject.set_defaults(func=_cmd_rewrite_inject)
    verify = rewrite_sub.add_parser("verify")
    verify.add_argument("--original", required=True)
    verify.add_argument("--mutated", required=True)
    verify.add_argument("--plan", required=True)
    verify.set_defaults(func=_cmd_rewrite_verify)

    search = sub.add_parser("search", help="black-box adversarial search")
    search_sub = search.add_subparsers(dest="subcommand", required=True)
    run = search_sub.add_parser("run")
    run.add_argument("--manifest", required=True)
    run.add_argument("--labels")
    run.add_argument("--k", type=int, default=4)
    run.add_argument("--budget", type=int, default=256)
    run.add_argument("--seed-file", help="seeds CSV from `analyze`")
    run.add_argument("--max-seeds", type=int, default=8)
    run.add_argument("--mode", choices=MODES, default="verbatim_after_return")
    run.add_argument("--objective", choices=("min_f1", "max_fp_count"), default="min_f1")
    run.add_argument("--valid-instructions", action="store_true")
    run.add_argument("--rng", type=int, default=1)
    run.add_argument("--out", required=True)
    _add_detector_flags(run)
    run.set_defaults(func=_cmd_search_run)

    report = sub.add_parser("report", help="emit summary tables and scatter data")
    report.add_argument("--scores", required=True)
    report.add_argument("--starts-only", action="store_true")
    report.add_argument("--out", required=True)
    report.set_defaults(func=_cmd_report)

    pipeline = sub.add_parser("pipeline", help="full end-to-end run")
    pipeline_sub = pipeline.add_subparsers(dest="subcommand", required=True)
    prun = pipeline_sub.add_parser("run")
    prun.add_argument("--config", help="pipeline config JSON")
    prun.add_argument("--out")
    prun.add_argument("--rng", type=int, default=None)
    prun.add_argument("--jobs", type=int, default=1)
    prun.set_defaults(func=_cmd_pipeline_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except FnBoundsError as exc:
        log.error("%s", exc)
        return EXIT_PHASE
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
