"""End-to-end pipeline: corpus -> ground truth -> detect -> score -> analyze
-> search -> validate -> report. Each phase is resumable from its on-disk
artifacts, and every text artifact embeds the hash of the config that
produced it."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import report as report_mod
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
    CorpusManifest,
    SyntheticSpec,
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
from .search import (
    CorpusBundle,
    SearchConfig,
    attack_search,
    select_targets,
    validate_attack,
)

log = logging.getLogger("fnbounds")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PHASE = 3

PHASES = ("corpus", "gt", "detect", "score", "analyze", "search", "validate", "report")


class ConfigError(FnBoundsError):
    """Invalid pipeline configuration; maps to exit code 2."""


class PhaseError(FnBoundsError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"phase {phase!r} failed: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class PipelineConfig:
    corpus_source: str = "synth"  # synth | build | import
    synth_spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    import_dir: str = ""
    detector: str = "pattern"  # pattern | window | external
    external_cmd: tuple[str, ...] = ()
    pattern_extents: bool = True
    pattern_table_file: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)
    train_fraction: float = 0.5
    train_seed: int = 0
    starts_only: bool = False
    analysis_radius: int = 8
    pattern_length: int = 4
    search_enabled: bool = True
    search: SearchConfig = field(default_factory=SearchConfig)
    validate_targets: int = 4  # functions per binary re-targeted in validation
    rng: int = 1
    out_dir: str = "out"

    def validate(self) -> None:
        if self.corpus_source not in ("synth", "build", "import"):
            raise ConfigError(f"unknown corpus source {self.corpus_source!r}")
        if self.detector not in ("pattern", "window", "external"):
            raise ConfigError(f"unknown detector {self.detector!r}")
        if self.detector == "external" and not self.external_cmd:
            raise ConfigError("detector 'external' needs external_cmd")
        if self.corpus_source == "import" and not self.import_dir:
            raise ConfigError("corpus source 'import' needs import_dir")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must be in (0, 1]")

    def canonical_json(self) -> str:
        data = asdict(self)
        data["out_dir"] = "."  # artifact trees must not depend on their location
        data["synth_spec"]["variants"] = list(self.synth_spec.variants)
        data["external_cmd"] = list(self.external_cmd)
        data["search"]["seeds"] = [s.hex() for s in self.search.seeds]
        return json.dumps(data, sort_keys=True, indent=1) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "synth_spec" in data:
            spec = dict(data["synth_spec"])
            if "variants" in spec:
                spec["variants"] = tuple(spec["variants"])
            data["synth_spec"] = SyntheticSpec(**spec)
        if "train" in data:
            train = dict(data["train"])
            if "class_weighting" in train:
                train["class_weighting"] = tuple(train["class_weighting"])
            data["train"] = TrainConfig(**train)
        if "search" in data:
            search = dict(data["search"])
            if "seeds" in search:
                search["seeds"] = tuple(bytes.fromhex(s) for s in search["seeds"])
            data["search"] = SearchConfig(**search)
        if "external_cmd" in data:
            data["external_cmd"] = tuple(data["external_cmd"])
        return cls(**data)


@dataclass
class _State:
    config: PipelineConfig
    out: Path
    config_hash: str
    manifest: CorpusManifest | None = None
    pairs: list | None = None
    eval_pairs: list | None = None
    train_pairs: list | None = None
    detector: object | None = None
    detections: dict[str, list[Detection]] | None = None
    rows: list | None = None
    seeds: list | None = None
    search_result: object | None = None
    jobs: int = 1


def _detector_id(config: PipelineConfig) -> str:
    return config.detector


def _phase_corpus(state: _State) -> None:
    cfg = state.config
    corpus_dir = state.out / "corpus"
    manifest_path = corpus_dir / "manifest.csv"
    if not manifest_path.is_file():
        if cfg.corpus_source == "synth":
            generate_synthetic_corpus(cfg.synth_spec, cfg.rng, corpus_dir)
        elif cfg.corpus_source == "import":
            manifest = import_binkit(cfg.import_dir)
            corpus_dir.mkdir(parents=True, exist_ok=True)
            write_manifest(manifest, manifest_path, state.config_hash)
        else:
            from .corpus import (
                STANDARD_CONFIGURATIONS,
                Toolchain,
                build_corpus,
                make_probe_package,
            )

            corpus_dir.mkdir(parents=True, exist_ok=True)
            package = make_probe_package(corpus_dir)
            build_corpus(
                [package],
                [Toolchain("cc", "system", "cc")],
                list(STANDARD_CONFIGURATIONS),
                corpus_dir,
            )
    manifest = ingest_manifest(manifest_path)
    if cfg.corpus_source == "import":
        manifest = CorpusManifest(entries=manifest.entries, root=Path(cfg.import_dir))
    state.manifest = manifest


def _phase_gt(state: _State) -> None:
    labels_dir = state.out / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for entry in state.manifest.entries:
        image = load_code_image(state.manifest.resolve(entry), image_id=entry.binary_id)
        label_path = labels_dir / f"{entry.binary_id}.labels"
        if label_path.is_file():
            lm = load_label_map(label_path, binary_id=entry.binary_id, domain=image.domain())
        else:
            sidecar = state.manifest.resolve(entry).with_suffix(".labels")
            if sidecar.is_file():
                lm = load_label_map(sidecar, binary_id=entry.binary_id, domain=image.domain())
            else:
                _, lm = extract_ground_truth(image, function_symbols(image.to_bytes()))
            store_label_map(lm, label_path)
        pairs.append((image, lm))
    state.pairs = pairs


def _split(state: _State) -> tuple[list, list]:
    """Deterministic train/eval split by sorted binary id."""
    cfg = state.config
    ordered = sorted(state.pairs, key=lambda p: p[0].id)
    if cfg.detector != "window" or cfg.train_fraction >= 1.0:
        return ordered, ordered
    n_train = max(1, int(len(ordered) * cfg.train_fraction))
    train = ordered[:n_train]
    evals = ordered[n_train:] or ordered
    return train, evals


def _phase_detect(state: _State) -> None:
    cfg = state.config
    train_pairs, eval_pairs = _split(state)
    state.train_pairs, state.eval_pairs = train_pairs, eval_pairs

    if cfg.detector == "pattern":
        table = DEFAULT_PATTERNS
        if cfg.pattern_table_file:
            table = parse_pattern_table(Path(cfg.pattern_table_file).read_text(encoding="utf-8"))
        detector = PatternDetector(table=table, extent_mode=cfg.pattern_extents)
    elif cfg.detector == "external":
        detector = ExternalDetector(command=cfg.external_cmd)
    else:
        model_prefix = state.out / "model" / "window"
        if model_prefix.with_suffix(".npy").is_file():
            detector = WindowClassifierModel.load(model_prefix)
        else:
            detector = train_window_classifier(train_pairs, hyper=cfg.train, seed=cfg.train_seed)
            model_prefix.parent.mkdir(parents=True, exist_ok=True)
            detector.save(model_prefix)
    state.detector = detector

    det_dir = state.out / "detections" / _detector_id(cfg)
    det_dir.mkdir(parents=True, exist_ok=True)

    def _detect_one(pair):
        image, _ = pair
        det_path = det_dir / f"{image.id}.txt"
        if det_path.is_file():
            starts, ends = parse_label_lines(det_path.read_text(encoding="ascii"))
            dets = [Detection(a, "S") for a in starts] + [Detection(a, "E") for a in ends]
            dets.sort(key=lambda d: (d.address, d.label))
            return image.id, dets
        dets = detector.detect(image)
        lines = [(d.address, 0 if d.label == "S" else 1, d.label) for d in dets]
        lines.sort()
        det_path.write_text(
            "".join(f"{a:#x} {tag}\n" for a, _, tag in lines), encoding="ascii", newline=""
        )
        return image.id, dets

    if state.jobs > 1:
        with ThreadPoolExecutor(max_workers=state.jobs) as pool:
            results = list(pool.map(_detect_one, eval_pairs))
    else:
        results = [_detect_one(pair) for pair in eval_pairs]
    state.detections = dict(results)


def _phase_score(state: _State) -> None:
    cfg = state.config
    dataset_of = {e.binary_id: e.dataset_tag for e in state.manifest.entries}
    rows = []
    for image, lm in state.eval_pairs:
        counts = confusion(lm, state.detections[image.id], detector_id=_detector_id(cfg))
        rows.extend(score_rows(counts, dataset_of[image.id], starts_only=cfg.starts_only))
    state.rows = rows
    scores_path = state.out / "scores" / "scores.csv"
    scores_path.parent.mkdir(parents=True, exist_ok=True)
    if not scores_path.is_file():
        scores_path.write_text(
            report_mod.render_scores_csv(rows, state.config_hash), encoding="utf-8", newline=""
        )
    summary_path = state.out / "scores" / "summary.csv"
    if not summary_path.is_file():
        cls = "S" if cfg.starts_only else "SE"
        summaries = aggregate(rows, cls=cls)
        summary_path.write_text(
            report_mod.render_summary_csv(summaries, state.config_hash),
            encoding="utf-8", newline="",
        )


def _phase_analyze(state: _State) -> None:
    cfg = state.config
    records = []
    for image, lm in state.eval_pairs:
        records.extend(
            collect_misclassifications(
                lm, state.detections[image.id], image, cfg.analysis_radius,
                detector_id=_detector_id(cfg),
            )
        )
    seeds = rank_heavy_hitters(records, cfg.pattern_length)
    state.seeds = seeds
    seeds_path = state.out / "analysis" / "seeds.csv"
    seeds_path.parent.mkdir(parents=True, exist_ok=True)
    if not seeds_path.is_file():
        seeds_path.write_text(
            report_mod.render_seeds_csv(seeds, state.config_hash), encoding="utf-8", newline=""
        )


def _phase_search(state: _State) -> None:
    cfg = state.config
    if not cfg.search_enabled:
        return
    bundle = CorpusBundle(state.eval_pairs)
    seeds = tuple(s.pattern for s in state.seeds[:8] if len(s.pattern) == cfg.search.payload_length)
    search_cfg = SearchConfig(
        payload_length=cfg.search.payload_length,
        budget=cfg.search.budget,
        seeds=seeds,
        mode=cfg.search.mode,
        target_kind=cfg.search.target_kind,
        rng_seed=cfg.search.rng_seed,
        objective=cfg.search.objective,
        require_valid_instruction=cfg.search.require_valid_instruction,
    )
    result = attack_search(state.detector, bundle, search_cfg)
    state.search_result = result
    search_dir = state.out / "search"
    search_dir.mkdir(parents=True, exist_ok=True)
    log_path = search_dir / "search_log.csv"
    if not log_path.is_file():
        log_path.write_text(
            report_mod.render_search_log(result, state.config_hash), encoding="utf-8", newline=""
        )
    result_path = search_dir / "result.json"
    if not result_path.is_file():
        ranked = result.ranked()
        payload = {
            "config_hash": state.config_hash,
            "baseline_mean_f1": round(result.baseline_mean_f1, 6),
            "objective": search_cfg.objective,
            "ranking": [
                {"payload_hex": p.hex(), "objective_value": round(v, 6)}
                for p, v, _ in ranked[:32]
            ],
        }
        result_path.write_text(
            json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="ascii"
        )


def _phase_validate(state: _State) -> None:
    cfg = state.config
    if not cfg.search_enabled or state.search_result is None:
        return
    path = state.out / "validate" / "validation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.is_file():
        return
    bundle = CorpusBundle(state.eval_pairs)
    targets = select_targets(bundle, policy="first", limit=cfg.validate_targets)
    best = state.search_result.best
    try:
        report = validate_attack(
            state.detector, bundle, [best.payload], targets,
            mode=cfg.search.mode, target_kind=cfg.search.target_kind,
        )
    except FnBoundsError as exc:
        path.write_text(
            f"# config_hash: {state.config_hash}\n# validation skipped: {exc}\n",
            encoding="utf-8", newline="",
        )
        return
    lines = [f"# config_hash: {state.config_hash}"]
    lines.append("payload_hex,binary,start,intended,confirmed,detail")
    for o in report.outcomes:
        lines.append(
            f"{o.payload.hex()},{o.binary_id},{o.start:#x},{o.intended},"
            f"{str(o.confirmed).lower()},{o.detail}"
        )
    for r in report.recoveries:
        lines.append(f"# {r.binary_id}: {r.format()}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")


def _phase_report(state: _State) -> None:
    cfg = state.config
    cls = "S" if cfg.starts_only else "SE"
    summaries = aggregate(state.rows, cls=cls)
    report_mod.emit_report(
        state.rows, summaries, state.out / "report",
        search_result=state.search_result, config_hash=state.config_hash,
    )


_PHASE_FUNCS = {
    "corpus": _phase_corpus,
    "gt": _phase_gt,
    "detect": _phase_detect,
    "score": _phase_score,
    "analyze": _phase_analyze,
    "search": _phase_search,
    "validate": _phase_validate,
    "report": _phase_report,
}


def run_pipeline(config: PipelineConfig, jobs: int = 1) -> int:
    """Execute all phases in order; returns a process exit code."""
    try:
        config.validate()
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_hash = config.config_hash()
    (out / "config.json").write_text(config.canonical_json(), encoding="ascii", newline="")
    state = _State(config=config, out=out, config_hash=config_hash, jobs=jobs)

    for phase in PHASES:
        try:
            _PHASE_FUNCS[phase](state)
        except Exception as exc:  # surface the phase name; keep partial artifacts
            log.error("phase %s failed: %s", phase, exc)
            return EXIT_PHASE
    return EXIT_OK
