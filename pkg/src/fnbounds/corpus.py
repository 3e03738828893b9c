"""Benchmark corpus production: a deterministic synthetic x86-64 generator
for desk-scale testing, a real compiler-toolchain driver, BinKit-layout
import, and the corpus manifest format."""

from __future__ import annotations

import csv
import io
import json
import os
import random
import shutil
import subprocess
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .binary import (
    CodeImage,
    FunctionRecord,
    LabelMap,
    build_elf,
    extract_ground_truth,
    function_symbols,
    load_code_image,
    parse_code_image,
    store_label_map,
)
from .errors import (
    AllBuildsFailed,
    DuplicateEntry,
    InvalidSpec,
    ManifestParse,
    MissingBinary,
    ToolchainUnavailable,
)
from .x86 import (
    CONFUSABLE_STACK_ADJUST,
    FILLER_INSTRUCTIONS,
    PROLOGUE_VARIANTS,
    encode_nop_run,
)

OPTIMIZATIONS = ("O0", "O1", "O2", "O3", "Os")
CATEGORIES = (
    "stack_protector",
    "stack_clash",
    "cfi",
    "safestack",
    "alignment",
    "patchable_entry",
    "baseline",
)
THREAT_TIERS = ("inadvertent", "adversarial")

ENTRY_PAD = "entry_pad"
EPILOGUE_PAD = "epilogue_pad"

MANIFEST_HEADER = ("path", "package", "toolchain", "version", "arch", "opt", "config", "dataset")


@dataclass(frozen=True)
class AttackConfiguration:
    """One compiler-driver configuration of the attack matrix."""

    name: str
    flags: tuple[str, ...]
    category: str
    threat_tier: str = "inadvertent"
    total_nops: int | None = None
    before_entry: int | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.threat_tier not in THREAT_TIERS:
            raise ValueError(f"unknown threat tier {self.threat_tier!r}")
        if self.category == "patchable_entry" and (
            self.total_nops is None or self.before_entry is None
        ):
            raise ValueError("patchable_entry configurations need pad parameters")


STANDARD_CONFIGURATIONS: tuple[AttackConfiguration, ...] = (
    AttackConfiguration("baseline", (), "baseline"),
    AttackConfiguration("stack_protector", ("-fstack-protector-strong",), "stack_protector"),
    AttackConfiguration("stack_clash", ("-fstack-clash-protection",), "stack_clash"),
    AttackConfiguration("cfi", ("-fcf-protection=full",), "cfi"),
    AttackConfiguration("safestack", ("-fsanitize=safe-stack",), "safestack"),
    AttackConfiguration("alignment32", ("-falign-functions=32",), "alignment"),
    AttackConfiguration(
        "nop4",
        ("-fpatchable-function-entry=4,4",),
        "patchable_entry",
        total_nops=4,
        before_entry=4,
    ),
)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    package: str
    toolchain_id: str
    toolchain_version: str
    architecture: str
    optimization: str
    configuration: str
    dataset_tag: str

    @property
    def key(self) -> tuple[str, str, str, str, str]:
        return (
            self.package,
            self.toolchain_id,
            self.toolchain_version,
            self.optimization,
            self.configuration,
        )

    @property
    def binary_id(self) -> str:
        return Path(self.path).stem


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = Path(".")

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.path)
        return path if path.is_absolute() else self.root / path

    def binary_ids(self) -> list[str]:
        return [e.binary_id for e in self.entries]


def write_manifest(manifest: CorpusManifest, path: str | Path, config_hash: str | None = None) -> None:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash: {config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for entry in manifest.entries:
        writer.writerow(
            [
                entry.path,
                entry.package,
                entry.toolchain_id,
                entry.toolchain_version,
                entry.architecture,
                entry.optimization,
                entry.configuration,
                entry.dataset_tag,
            ]
        )
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def ingest_manifest(path: str | Path, validate_images: bool = True) -> CorpusManifest:
    """Read and validate a manifest CSV; reports violations with line numbers."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestParse(f"cannot read manifest: {exc}") from exc

    rows = []
    lineno_of_row = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#") or not line.strip():
            continue
        rows.append(line)
        lineno_of_row.append(lineno)
    if not rows:
        raise ManifestParse("header required", line=1)

    parsed = list(csv.reader(rows))
    if tuple(parsed[0]) != MANIFEST_HEADER:
        raise ManifestParse(
            f"bad header {parsed[0]!r}, expected {','.join(MANIFEST_HEADER)}",
            line=lineno_of_row[0],
        )

    entries: list[ManifestEntry] = []
    seen: dict[tuple, int] = {}
    for row, lineno in zip(parsed[1:], lineno_of_row[1:]):
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestParse(f"expected {len(MANIFEST_HEADER)} columns, got {len(row)}", lineno)
        entry = ManifestEntry(*row)
        if entry.optimization not in OPTIMIZATIONS:
            raise ManifestParse(f"unknown optimization {entry.optimization!r}", lineno)
        if entry.key in seen:
            raise DuplicateEntry(
                f"duplicate key {entry.key!r} (first at line {seen[entry.key]})", lineno
            )
        seen[entry.key] = lineno
        entries.append(entry)

    manifest = CorpusManifest(entries=tuple(entries), root=path.parent)
    if validate_images:
        for entry, lineno in zip(entries, lineno_of_row[1:]):
            target = manifest.resolve(entry)
            if not target.is_file():
                raise MissingBinary(f"binary {entry.path!r} does not exist", lineno)
            try:
                parse_code_image(target.read_bytes(), image_id=entry.binary_id)
            except Exception as exc:
                raise MissingBinary(f"binary {entry.path!r} does not parse: {exc}", lineno)
    return manifest


def load_corpus(
    manifest: CorpusManifest, labels_dir: str | Path | None = None
) -> list[tuple[CodeImage, LabelMap]]:
    """Load every manifest binary with its ground truth.

    Labels come from a sibling `<stem>.labels` file when present (the
    generator writes them); otherwise ground truth is re-extracted from the
    binary's symbol table.
    """
    from .binary import load_label_map  # local import to keep module load light

    pairs = []
    for entry in manifest.entries:
        target = manifest.resolve(entry)
        image = load_code_image(target, image_id=entry.binary_id)
        label_path = None
        if labels_dir is not None:
            candidate = Path(labels_dir) / f"{entry.binary_id}.labels"
            if candidate.is_file():
                label_path = candidate
        if label_path is None:
            candidate = target.with_suffix(".labels")
            if candidate.is_file():
                label_path = candidate
        if label_path is not None:
            lm = load_label_map(label_path, binary_id=entry.binary_id, domain=image.domain())
        else:
            _, lm = extract_ground_truth(image, function_symbols(image.to_bytes()))
        pairs.append((image, lm))
    return pairs


# ---------------------------------------------------------------------------
# Synthetic corpus generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Generator configuration: which prologue/epilogue variants to emit, how
    functions are packed, and where NOP pads go."""

    n_binaries: int = 4
    functions_per_binary: int = 30
    variants: tuple[str, ...] = ("plain",)
    body_min: int = 3
    body_max: int = 10
    alignment: int = 16  # 0 packs functions tightly
    pad_size: int = 0  # 0 emits no pads
    pad_position: str = EPILOGUE_PAD
    confusable_rate: float = 0.0
    package: str = "synth"
    dataset_tag: str = "Normal"
    config_name: str = ""
    text_address: int = 0x401000

    def __post_init__(self):
        if self.n_binaries < 1:
            raise InvalidSpec("n_binaries must be >= 1")
        if self.functions_per_binary < 1:
            raise InvalidSpec("functions_per_binary must be >= 1")
        if not self.variants:
            raise InvalidSpec("at least one variant category required")
        for variant in self.variants:
            if variant not in PROLOGUE_VARIANTS:
                raise InvalidSpec(f"unknown variant {variant!r}")
        if not 0 <= self.body_min <= self.body_max:
            raise InvalidSpec("need 0 <= body_min <= body_max")
        if self.pad_size < 0:
            raise InvalidSpec("pad smaller than the smallest NOP encoding")
        if self.pad_position not in (ENTRY_PAD, EPILOGUE_PAD):
            raise InvalidSpec(f"unknown pad position {self.pad_position!r}")
        if self.alignment < 0 or (self.alignment & (self.alignment - 1)):
            if self.alignment not in (0, 1):
                raise InvalidSpec("alignment must be 0/1 or a power of two")
        if not 0.0 <= self.confusable_rate <= 1.0:
            raise InvalidSpec("confusable_rate must be within [0, 1]")
        if not self.config_name:
            object.__setattr__(self, "config_name", self._default_config_name())

    def _default_config_name(self) -> str:
        name = "synth-" + "+".join(self.variants)
        if self.pad_size:
            suffix = "ep" if self.pad_position == EPILOGUE_PAD else "en"
            name += f"-{suffix}{self.pad_size}"
        if self.alignment in (0, 1):
            name += "-tight"
        return name

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"unknown spec fields: {sorted(unknown)}")
        if "variants" in data:
            data["variants"] = tuple(data["variants"])
        return cls(**data)

    def to_json(self) -> str:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["variants"] = list(self.variants)
        return json.dumps(data, sort_keys=True, indent=1) + "\n"


def _assemble_function(rng: random.Random, spec: SyntheticSpec, index: int) -> bytes:
    variant = spec.variants[rng.randrange(len(spec.variants))]
    prologue, epilogue = PROLOGUE_VARIANTS[variant]
    body = bytearray()
    for _ in range(rng.randint(spec.body_min, spec.body_max)):
        if spec.confusable_rate and rng.random() < spec.confusable_rate:
            body += CONFUSABLE_STACK_ADJUST
        else:
            body += FILLER_INSTRUCTIONS[rng.randrange(len(FILLER_INSTRUCTIONS))]
    return prologue + bytes(body) + epilogue


def _generate_binary(spec: SyntheticSpec, seed: int, index: int) -> tuple[bytes, LabelMap]:
    rng = random.Random(seed * 1_000_003 + index)
    align = spec.alignment if spec.alignment > 1 else 1
    text = bytearray()
    records: list[FunctionRecord] = []
    base = spec.text_address
    for fn_idx in range(spec.functions_per_binary):
        code = _assemble_function(rng, spec, fn_idx)
        if spec.pad_size and spec.pad_position == ENTRY_PAD:
            # keep the entry aligned with the pad butted against it
            start = len(text) + spec.pad_size
            start = -(-start // align) * align
            gap = start - spec.pad_size - len(text)
            text += encode_nop_run(gap)
            text += encode_nop_run(spec.pad_size)
        else:
            start = -(-len(text) // align) * align
            text += encode_nop_run(start - len(text))
        records.append(FunctionRecord(base + len(text), len(code), f"fn{fn_idx:04d}"))
        text += code
        if spec.pad_size and spec.pad_position == EPILOGUE_PAD:
            text += encode_nop_run(spec.pad_size)

    label_map = LabelMap(
        binary_id="",  # fixed by the caller once the file name is known
        starts=tuple(r.start for r in records),
        ends=tuple(r.end for r in records),
        domain=((base, base + len(text) - 1),),
    )
    return build_elf(bytes(text), records, text_address=base), label_map


def generate_synthetic_corpus(
    spec: SyntheticSpec, seed: int, out_dir: str | Path
) -> tuple[list[Path], dict[str, LabelMap], CorpusManifest]:
    """Emit `spec.n_binaries` deterministic ELF files with their label maps
    and a manifest. Equal (spec, seed) yield bit-identical outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    label_maps: dict[str, LabelMap] = {}
    entries: list[ManifestEntry] = []
    for index in range(spec.n_binaries):
        stem = f"{spec.package}-{index:03d}_{spec.config_name}"
        raw, lm = _generate_binary(spec, seed, index)
        lm = replace(lm, binary_id=stem)
        path = out_dir / f"{stem}.elf"
        path.write_bytes(raw)
        store_label_map(lm, out_dir / f"{stem}.labels")
        paths.append(path)
        label_maps[stem] = lm
        entries.append(
            ManifestEntry(
                path=f"{stem}.elf",
                package=f"{spec.package}-{index:03d}",
                toolchain_id="synth",
                toolchain_version="1",
                architecture="x86_64",
                optimization="O0",
                configuration=spec.config_name,
                dataset_tag=spec.dataset_tag,
            )
        )
    manifest = CorpusManifest(entries=tuple(entries), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return paths, label_maps, manifest


# ---------------------------------------------------------------------------
# Real-toolchain corpus builder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Toolchain:
    id: str
    version: str
    cc: str

    def resolve(self) -> str:
        override = os.environ.get(f"BB_CC_{self.id.upper()}")
        command = override or self.cc
        located = shutil.which(command)
        if located is None:
            raise ToolchainUnavailable(f"toolchain {self.id!r}: compiler {command!r} not found")
        return located


@dataclass(frozen=True)
class SourcePackage:
    name: str
    root: Path

    def sources(self) -> list[Path]:
        return sorted(self.root.glob("*.c"))


PROBE_SOURCE = """\
#include <stdio.h>

static int mix(int a, int b) {
    char buf[32];
    snprintf(buf, sizeof buf, "%d", a * 31 + b);
    return buf[0] + a - b;
}

int add(int a, int b) { return a + b; }

int main(int argc, char **argv) {
    (void)argv;
    return add(mix(argc, 2), argc) & 0x7f;
}
"""


def make_probe_package(directory: str | Path, name: str = "probe") -> SourcePackage:
    root = Path(directory) / name
    root.mkdir(parents=True, exist_ok=True)
    (root / "main.c").write_text(PROBE_SOURCE, encoding="ascii")
    return SourcePackage(name=name, root=root)


@dataclass(frozen=True)
class BuildFailure:
    package: str
    toolchain: str
    optimization: str
    configuration: str
    reason: str


def _probe_config(cc: str, config: AttackConfiguration, scratch: Path) -> str | None:
    probe = scratch / "cfg_probe.c"
    probe.write_text("int main(void){return 0;}\n", encoding="ascii")
    out = scratch / "cfg_probe.elf"
    cmd = [cc, "-g", *config.flags, str(probe), "-o", str(out)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        return proc.stderr.strip().splitlines()[-1] if proc.stderr.strip() else "probe failed"
    return None


def build_corpus(
    sources: list[SourcePackage],
    toolchains: list[Toolchain],
    configs: list[AttackConfiguration],
    out_dir: str | Path,
    optimizations: tuple[str, ...] = ("O0",),
    dataset_tag: str = "Normal",
) -> tuple[CorpusManifest, list[BuildFailure]]:
    """Compile the full <package, toolchain, config, optimization> matrix.

    Debug info is kept and nothing is stripped. Individual build failures are
    recorded and skipped; only a fully empty result is an error.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for opt in optimizations:
        if opt not in OPTIMIZATIONS:
            raise ValueError(f"unknown optimization level {opt!r}")

    entries: list[ManifestEntry] = []
    failures: list[BuildFailure] = []
    for toolchain in toolchains:
        cc = toolchain.resolve()
        usable_configs = []
        for config in configs:
            reason = _probe_config(cc, config, out_dir)
            if reason is None:
                usable_configs.append(config)
            else:
                for package in sources:
                    for opt in optimizations:
                        failures.append(
                            BuildFailure(package.name, toolchain.id, opt, config.name,
                                         f"config probe failed: {reason}")
                        )
        for package in sources:
            source_files = package.sources()
            for config in usable_configs:
                for opt in optimizations:
                    stem = (
                        f"{package.name}_{toolchain.id}-{toolchain.version}"
                        f"_x86_64_{opt}_{config.name}"
                    )
                    target = out_dir / f"{stem}.elf"
                    cmd = [
                        cc, "-g", f"-{opt}", *config.flags,
                        *[str(s) for s in source_files], "-o", str(target),
                    ]
                    proc = subprocess.run(cmd, capture_output=True, text=True)
                    if proc.returncode != 0 or not target.is_file():
                        reason = proc.stderr.strip().splitlines()[-1] if proc.stderr.strip() else "cc failed"
                        failures.append(
                            BuildFailure(package.name, toolchain.id, opt, config.name, reason)
                        )
                        continue
                    entries.append(
                        ManifestEntry(
                            path=f"{stem}.elf",
                            package=package.name,
                            toolchain_id=toolchain.id,
                            toolchain_version=toolchain.version,
                            architecture="x86_64",
                            optimization=opt,
                            configuration=config.name,
                            dataset_tag=dataset_tag,
                        )
                    )
    if not entries:
        raise AllBuildsFailed("no corpus entry could be built")

    manifest = CorpusManifest(entries=tuple(entries), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    if failures:
        with (out_dir / "build_failures.csv").open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["package", "toolchain", "opt", "config", "reason"])
            for failure in failures:
                writer.writerow(
                    [failure.package, failure.toolchain, failure.optimization,
                     failure.configuration, failure.reason]
                )
    return manifest, failures


# ---------------------------------------------------------------------------
# BinKit-layout import
# ---------------------------------------------------------------------------

BINKIT_DATASETS = ("Normal", "SizeOpt", "NoInline", "PIE", "Obfuscate", "CFI", "ASE18")


def _parse_binkit_name(stem: str) -> tuple[str, str, str, str, str, str] | None:
    parts = stem.split("_")
    if len(parts) < 5:
        return None
    package, comp = parts[0], parts[1]
    opt, name = parts[-2], parts[-1]
    arch = "_".join(parts[2:-2])
    if opt not in OPTIMIZATIONS or "-" not in comp:
        return None
    toolchain_id, version = comp.rsplit("-", 1)
    return package, toolchain_id, version, arch, opt, name


def import_binkit(directory: str | Path) -> CorpusManifest:
    """Convert a BinKit-layout directory tree (one subdirectory per dataset)
    into a manifest. Unrecognized file names are skipped."""
    directory = Path(directory)
    entries: list[ManifestEntry] = []
    for path in sorted(directory.rglob("*.elf")):
        parsed = _parse_binkit_name(path.stem)
        if parsed is None:
            continue
        package, toolchain_id, version, arch, opt, name = parsed
        dataset = path.parent.name if path.parent != directory else "Normal"
        entries.append(
            ManifestEntry(
                path=str(path.relative_to(directory)),
                package=f"{package}/{name}",  # keeps the key unique per program
                toolchain_id=toolchain_id,
                toolchain_version=version,
                architecture=arch,
                optimization=opt,
                configuration=dataset.lower(),
                dataset_tag=dataset,
            )
        )
    return CorpusManifest(entries=tuple(entries), root=directory)
