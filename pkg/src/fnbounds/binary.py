"""Binary code model: ELF64 parsing, byte-level ground truth, label maps.

Only ELF64 little-endian is supported; parsing is done with `struct` so the
toolkit has no binary-format dependencies. A matching minimal ELF writer is
provided for the synthetic corpus generator.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    MalformedBinary,
    NoExecutableSection,
    OverlappingFunctions,
    StrippedBinary,
)

ELF_MAGIC = b"\x7fELF"

SHT_NULL = 0
SHT_PROGBITS = 1
SHT_SYMTAB = 2
SHT_STRTAB = 3
SHT_NOBITS = 8

SHF_WRITE = 0x1
SHF_ALLOC = 0x2
SHF_EXECINSTR = 0x4

STT_FUNC = 2
STB_GLOBAL = 1

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_SHDR = struct.Struct("<IIQQQQIIQQ")
_SYM = struct.Struct("<IBBHQQ")


@dataclass(frozen=True)
class Section:
    name: str
    file_offset: int
    virtual_address: int
    data: bytes
    executable: bool

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def end_address(self) -> int:
        """Address of the last byte (inclusive)."""
        return self.virtual_address + len(self.data) - 1

    def contains(self, address: int) -> bool:
        return self.virtual_address <= address <= self.end_address and self.size > 0


@dataclass(frozen=True)
class CodeImage:
    """Executable bytes of one binary plus section/address geometry."""

    id: str
    sections: tuple[Section, ...]
    entry_point: int
    raw: bytes = field(repr=False)

    @property
    def executable_sections(self) -> tuple[Section, ...]:
        return tuple(s for s in self.sections if s.executable)

    def domain(self) -> tuple[tuple[int, int], ...]:
        """Inclusive (lo, hi) address ranges of the executable sections."""
        return tuple(
            sorted((s.virtual_address, s.end_address) for s in self.executable_sections)
        )

    def section_at(self, address: int) -> Section | None:
        for sec in self.executable_sections:
            if sec.contains(address):
                return sec
        return None

    def bytes_at(self, address: int, length: int) -> bytes:
        sec = self.section_at(address)
        if sec is None or not sec.contains(address + length - 1):
            raise ValueError(f"address range {address:#x}+{length} not in one executable section")
        off = address - sec.virtual_address
        return sec.data[off : off + length]

    def to_bytes(self) -> bytes:
        return self.raw

    def with_patches(self, patches: list[tuple[int, bytes]]) -> "CodeImage":
        """New image with `patches` [(virtual address, bytes)] applied in both
        the section view and the underlying file bytes; geometry unchanged."""
        raw = bytearray(self.raw)
        for address, blob in patches:
            sec = self.section_at(address)
            if sec is None or not sec.contains(address + len(blob) - 1):
                raise ValueError(f"patch at {address:#x} not inside one executable section")
            off = address - sec.virtual_address
            raw[sec.file_offset + off : sec.file_offset + off + len(blob)] = blob
        return parse_code_image(bytes(raw), image_id=self.id)


@dataclass(frozen=True, order=True)
class FunctionRecord:
    """One function: name, start virtual address, size in bytes (>= 1)."""

    start: int
    size: int
    name: str

    @property
    def end(self) -> int:
        """Address of the function's last byte."""
        return self.start + self.size - 1


@dataclass(frozen=True)
class LabelMap:
    """Per-byte labels: explicit S/E address sets, N implicit over the domain."""

    binary_id: str
    starts: tuple[int, ...]
    ends: tuple[int, ...]
    domain: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(sorted(set(self.starts))))
        object.__setattr__(self, "ends", tuple(sorted(set(self.ends))))
        object.__setattr__(self, "domain", tuple(sorted(self.domain)))
        for addr in (*self.starts, *self.ends):
            if not self.covers(addr):
                raise ValueError(f"label at {addr:#x} outside the declared domain")

    def covers(self, address: int) -> bool:
        return any(lo <= address <= hi for lo, hi in self.domain)

    @property
    def start_set(self) -> frozenset[int]:
        return frozenset(self.starts)

    @property
    def end_set(self) -> frozenset[int]:
        return frozenset(self.ends)


def _cstr(blob: bytes, offset: int) -> str:
    end = blob.find(b"\x00", offset)
    if end < 0:
        end = len(blob)
    return blob[offset:end].decode("utf-8", errors="replace")


def parse_code_image(raw: bytes, image_id: str | None = None) -> CodeImage:
    """Parse an ELF64 little-endian binary into a CodeImage.

    Raises MalformedBinary for anything that is not well-formed ELF64/LE and
    NoExecutableSection when no section is executable.
    """
    if len(raw) < _EHDR.size:
        raise MalformedBinary("truncated ELF header")
    (
        ident,
        _etype,
        _machine,
        _version,
        entry,
        _phoff,
        shoff,
        _flags,
        _ehsize,
        _phentsize,
        _phnum,
        shentsize,
        shnum,
        shstrndx,
    ) = _EHDR.unpack_from(raw, 0)
    if ident[:4] != ELF_MAGIC:
        raise MalformedBinary("bad ELF magic")
    if ident[4] != 2 or ident[5] != 1:
        raise MalformedBinary("only ELF64 little-endian binaries are supported")
    if shnum == 0 or shoff == 0:
        raise MalformedBinary("no section header table")
    if shentsize != _SHDR.size:
        raise MalformedBinary(f"unexpected section header entry size {shentsize}")
    if shoff + shnum * _SHDR.size > len(raw):
        raise MalformedBinary("section header table out of bounds")

    headers = [_SHDR.unpack_from(raw, shoff + i * _SHDR.size) for i in range(shnum)]
    if shstrndx >= shnum:
        raise MalformedBinary("section name string table index out of range")
    str_off, str_size = headers[shstrndx][4], headers[shstrndx][5]
    if str_off + str_size > len(raw):
        raise MalformedBinary("section name string table out of bounds")
    shstrtab = raw[str_off : str_off + str_size]

    sections: list[Section] = []
    for name_off, sh_type, sh_flags, sh_addr, sh_offset, sh_size, *_ in headers:
        if sh_type in (SHT_NULL, SHT_NOBITS) or not sh_flags & SHF_ALLOC:
            continue
        if sh_offset + sh_size > len(raw):
            raise MalformedBinary(f"section data out of bounds at offset {sh_offset:#x}")
        sections.append(
            Section(
                name=_cstr(shstrtab, name_off),
                file_offset=sh_offset,
                virtual_address=sh_addr,
                data=raw[sh_offset : sh_offset + sh_size],
                executable=bool(sh_flags & SHF_EXECINSTR),
            )
        )

    execs = [s for s in sections if s.executable and s.size > 0]
    if not execs:
        raise NoExecutableSection("binary has no executable section")
    by_addr = sorted(execs, key=lambda s: s.virtual_address)
    for prev, cur in zip(by_addr, by_addr[1:]):
        if cur.virtual_address <= prev.end_address:
            raise MalformedBinary(
                f"executable sections overlap in address space: {prev.name} and {cur.name}"
            )
    by_off = sorted(execs, key=lambda s: s.file_offset)
    for prev, cur in zip(by_off, by_off[1:]):
        if cur.file_offset < prev.file_offset + prev.size:
            raise MalformedBinary(
                f"executable sections overlap in file space: {prev.name} and {cur.name}"
            )

    if image_id is None:
        image_id = hashlib.sha256(raw).hexdigest()[:16]
    return CodeImage(id=image_id, sections=tuple(sections), entry_point=entry, raw=raw)


def load_code_image(path: str | Path, image_id: str | None = None) -> CodeImage:
    path = Path(path)
    return parse_code_image(path.read_bytes(), image_id=image_id or path.stem)


def function_symbols(raw: bytes) -> list[FunctionRecord]:
    """Read STT_FUNC entries from the symbol table(s) of an ELF64 image."""
    if len(raw) < _EHDR.size or raw[:4] != ELF_MAGIC:
        raise MalformedBinary("bad ELF magic")
    _, _, _, _, _, _, shoff, _, _, _, _, shentsize, shnum, _ = _EHDR.unpack_from(raw, 0)
    if shoff == 0 or shnum == 0 or shentsize != _SHDR.size:
        raise MalformedBinary("no section header table")
    headers = [_SHDR.unpack_from(raw, shoff + i * _SHDR.size) for i in range(shnum)]

    records: list[FunctionRecord] = []
    for sh_type_idx, hdr in enumerate(headers):
        _name, sh_type, _flags, _addr, sh_offset, sh_size, sh_link, *_ = hdr
        if sh_type != SHT_SYMTAB:
            continue
        if sh_link >= shnum:
            raise MalformedBinary("symbol table string link out of range")
        st_off, st_size = headers[sh_link][4], headers[sh_link][5]
        strtab = raw[st_off : st_off + st_size]
        count = sh_size // _SYM.size
        for i in range(count):
            name_off, info, _other, _shndx, value, size = _SYM.unpack_from(
                raw, sh_offset + i * _SYM.size
            )
            if info & 0xF != STT_FUNC:
                continue
            records.append(FunctionRecord(start=value, size=size, name=_cstr(strtab, name_off)))
    return records


def extract_ground_truth(
    image: CodeImage, symbols: list[FunctionRecord]
) -> tuple[list[FunctionRecord], LabelMap]:
    """Derive the S/E ground-truth labeling from function symbols.

    S marks each function's first byte, E its last byte (start+size-1).
    Zero-size and out-of-section records are dropped; duplicate extents are
    collapsed; genuinely overlapping records are an error.
    """
    if not symbols:
        raise StrippedBinary(f"{image.id}: no function symbols")

    kept: dict[tuple[int, int], FunctionRecord] = {}
    for rec in symbols:
        if rec.size < 1:
            continue
        sec = image.section_at(rec.start)
        if sec is None or not sec.contains(rec.end):
            continue
        key = (rec.start, rec.size)
        if key not in kept or rec.name < kept[key].name:
            kept[key] = rec

    records = sorted(kept.values(), key=lambda r: (r.start, r.name))
    for prev, cur in zip(records, records[1:]):
        if cur.start <= prev.end:
            raise OverlappingFunctions(prev.name, cur.name)

    label_map = LabelMap(
        binary_id=image.id,
        starts=tuple(r.start for r in records),
        ends=tuple(r.end for r in records),
        domain=image.domain(),
    )
    return records, label_map


# ---------------------------------------------------------------------------
# Label-map text format: `<hex-address> <S|E>` per line, lowercase hex with a
# 0x prefix, ascending address order (S before E at equal addresses), LF line
# endings, trailing newline. N is implicit.
# ---------------------------------------------------------------------------

def render_label_map(label_map: LabelMap) -> str:
    entries = [(a, 0, "S") for a in label_map.starts] + [(a, 1, "E") for a in label_map.ends]
    entries.sort()
    return "".join(f"{addr:#x} {tag}\n" for addr, _, tag in entries)


def store_label_map(label_map: LabelMap, path: str | Path) -> None:
    Path(path).write_text(render_label_map(label_map), encoding="ascii", newline="")


def parse_label_lines(text: str) -> tuple[list[int], list[int]]:
    """Parse label-map grammar lines into (starts, ends); raises ValueError
    with the offending line number on malformed input."""
    starts: list[int] = []
    ends: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("S", "E"):
            raise ValueError(f"line {lineno}: expected '<hex-address> <S|E>', got {line!r}")
        try:
            addr = int(parts[0], 16)
        except ValueError:
            raise ValueError(f"line {lineno}: bad address {parts[0]!r}") from None
        (starts if parts[1] == "S" else ends).append(addr)
    return starts, ends


def load_label_map(
    path: str | Path,
    binary_id: str,
    domain: tuple[tuple[int, int], ...],
) -> LabelMap:
    starts, ends = parse_label_lines(Path(path).read_text(encoding="ascii"))
    return LabelMap(binary_id=binary_id, starts=tuple(starts), ends=tuple(ends), domain=domain)


# ---------------------------------------------------------------------------
# Minimal ELF64 writer used by the synthetic corpus generator.
# ---------------------------------------------------------------------------

def build_elf(
    text: bytes,
    functions: list[FunctionRecord],
    text_address: int = 0x401000,
    extra_sections: list[tuple[str, int, bytes, int]] = (),
) -> bytes:
    """Assemble a minimal unstripped ELF64 executable image.

    `extra_sections` entries are (name, address, data, sh_flags). The layout
    is fully deterministic: equal inputs produce identical bytes.
    """
    sections: list[tuple[str, int, int, bytes, int]] = []  # name, type, addr, data, flags
    sections.append((".text", SHT_PROGBITS, text_address, text, SHF_ALLOC | SHF_EXECINSTR))
    for name, addr, data, flags in extra_sections:
        sections.append((name, SHT_PROGBITS, addr, data, flags))

    strtab = bytearray(b"\x00")
    name_offsets = []
    for rec in functions:
        name_offsets.append(len(strtab))
        strtab += rec.name.encode("ascii") + b"\x00"

    symtab = bytearray(_SYM.size)  # index 0: undefined symbol
    for rec, name_off in zip(functions, name_offsets):
        info = (STB_GLOBAL << 4) | STT_FUNC
        symtab += _SYM.pack(name_off, info, 0, 1, rec.start, rec.size)

    shstrtab = bytearray(b"\x00")
    sh_name_offsets = {}
    for name in [s[0] for s in sections] + [".symtab", ".strtab", ".shstrtab"]:
        sh_name_offsets[name] = len(shstrtab)
        shstrtab += name.encode("ascii") + b"\x00"

    def _align(off: int, alignment: int) -> int:
        return (off + alignment - 1) & ~(alignment - 1)

    blobs: list[tuple[str, int, int, int, bytes, int, int, int]] = []
    # name, type, flags, addr, data, link, info, align
    offset = _EHDR.size
    layout: list[int] = []
    for name, sh_type, addr, data, flags in sections:
        offset = _align(offset, 16)
        layout.append(offset)
        blobs.append((name, sh_type, flags, addr, data, 0, 0, 16))
        offset += len(data)

    symtab_index = 1 + len(sections)
    strtab_index = symtab_index + 1
    for name, sh_type, data, link, info in (
        (".symtab", SHT_SYMTAB, bytes(symtab), strtab_index, 1),
        (".strtab", SHT_STRTAB, bytes(strtab), 0, 0),
        (".shstrtab", SHT_STRTAB, bytes(shstrtab), 0, 0),
    ):
        offset = _align(offset, 8)
        layout.append(offset)
        blobs.append((name, sh_type, 0, 0, data, link, info, 8))
        offset += len(data)

    shoff = _align(offset, 8)
    shnum = 1 + len(blobs)
    shstrndx = shnum - 1

    out = bytearray()
    ident = ELF_MAGIC + bytes([2, 1, 1, 0]) + b"\x00" * 8
    out += _EHDR.pack(
        ident, 2, 62, 1, text_address, 0, shoff, 0,
        _EHDR.size, 0, 0, _SHDR.size, shnum, shstrndx,
    )
    for data_off, blob in zip(layout, blobs):
        out += b"\x00" * (data_off - len(out))
        out += blob[4]
    out += b"\x00" * (shoff - len(out))

    out += _SHDR.pack(0, SHT_NULL, 0, 0, 0, 0, 0, 0, 0, 0)
    for data_off, (name, sh_type, flags, addr, data, link, info, align) in zip(layout, blobs):
        entsize = _SYM.size if sh_type == SHT_SYMTAB else 0
        out += _SHDR.pack(
            sh_name_offsets[name], sh_type, flags, addr, data_off, len(data),
            link, info, align, entsize,
        )
    return bytes(out)
