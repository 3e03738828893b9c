"""Length-preserving injection of byte payloads into compiler-emitted NOP
pads, with automated safety verification."""

from __future__ import annotations

from dataclasses import dataclass

from .binary import CodeImage, LabelMap
from .errors import IncompatibleGuard, OverlappingPlans, PadMismatch, PayloadTooLarge
from .x86 import (
    JMP_SHORT,
    MOV_EAX_IMM32,
    RETURN_OPCODES,
    encode_nop_run,
    is_nop_run,
    nop_run_length,
)

MODE_JUMP = "jump_over_immediate"
MODE_VERBATIM = "verbatim_after_return"
MODES = (MODE_JUMP, MODE_VERBATIM)

ENTRY_PAD = "entry_pad"
EPILOGUE_PAD = "epilogue_pad"

GUARD_AFTER_RETURN = "after_return"
GUARD_BEFORE_ENTRY = "before_entry"

_CARRIER_WIDTH = 4  # imm32 payload bytes per mov carrier


@dataclass(frozen=True)
class PadRegion:
    address: int
    length: int
    position: str  # entry_pad | epilogue_pad
    guard: str  # after_return | before_entry

    @property
    def end(self) -> int:
        """Address one past the pad."""
        return self.address + self.length


@dataclass(frozen=True)
class InjectionPlan:
    pad: PadRegion
    mode: str
    payload: bytes
    rendered: bytes

    def __post_init__(self):
        if len(self.rendered) != self.pad.length:
            raise ValueError("rendered bytes must fill the pad exactly")


def scan_pads(
    image: CodeImage, gt: LabelMap, prefer: str = EPILOGUE_PAD
) -> list[PadRegion]:
    """Maximal canonical-NOP runs adjacent to ground-truth boundaries.

    A run beginning right after a function's final return byte is an epilogue
    pad; a run ending right before a function start is an entry pad. A run
    between two functions qualifies as both, and `prefer` picks its
    classification; the default keeps the after-return guard, which is what
    verbatim injection needs.
    """
    starts = gt.start_set
    ends = gt.end_set
    pads: list[PadRegion] = []
    for sec in image.executable_sections:
        data = sec.data
        base = sec.virtual_address
        pos = 0
        while pos < len(data):
            if data[pos] not in (0x90, 0x66, 0x0F):
                pos += 1
                continue
            run = nop_run_length(data, pos)
            if run == 0:
                pos += 1
                continue
            addr = base + pos
            after_return = (
                pos > 0 and addr - 1 in ends and data[pos - 1] in RETURN_OPCODES
            )
            before_entry = addr + run in starts
            if after_return and (prefer == EPILOGUE_PAD or not before_entry):
                pads.append(PadRegion(addr, run, EPILOGUE_PAD, GUARD_AFTER_RETURN))
            elif before_entry:
                pads.append(PadRegion(addr, run, ENTRY_PAD, GUARD_BEFORE_ENTRY))
            pos += run
    pads.sort(key=lambda p: p.address)
    return pads


def jump_carrier_size(payload_length: int) -> int:
    """Minimum pad size for a jump-over-immediate injection of this payload."""
    carriers = -(-payload_length // _CARRIER_WIDTH)
    return 2 + 5 * carriers


def render_jump_over_immediate(payload: bytes, pad_length: int) -> bytes:
    carriers = -(-len(payload) // _CARRIER_WIDTH)
    displacement = 5 * carriers
    needed = 2 + displacement
    if displacement > 0x7F or needed > pad_length:
        raise PayloadTooLarge(needed, pad_length)
    rendered = bytearray([JMP_SHORT, displacement])
    for i in range(carriers):
        chunk = payload[i * _CARRIER_WIDTH : (i + 1) * _CARRIER_WIDTH]
        rendered.append(MOV_EAX_IMM32)
        rendered += chunk.ljust(_CARRIER_WIDTH, b"\x00")
    rendered += encode_nop_run(pad_length - len(rendered))
    return bytes(rendered)


def decode_jump_over_immediate(rendered: bytes) -> bytes | None:
    """Recover the carried payload, or None if the shape is invalid."""
    if len(rendered) < 7 or rendered[0] != JMP_SHORT:
        return None
    displacement = rendered[1]
    pos = 2
    payload = bytearray()
    while pos < len(rendered) and rendered[pos] == MOV_EAX_IMM32:
        if pos + 5 > len(rendered):
            return None
        payload += rendered[pos + 1 : pos + 5]
        pos += 5
    if pos - 2 != displacement or not payload:
        return None
    tail = rendered[pos:]
    if tail and not is_nop_run(tail):
        return None
    return bytes(payload)


def plan_injection(pad: PadRegion, payload: bytes, mode: str) -> InjectionPlan:
    """Render the pad-sized byte string carrying `payload` in the given mode.

    Verbatim placement demands an after-return guard; the jump form works
    behind either guard. Unused pad tail is refilled with canonical NOPs.
    """
    if mode not in MODES:
        raise ValueError(f"unknown injection mode {mode!r}")
    if not payload:
        raise ValueError("empty payload")
    if mode == MODE_VERBATIM:
        if pad.guard != GUARD_AFTER_RETURN:
            raise IncompatibleGuard(
                f"verbatim payload needs an after-return pad, got {pad.guard}"
            )
        if len(payload) > pad.length:
            raise PayloadTooLarge(len(payload), pad.length)
        rendered = payload + encode_nop_run(pad.length - len(payload))
    else:
        rendered = render_jump_over_immediate(payload, pad.length)
    return InjectionPlan(pad=pad, mode=mode, payload=payload, rendered=rendered)


def apply_injections(image: CodeImage, plans: list[InjectionPlan]) -> CodeImage:
    """Overwrite each plan's pad with its rendered bytes.

    The output is byte-identical to the input outside the union of pad
    ranges; file size and section geometry are unchanged.
    """
    ordered = sorted(plans, key=lambda p: p.pad.address)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.pad.address < prev.pad.end:
            raise OverlappingPlans(
                f"pads at {prev.pad.address:#x} and {cur.pad.address:#x} overlap"
            )
    for plan in ordered:
        current = image.bytes_at(plan.pad.address, plan.pad.length)
        if not is_nop_run(current):
            raise PadMismatch(f"pad at {plan.pad.address:#x} is no longer a NOP run")
    return image.with_patches([(p.pad.address, p.rendered) for p in ordered])


@dataclass(frozen=True)
class Violation:
    check: str
    address: int
    detail: str


@dataclass(frozen=True)
class VerificationReport:
    violations: tuple[Violation, ...]

    @property
    def passed(self) -> bool:
        return not self.violations


def verify_injection(
    original: CodeImage, mutated: CodeImage, plans: list[InjectionPlan]
) -> VerificationReport:
    """Check size equality, out-of-pad byte equality, per-plan rendered-byte
    presence, and guard validity. Failures are reported, not raised."""
    violations: list[Violation] = []
    orig_raw, mut_raw = original.to_bytes(), mutated.to_bytes()
    if len(orig_raw) != len(mut_raw):
        violations.append(
            Violation("size", 0, f"file size changed: {len(orig_raw)} -> {len(mut_raw)}")
        )
        return VerificationReport(tuple(violations))

    orig_geo = [(s.name, s.file_offset, s.virtual_address, s.size, s.executable)
                for s in original.sections]
    mut_geo = [(s.name, s.file_offset, s.virtual_address, s.size, s.executable)
               for s in mutated.sections]
    if orig_geo != mut_geo:
        violations.append(Violation("geometry", 0, "section geometry changed"))

    pad_file_ranges: list[tuple[int, int]] = []
    for plan in plans:
        sec = original.section_at(plan.pad.address)
        if sec is None:
            violations.append(
                Violation("pad-bounds", plan.pad.address, "pad outside executable sections")
            )
            continue
        off = sec.file_offset + (plan.pad.address - sec.virtual_address)
        pad_file_ranges.append((off, off + plan.pad.length))
    pad_file_ranges.sort()

    def in_pad(file_off: int) -> bool:
        return any(lo <= file_off < hi for lo, hi in pad_file_ranges)

    for file_off, (a, b) in enumerate(zip(orig_raw, mut_raw)):
        if a != b and not in_pad(file_off):
            violations.append(
                Violation("out-of-pad", file_off, f"byte at file offset {file_off:#x} changed")
            )

    for plan in plans:
        got = mutated.bytes_at(plan.pad.address, plan.pad.length)
        if got != plan.rendered:
            violations.append(
                Violation("rendered", plan.pad.address, "pad does not hold the rendered bytes")
            )
            continue
        if plan.mode == MODE_VERBATIM:
            guard_byte = mutated.bytes_at(plan.pad.address - 1, 1)[0]
            if guard_byte not in RETURN_OPCODES:
                violations.append(
                    Violation(
                        "guard", plan.pad.address,
                        f"byte before verbatim payload is {guard_byte:#04x}, not a return",
                    )
                )
        else:
            decoded = decode_jump_over_immediate(got)
            carriers = -(-len(plan.payload) // _CARRIER_WIDTH)
            expected = plan.payload.ljust(carriers * _CARRIER_WIDTH, b"\x00")
            if decoded != expected:
                violations.append(
                    Violation("guard", plan.pad.address, "jump/carrier shape invalid")
                )
    return VerificationReport(tuple(violations))
