"""x86-64 byte-level building blocks: NOP encodings, prologue/epilogue
templates, and a conservative instruction-length decoder.

Everything here is encoding-level only; nothing executes code. The templates
and tables are cross-checked against GNU as/objdump in the test suite.
"""

from __future__ import annotations

# Canonical multi-byte NOP encodings, 1..9 bytes (as emitted by gas/gcc).
NOP_ENCODINGS: dict[int, bytes] = {
    1: bytes.fromhex("90"),
    2: bytes.fromhex("6690"),
    3: bytes.fromhex("0f1f00"),
    4: bytes.fromhex("0f1f4000"),
    5: bytes.fromhex("0f1f440000"),
    6: bytes.fromhex("660f1f440000"),
    7: bytes.fromhex("0f1f8000000000"),
    8: bytes.fromhex("0f1f840000000000"),
    9: bytes.fromhex("660f1f8400000000 00".replace(" ", "")),
}

_NOPS_LONGEST_FIRST = sorted(NOP_ENCODINGS.values(), key=len, reverse=True)

RETURN_OPCODES: frozenset[int] = frozenset({0xC3})

# Short relative jump and the mov-reg-imm32 carrier used for hidden payloads.
JMP_SHORT = 0xEB
MOV_EAX_IMM32 = 0xB8


def encode_nop_run(length: int) -> bytes:
    """Fill `length` bytes with canonical NOPs, longest encodings first."""
    if length < 0:
        raise ValueError("negative NOP run length")
    out = bytearray()
    remaining = length
    while remaining > 0:
        take = min(remaining, 9)
        out += NOP_ENCODINGS[take]
        remaining -= take
    return bytes(out)


def nop_run_length(data: bytes, start: int = 0, limit: int | None = None) -> int:
    """Length of the maximal canonical-NOP run at `start` (0 if none)."""
    end = len(data) if limit is None else min(len(data), start + limit)
    pos = start
    while pos < end:
        for enc in _NOPS_LONGEST_FIRST:
            if data[pos : pos + len(enc)] == enc and pos + len(enc) <= end:
                pos += len(enc)
                break
        else:
            break
    return pos - start


def is_nop_run(data: bytes) -> bool:
    return len(data) > 0 and nop_run_length(data) == len(data)


# ---------------------------------------------------------------------------
# Prologue / epilogue variants used by the synthetic corpus generator.
# ---------------------------------------------------------------------------

PLAIN_PROLOGUE = bytes.fromhex("554889e5")  # push rbp; mov rbp,rsp
PLAIN_EPILOGUE = bytes.fromhex("5dc3")  # pop rbp; ret

ENDBR64 = bytes.fromhex("f30f1efa")

# sub rsp,8 -- the mid-function stack adjustment that confuses detectors
# trained on frameless prologues.
CONFUSABLE_STACK_ADJUST = bytes.fromhex("4883ec08")

PROLOGUE_VARIANTS: dict[str, tuple[bytes, bytes]] = {
    # name -> (prologue bytes, epilogue bytes)
    "plain": (PLAIN_PROLOGUE, PLAIN_EPILOGUE),
    "stack_protector": (
        bytes.fromhex(
            "55"  # push rbp
            "4889e5"  # mov rbp,rsp
            "4883ec20"  # sub rsp,0x20
            "64488b042528000000"  # mov rax,fs:0x28
            "488945f8"  # mov [rbp-0x8],rax
            "31c0"  # xor eax,eax
        ),
        bytes.fromhex(
            "488b45f8"  # mov rax,[rbp-0x8]
            "64482b042528000000"  # sub rax,fs:0x28
            "7405"  # je +5 (over the failure call)
            "e800000000"  # call __stack_chk_fail stub
            "c9"  # leave
            "c3"  # ret
        ),
    ),
    "stack_clash": (
        bytes.fromhex(
            "55"  # push rbp
            "4889e5"  # mov rbp,rsp
            "4881ec00100000"  # sub rsp,0x1000
            "48830c2400"  # or qword [rsp],0x0 (probe)
            "4883ec20"  # sub rsp,0x20
        ),
        bytes.fromhex("c9c3"),  # leave; ret
    ),
    "cfi": (
        ENDBR64 + PLAIN_PROLOGUE,  # endbr64; push rbp; mov rbp,rsp
        PLAIN_EPILOGUE,
    ),
    "safestack": (
        bytes.fromhex(
            "64488b042508000000"  # mov rax,fs:0x8 (unsafe stack pointer)
            "488d40f0"  # lea rax,[rax-0x10]
            "644889042508000000"  # mov fs:0x8,rax
            "55"  # push rbp
            "4889e5"  # mov rbp,rsp
        ),
        bytes.fromhex(
            "64488b042508000000"  # mov rax,fs:0x8
            "488d4010"  # lea rax,[rax+0x10]
            "644889042508000000"  # mov fs:0x8,rax
            "5d"  # pop rbp
            "c3"  # ret
        ),
    ),
    "frameless": (
        bytes.fromhex("4883ec08"),  # sub rsp,0x8
        bytes.fromhex("4883c408c3"),  # add rsp,0x8; ret
    ),
}

# Filler instructions for function bodies. None contains a return opcode and
# none begins or ends in a way that can recombine into a prologue pattern.
FILLER_INSTRUCTIONS: tuple[bytes, ...] = (
    bytes.fromhex("89c8"),  # mov eax,ecx
    bytes.fromhex("31d2"),  # xor edx,edx
    bytes.fromhex("488b45f8"),  # mov rax,[rbp-0x8]
    bytes.fromhex("488945f0"),  # mov [rbp-0x10],rax
    bytes.fromhex("85c0"),  # test eax,eax
    bytes.fromhex("01d0"),  # add eax,edx
    bytes.fromhex("83c001"),  # add eax,0x1
    bytes.fromhex("48ffc1"),  # inc rcx
    bytes.fromhex("8b55f4"),  # mov edx,[rbp-0xc]
    bytes.fromhex("4801c8"),  # add rax,rcx
    bytes.fromhex("29d0"),  # sub eax,edx
)


# ---------------------------------------------------------------------------
# Conservative x86-64 instruction length decoder.
#
# Used by the payload validity filter. The map errs toward rejecting: an
# encoding is reported valid only when its opcode/operand shape is listed
# below, so every accepted byte string must decode cleanly in a reference
# disassembler (fuzz-checked against objdump in the tests).
# ---------------------------------------------------------------------------

_SEGMENT_PREFIXES = {0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65}
_LEGACY_PREFIXES = _SEGMENT_PREFIXES | {0x66, 0xF2, 0xF3}

# imm codes: int = fixed byte count; "z" = 4 (2 with data16 prefix);
# "v" = 4 (8 with REX.W); "r8"/"r32" = relative branch displacements.
_NO_MODRM: dict[int, object] = {}
_MODRM: dict[int, object] = {}

for _base in (0x00, 0x08, 0x10, 0x18, 0x20, 0x28, 0x30, 0x38):
    for _off in range(4):
        _MODRM[_base + _off] = 0
    _NO_MODRM[_base + 4] = 1
    _NO_MODRM[_base + 5] = "z"

for _op in range(0x50, 0x60):
    _NO_MODRM[_op] = 0
_MODRM[0x63] = 0
_NO_MODRM[0x68] = "z"
_MODRM[0x69] = "z"
_NO_MODRM[0x6A] = 1
_MODRM[0x6B] = 1
for _op in range(0x70, 0x80):
    _NO_MODRM[_op] = "r8"
_MODRM[0x80] = 1
_MODRM[0x81] = "z"
_MODRM[0x83] = 1
for _op in range(0x84, 0x8C):
    _MODRM[_op] = 0
_MODRM[0x8D] = 0  # lea; mod==3 rejected below
for _op in range(0x90, 0x98):
    _NO_MODRM[_op] = 0
for _op in (0x98, 0x99, 0x9C, 0x9D, 0x9E, 0x9F):
    _NO_MODRM[_op] = 0
for _op in range(0xA4, 0xA8):
    _NO_MODRM[_op] = 0
for _op in range(0xAA, 0xB0):
    _NO_MODRM[_op] = 0
_NO_MODRM[0xA8] = 1
_NO_MODRM[0xA9] = "z"
for _op in range(0xB0, 0xB8):
    _NO_MODRM[_op] = 1
for _op in range(0xB8, 0xC0):
    _NO_MODRM[_op] = "v"
_MODRM[0xC0] = 1
_MODRM[0xC1] = 1
_NO_MODRM[0xC2] = 2
_NO_MODRM[0xC3] = 0
_MODRM[0xC6] = 1  # /0 only, checked below
_MODRM[0xC7] = "z"  # /0 only
_NO_MODRM[0xC8] = 3
_NO_MODRM[0xC9] = 0
_NO_MODRM[0xCC] = 0
_NO_MODRM[0xCD] = 1
for _op in range(0xD0, 0xD4):
    _MODRM[_op] = 0
_NO_MODRM[0xD7] = 0
for _op in range(0xE0, 0xE4):
    _NO_MODRM[_op] = "r8"
_NO_MODRM[0xE8] = "r32"
_NO_MODRM[0xE9] = "r32"
_NO_MODRM[0xEB] = "r8"
for _op in (0xF1, 0xF4, 0xF5, 0xF8, 0xF9, 0xFA, 0xFB, 0xFC, 0xFD):
    _NO_MODRM[_op] = 0
_MODRM[0xF6] = "test"  # imm8 when reg is 0/1
_MODRM[0xF7] = "testz"  # immz when reg is 0/1
_MODRM[0xFE] = "incdec"
_MODRM[0xFF] = "grp5"

_TWO_NO_MODRM: dict[int, object] = {0x05: 0, 0x0B: 0, 0x31: 0, 0xA2: 0}
for _op in range(0xC8, 0xD0):
    _TWO_NO_MODRM[_op] = 0
for _op in range(0x80, 0x90):
    _TWO_NO_MODRM[_op] = "r32"

_TWO_MODRM: dict[int, object] = {}
for _op in range(0x18, 0x20):
    _TWO_MODRM[_op] = 0  # hint-nop family (incl. canonical 0f 1f)
for _op in range(0x40, 0x50):
    _TWO_MODRM[_op] = 0  # cmovcc
for _op in range(0x90, 0xA0):
    _TWO_MODRM[_op] = 0  # setcc
for _op in (0xA3, 0xAB, 0xB3, 0xBB, 0xAF, 0xB0, 0xB1, 0xB6, 0xB7, 0xBE, 0xBF, 0xC0, 0xC1):
    _TWO_MODRM[_op] = 0
_TWO_MODRM[0xA4] = 1  # shld imm8
_TWO_MODRM[0xAC] = 1  # shrd imm8
_TWO_MODRM[0xA5] = 0
_TWO_MODRM[0xAD] = 0
_TWO_MODRM[0xBA] = "btgrp"  # imm8, /4../7 only

# SSE/MMX opcodes whose length is prefix-independent; validity with f2/f3
# is restricted to the combinations listed afterwards.
for _op in (0x10, 0x11, 0x28, 0x29, 0x54, 0x55, 0x56, 0x57):
    _TWO_MODRM[_op] = 0
for _op in (0x51, 0x58, 0x59, 0x5C, 0x5D, 0x5E, 0x5F):
    _TWO_MODRM[_op] = 0
for _op in range(0x60, 0x70):
    _TWO_MODRM[_op] = 0
_TWO_MODRM[0x70] = 1  # pshuf imm8
for _op in (0x74, 0x75, 0x76, 0x7E, 0x7F):
    _TWO_MODRM[_op] = 0

_F3_OK = {0x10, 0x11, 0x1E, 0x51, 0x58, 0x59, 0x5C, 0x5D, 0x5E, 0x5F, 0x6F, 0x7E, 0x7F}
_F2_OK = {0x10, 0x11, 0x51, 0x58, 0x59, 0x5C, 0x5D, 0x5E, 0x5F}
# MMX-era opcodes: bare encoding targets MMX registers; reject without a
# REX/66 story to keep the accept set objdump-clean.
_MMX_ONLY_BARE_REJECTED = set(range(0x60, 0x6F)) | {0x74, 0x75, 0x76}


def _modrm_tail_length(data: bytes, pos: int) -> tuple[int, int, int] | None:
    """Bytes consumed by modrm+sib+disp starting at pos, plus (mod, reg)."""
    if pos >= len(data):
        return None
    modrm = data[pos]
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    length = 1
    if mod != 3:
        if rm == 4:  # SIB follows
            if pos + 1 >= len(data):
                return None
            sib_base = data[pos + 1] & 7
            length += 1
            if mod == 0 and sib_base == 5:
                length += 4
        elif mod == 0 and rm == 5:  # RIP-relative disp32
            length += 4
        if mod == 1:
            length += 1
        elif mod == 2:
            length += 4
    return length, mod, reg


def decode_instruction_length(data: bytes, offset: int = 0) -> int | None:
    """Length of the single instruction at `offset`, or None if not
    recognized as a valid x86-64 encoding."""
    pos = offset
    seen_prefixes: set[int] = set()
    data16 = False
    rex = 0
    while pos < len(data) and data[pos] in _LEGACY_PREFIXES:
        if data[pos] in seen_prefixes:
            return None
        seen_prefixes.add(data[pos])
        data16 = data16 or data[pos] == 0x66
        pos += 1
    if pos < len(data) and 0x40 <= data[pos] <= 0x4F:
        rex = data[pos]
        pos += 1
    if pos >= len(data):
        return None

    opcode = data[pos]
    pos += 1
    two_byte = opcode == 0x0F
    if two_byte:
        if pos >= len(data):
            return None
        opcode = data[pos]
        pos += 1
        if 0xF3 in seen_prefixes and opcode not in _F3_OK:
            return None
        if 0xF2 in seen_prefixes and opcode not in _F2_OK:
            return None
        if opcode in _MMX_ONLY_BARE_REJECTED and not (
            data16 or 0xF3 in seen_prefixes
        ):
            return None
        no_modrm_map: dict[int, object] = _TWO_NO_MODRM
        modrm_map: dict[int, object] = _TWO_MODRM
    else:
        no_modrm_map = _NO_MODRM
        modrm_map = _MODRM

    imm: object
    if opcode in no_modrm_map:
        imm = no_modrm_map[opcode]
        mod = reg = None
    elif opcode in modrm_map:
        imm = modrm_map[opcode]
        tail = _modrm_tail_length(data, pos)
        if tail is None:
            return None
        consumed, mod, reg = tail
        pos += consumed
    else:
        return None

    if not two_byte:
        if opcode == 0x8D and mod == 3:
            return None  # lea needs a memory operand
        if opcode in (0xC6, 0xC7) and reg != 0:
            return None
        if opcode == 0xFE and reg is not None and reg > 1:
            return None
        if opcode == 0xFF and reg is not None:
            if reg == 7 or (reg in (3, 5) and mod == 3):
                return None
    else:
        if opcode == 0xBA and (reg is None or reg < 4):
            return None
        if opcode in (0x71, 0x72, 0x73):
            return None

    if imm == "test":
        imm = 1 if reg in (0, 1) else 0
    elif imm == "testz":
        imm = "z" if reg in (0, 1) else 0
    elif imm in ("incdec", "grp5", "btgrp"):
        imm = 1 if imm == "btgrp" else 0

    if imm == "z":
        imm_len = 2 if data16 else 4
    elif imm == "v":
        imm_len = 8 if rex & 0x08 else (2 if data16 else 4)
    elif imm == "r8":
        if data16:
            return None  # data16 branches rejected outright
        imm_len = 1
    elif imm == "r32":
        if data16:
            return None
        imm_len = 4
    else:
        imm_len = int(imm)  # type: ignore[arg-type]

    end = pos + imm_len
    if end > len(data):
        return None
    return end - offset


def is_single_valid_instruction(data: bytes) -> bool:
    """True when `data` decodes as exactly one complete valid instruction."""
    return len(data) > 0 and decode_instruction_length(data) == len(data)
