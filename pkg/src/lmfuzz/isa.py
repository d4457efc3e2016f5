"""RV32I + M instruction subset: encode, decode, assemble, disassemble.

The decoder is strict. Anything outside the subset (CSR, AMO, compressed,
fence variants other than ``fence iorw,iorw``) decodes to ``ILLEGAL``.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

__all__ = [
    "Instruction", "IllegalEncoding", "ILLEGAL", "DisasmReport",
    "FormatViolation", "ParseError", "MNEMONICS", "FORMATS", "SPECS",
    "encode", "decode", "disassemble_program", "assemble", "format_instr",
    "words_to_bytes", "bytes_to_words", "imm_range", "operand_fields",
    "MULDIV", "BRANCHES", "LOADS", "STORES",
]

ABI_NAMES = (
    "zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 a6 a7 "
    "s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6"
).split()
_REG_ALIASES = {name: i for i, name in enumerate(ABI_NAMES)}
_REG_ALIASES["fp"] = 8
_REG_ALIASES.update({f"x{i}": i for i in range(32)})


class FormatViolation(ValueError):
    """Operands do not satisfy the mnemonic's format."""


class ParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class _Spec:
    fmt: str
    opcode: int
    funct3: int = 0
    funct7: int = 0
    word: int = 0  # fixed encoding for operand-less instructions


# fmt: R, I, SH (shift-immediate), L (load), S, B, U, J, N (no operands)
SPECS: dict[str, _Spec] = {
    "LUI": _Spec("U", 0x37),
    "AUIPC": _Spec("U", 0x17),
    "JAL": _Spec("J", 0x6F),
    "JALR": _Spec("I", 0x67, 0),
    "BEQ": _Spec("B", 0x63, 0),
    "BNE": _Spec("B", 0x63, 1),
    "BLT": _Spec("B", 0x63, 4),
    "BGE": _Spec("B", 0x63, 5),
    "BLTU": _Spec("B", 0x63, 6),
    "BGEU": _Spec("B", 0x63, 7),
    "LB": _Spec("L", 0x03, 0),
    "LH": _Spec("L", 0x03, 1),
    "LW": _Spec("L", 0x03, 2),
    "LBU": _Spec("L", 0x03, 4),
    "LHU": _Spec("L", 0x03, 5),
    "SB": _Spec("S", 0x23, 0),
    "SH": _Spec("S", 0x23, 1),
    "SW": _Spec("S", 0x23, 2),
    "ADDI": _Spec("I", 0x13, 0),
    "SLTI": _Spec("I", 0x13, 2),
    "SLTIU": _Spec("I", 0x13, 3),
    "XORI": _Spec("I", 0x13, 4),
    "ORI": _Spec("I", 0x13, 6),
    "ANDI": _Spec("I", 0x13, 7),
    "SLLI": _Spec("SH", 0x13, 1, 0x00),
    "SRLI": _Spec("SH", 0x13, 5, 0x00),
    "SRAI": _Spec("SH", 0x13, 5, 0x20),
    "ADD": _Spec("R", 0x33, 0, 0x00),
    "SUB": _Spec("R", 0x33, 0, 0x20),
    "SLL": _Spec("R", 0x33, 1, 0x00),
    "SLT": _Spec("R", 0x33, 2, 0x00),
    "SLTU": _Spec("R", 0x33, 3, 0x00),
    "XOR": _Spec("R", 0x33, 4, 0x00),
    "SRL": _Spec("R", 0x33, 5, 0x00),
    "SRA": _Spec("R", 0x33, 5, 0x20),
    "OR": _Spec("R", 0x33, 6, 0x00),
    "AND": _Spec("R", 0x33, 7, 0x00),
    "MUL": _Spec("R", 0x33, 0, 0x01),
    "MULH": _Spec("R", 0x33, 1, 0x01),
    "MULHSU": _Spec("R", 0x33, 2, 0x01),
    "MULHU": _Spec("R", 0x33, 3, 0x01),
    "DIV": _Spec("R", 0x33, 4, 0x01),
    "DIVU": _Spec("R", 0x33, 5, 0x01),
    "REM": _Spec("R", 0x33, 6, 0x01),
    "REMU": _Spec("R", 0x33, 7, 0x01),
    "FENCE": _Spec("N", 0x0F, word=0x0FF0000F),
    "FENCE_I": _Spec("N", 0x0F, word=0x0000100F),
    "ECALL": _Spec("N", 0x73, word=0x00000073),
    "EBREAK": _Spec("N", 0x73, word=0x00100073),
}

MNEMONICS: tuple[str, ...] = tuple(SPECS)
FORMATS: dict[str, str] = {m: s.fmt for m, s in SPECS.items()}
MULDIV = frozenset(("MUL", "MULH", "MULHSU", "MULHU", "DIV", "DIVU", "REM", "REMU"))
BRANCHES = tuple(m for m, s in SPECS.items() if s.fmt == "B")
LOADS = tuple(m for m, s in SPECS.items() if s.fmt == "L")
STORES = tuple(m for m, s in SPECS.items() if s.fmt == "S")

# operand fields per format, in token/assembly order
_FIELDS = {
    "R": ("rd", "rs1", "rs2"),
    "I": ("rd", "rs1", "imm"),
    "SH": ("rd", "rs1", "imm"),
    "L": ("rd", "rs1", "imm"),
    "S": ("rs2", "rs1", "imm"),
    "B": ("rs1", "rs2", "imm"),
    "U": ("rd", "imm"),
    "J": ("rd", "imm"),
    "N": (),
}

_IMM_RANGES = {
    "I": (-2048, 2047),
    "L": (-2048, 2047),
    "S": (-2048, 2047),
    "SH": (0, 31),
    "B": (-4096, 4094),
    "U": (-(1 << 19), (1 << 19) - 1),
    "J": (-(1 << 20), (1 << 20) - 2),
}


def operand_fields(mnemonic: str) -> tuple[str, ...]:
    return _FIELDS[SPECS[mnemonic].fmt]


def imm_range(mnemonic: str) -> tuple[int, int] | None:
    return _IMM_RANGES.get(SPECS[mnemonic].fmt)


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    rd: int | None = None
    rs1: int | None = None
    rs2: int | None = None
    imm: int | None = None

    def __str__(self) -> str:
        return format_instr(self)

    def validate(self) -> None:
        spec = SPECS.get(self.mnemonic)
        if spec is None:
            raise FormatViolation(f"unknown mnemonic {self.mnemonic!r}")
        fields = _FIELDS[spec.fmt]
        for name in ("rd", "rs1", "rs2", "imm"):
            value = getattr(self, name)
            if name not in fields:
                if value is not None:
                    raise FormatViolation(f"{self.mnemonic} takes no {name}")
                continue
            if value is None:
                raise FormatViolation(f"{self.mnemonic} requires {name}")
            if name != "imm" and not (isinstance(value, int) and 0 <= value < 32):
                raise FormatViolation(f"{self.mnemonic}: bad register {name}={value!r}")
        if "imm" in fields:
            lo, hi = _IMM_RANGES[spec.fmt]
            if not (isinstance(self.imm, int) and lo <= self.imm <= hi):
                raise FormatViolation(f"{self.mnemonic}: immediate {self.imm} outside [{lo}, {hi}]")
            if spec.fmt in ("B", "J") and self.imm % 2:
                raise FormatViolation(f"{self.mnemonic}: odd branch/jump offset {self.imm}")

    @property
    def is_valid(self) -> bool:
        try:
            self.validate()
        except FormatViolation:
            return False
        return True


class IllegalEncoding:
    """Singleton result of decoding a word outside the subset."""

    _inst: "IllegalEncoding | None" = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "ILLEGAL"

    def __reduce__(self):
        return (IllegalEncoding, ())


ILLEGAL = IllegalEncoding()


def _bits(value: int, hi: int, lo: int) -> int:
    return (value >> lo) & ((1 << (hi - lo + 1)) - 1)


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def encode(instr: Instruction) -> int:
    instr.validate()
    spec = SPECS[instr.mnemonic]
    fmt, op = spec.fmt, spec.opcode
    rd, rs1, rs2, imm = instr.rd or 0, instr.rs1 or 0, instr.rs2 or 0, instr.imm or 0
    if fmt == "N":
        return spec.word
    if fmt == "R":
        return (spec.funct7 << 25) | (rs2 << 20) | (rs1 << 15) | (spec.funct3 << 12) | (rd << 7) | op
    if fmt in ("I", "L"):
        return ((imm & 0xFFF) << 20) | (rs1 << 15) | (spec.funct3 << 12) | (rd << 7) | op
    if fmt == "SH":
        return (spec.funct7 << 25) | (imm << 20) | (rs1 << 15) | (spec.funct3 << 12) | (rd << 7) | op
    if fmt == "S":
        u = imm & 0xFFF
        return ((u >> 5) << 25) | (rs2 << 20) | (rs1 << 15) | (spec.funct3 << 12) | ((u & 0x1F) << 7) | op
    if fmt == "B":
        u = imm & 0x1FFF
        return (
            (_bits(u, 12, 12) << 31) | (_bits(u, 10, 5) << 25) | (rs2 << 20) | (rs1 << 15)
            | (spec.funct3 << 12) | (_bits(u, 4, 1) << 8) | (_bits(u, 11, 11) << 7) | op
        )
    if fmt == "U":
        return ((imm & 0xFFFFF) << 12) | (rd << 7) | op
    if fmt == "J":
        u = imm & 0x1FFFFF
        return (
            (_bits(u, 20, 20) << 31) | (_bits(u, 10, 1) << 21) | (_bits(u, 11, 11) << 20)
            | (_bits(u, 19, 12) << 12) | (rd << 7) | op
        )
    raise AssertionError(fmt)


# (opcode, funct3, funct7) -> mnemonic for formats whose funct7 is significant
_R_TABLE = {(s.opcode, s.funct3, s.funct7): m for m, s in SPECS.items() if s.fmt in ("R", "SH")}
# (opcode, funct3) -> mnemonic for I/L/S/B formats
_F3_TABLE = {(s.opcode, s.funct3): m for m, s in SPECS.items() if s.fmt in ("I", "L", "S", "B")}
_FIXED = {s.word: m for m, s in SPECS.items() if s.fmt == "N"}
_BY_OPCODE_U = {0x37: "LUI", 0x17: "AUIPC", 0x6F: "JAL"}


@lru_cache(maxsize=1 << 16)
def decode(word: int) -> Instruction | IllegalEncoding:
    """Decode one 32-bit word; returns ``ILLEGAL`` outside the subset."""
    word &= 0xFFFFFFFF
    if word in _FIXED:
        return Instruction(_FIXED[word])
    op = word & 0x7F
    rd = _bits(word, 11, 7)
    f3 = _bits(word, 14, 12)
    rs1 = _bits(word, 19, 15)
    rs2 = _bits(word, 24, 20)
    f7 = _bits(word, 31, 25)
    if op in _BY_OPCODE_U:
        m = _BY_OPCODE_U[op]
        if m == "JAL":
            imm = (
                (_bits(word, 31, 31) << 20) | (_bits(word, 19, 12) << 12)
                | (_bits(word, 20, 20) << 11) | (_bits(word, 30, 21) << 1)
            )
            return Instruction(m, rd=rd, imm=_sext(imm, 21))
        return Instruction(m, rd=rd, imm=_sext(word >> 12, 20))
    if op == 0x33:
        m = _R_TABLE.get((op, f3, f7))
        return Instruction(m, rd=rd, rs1=rs1, rs2=rs2) if m else ILLEGAL
    if op == 0x13 and f3 in (1, 5):
        m = _R_TABLE.get((op, f3, f7))
        return Instruction(m, rd=rd, rs1=rs1, imm=rs2) if m else ILLEGAL
    m = _F3_TABLE.get((op, f3))
    if m is None:
        return ILLEGAL
    fmt = SPECS[m].fmt
    if fmt in ("I", "L"):
        return Instruction(m, rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    if fmt == "S":
        return Instruction(m, rs1=rs1, rs2=rs2, imm=_sext((f7 << 5) | rd, 12))
    if fmt == "B":
        imm = (
            (_bits(word, 31, 31) << 12) | (_bits(word, 7, 7) << 11)
            | (_bits(word, 30, 25) << 5) | (_bits(word, 11, 8) << 1)
        )
        return Instruction(m, rs1=rs1, rs2=rs2, imm=_sext(imm, 13))
    return ILLEGAL


def format_instr(instr: Instruction) -> str:
    """Canonical assembly text, e.g. ``lw x1, 4(x2)``."""
    m = instr.mnemonic.lower().replace("_", ".")
    fmt = SPECS[instr.mnemonic].fmt
    if fmt == "N":
        return m
    if fmt == "L":
        return f"{m} x{instr.rd}, {instr.imm}(x{instr.rs1})"
    if fmt == "S":
        return f"{m} x{instr.rs2}, {instr.imm}(x{instr.rs1})"
    ops = []
    for f in _FIELDS[fmt]:
        v = getattr(instr, f)
        ops.append(str(v) if f == "imm" else f"x{v}")
    return f"{m} " + ", ".join(ops)


@dataclass(frozen=True)
class DisasmReport:
    total: int
    valid: int
    invalid: int
    listing: tuple[Instruction | IllegalEncoding, ...]

    def text(self) -> str:
        return "\n".join(
            f"{4 * i:08x}: {'<illegal>' if ins is ILLEGAL else format_instr(ins)}"
            for i, ins in enumerate(self.listing)
        )


def disassemble_program(words: Iterable[int]) -> DisasmReport:
    listing = tuple(decode(w) for w in words)
    invalid = sum(1 for ins in listing if ins is ILLEGAL)
    return DisasmReport(len(listing), len(listing) - invalid, invalid, listing)


_MEM_OPERAND = re.compile(r"^(-?(?:0x[0-9a-f]+|\d+))\((\w+)\)$", re.IGNORECASE)


def _parse_reg(tok: str, lineno: int) -> int:
    reg = _REG_ALIASES.get(tok.strip().lower())
    if reg is None:
        raise ParseError(f"bad register {tok!r}", lineno)
    return reg


def _parse_imm(tok: str, lineno: int) -> int:
    try:
        return int(tok.strip(), 0)
    except ValueError:
        raise ParseError(f"bad immediate {tok!r}", lineno) from None


def parse_line(line: str, lineno: int | None = None) -> Instruction | None:
    """Parse one assembly line; returns None for blank/comment-only lines."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    parts = text.split(None, 1)
    mnemonic = parts[0].upper().replace(".", "_")
    if mnemonic not in SPECS:
        raise ParseError(f"unknown mnemonic {parts[0]!r}", lineno)
    fmt = SPECS[mnemonic].fmt
    ops = [o.strip() for o in parts[1].split(",")] if len(parts) > 1 else []
    if fmt in ("L", "S") and len(ops) == 2:
        mm = _MEM_OPERAND.match(ops[1].replace(" ", ""))
        if not mm:
            raise ParseError(f"bad memory operand {ops[1]!r}", lineno)
        ops = [ops[0], mm.group(2), mm.group(1)]
    fields = _FIELDS[fmt]
    if len(ops) != len(fields):
        raise ParseError(f"{mnemonic} expects {len(fields)} operands, got {len(ops)}", lineno)
    kwargs = {
        f: (_parse_imm(o, lineno) if f == "imm" else _parse_reg(o, lineno))
        for f, o in zip(fields, ops)
    }
    instr = Instruction(mnemonic, **kwargs)
    try:
        instr.validate()
    except FormatViolation as exc:
        raise ParseError(str(exc), lineno) from None
    return instr


def parse_listing(text: str) -> list[Instruction]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        instr = parse_line(line, lineno)
        if instr is not None:
            out.append(instr)
    return out


def assemble(text: str) -> list[int]:
    return [encode(i) for i in parse_listing(text)]


def words_to_bytes(words: Sequence[int]) -> bytes:
    return struct.pack(f"<{len(words)}I", *(w & 0xFFFFFFFF for w in words))


def bytes_to_words(data: bytes) -> list[int]:
    if len(data) % 4:
        raise ValueError("binary program length is not a multiple of 4")
    return list(struct.unpack(f"<{len(data) // 4}I", data))
