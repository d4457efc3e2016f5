"""Training corpus: function-body samples, the synthetic generator, and the
field-level tokenizer (one token per mnemonic, register and immediate bucket).
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .isa import (
    ILLEGAL, MNEMONICS, FormatViolation, Instruction, ParseError,
    decode, encode, operand_fields, parse_line,
)

GENERATOR_VERSION = "synth-1"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

# bucket name -> canonical value (what the bucket detokenizes to). Each
# canonical value is legal in every format whose immediates can fall in that
# bucket, so tokenize -> detokenize never turns a valid instruction invalid.
IMM_BUCKETS = {
    "SMALL_POS": 30,
    "SMALL_NEG": -64,
    "PAGE": -4096,
    "MAX": 2047,
    "MIN": -2048,
    "ALIGNED4": 28,
    "MISALIGNED": 17,
}
EXACT_RANGE = range(-15, 16)


class CorpusEmpty(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSample:
    instrs: tuple[Instruction, ...]
    source: str = "synthetic"

    def __post_init__(self):
        if not self.instrs:
            raise ValueError("corpus sample must be non-empty")
        for ins in self.instrs:
            ins.validate()

    def __len__(self) -> int:
        return len(self.instrs)

    def words(self) -> list[int]:
        return [encode(i) for i in self.instrs]


def _imm_token(value: int) -> str:
    return f"IMM_{value}" if value >= 0 else f"IMM_M{-value}"


def imm_bucket(value: int) -> str:
    """Token string for an immediate value."""
    if value in EXACT_RANGE:
        return _imm_token(value)
    if value == 2047:
        return "IMM_MAX"
    if value == -2048:
        return "IMM_MIN"
    if value % 2:
        return "IMM_MISALIGNED"
    if value % 4096 == 0:
        return "IMM_PAGE"
    if value > 0:
        return "IMM_ALIGNED4" if value % 4 == 0 else "IMM_SMALL_POS"
    return "IMM_SMALL_NEG"


class TokenVocab:
    def __init__(self):
        tokens = list(SPECIALS)
        tokens += list(MNEMONICS)
        tokens += [f"x{i}" for i in range(32)]
        self.imm_values: dict[str, int] = {}
        for v in EXACT_RANGE:
            self.imm_values[_imm_token(v)] = v
        for name, v in IMM_BUCKETS.items():
            self.imm_values[f"IMM_{name}"] = v
        tokens += list(self.imm_values)
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.mnemonic_ids = frozenset(self.ids[m] for m in MNEMONICS)
        self.reg_ids = frozenset(self.ids[f"x{i}"] for i in range(32))
        self.imm_ids = frozenset(self.ids[t] for t in self.imm_values)
        self.id_to_value = {self.ids[t]: v for t, v in self.imm_values.items()}

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids.get(token, UNK)

    def dump_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "token", "canonical_value"])
        for i, t in enumerate(self.tokens):
            w.writerow([i, t, self.imm_values.get(t, "")])
        return buf.getvalue()


@lru_cache(maxsize=1)
def vocab() -> TokenVocab:
    return TokenVocab()


def tokenize(sample: CorpusSample | Sequence[Instruction], bos: bool = True, eos: bool = True) -> list[int]:
    v = vocab()
    instrs = sample.instrs if isinstance(sample, CorpusSample) else sample
    out = [BOS] if bos else []
    for ins in instrs:
        out.append(v[ins.mnemonic])
        for f in operand_fields(ins.mnemonic):
            value = getattr(ins, f)
            out.append(v[imm_bucket(value)] if f == "imm" else v[f"x{value}"])
    if eos:
        out.append(EOS)
    return out


class Group(NamedTuple):
    """One parsed instruction slot of a token stream; ``instr`` None if malformed."""

    instr: Instruction | None
    start: int
    end: int


def parse_groups(ids: Sequence[int]) -> list[Group]:
    """Split a token stream into instruction slots.

    A slot starts at a mnemonic token and runs to the next mnemonic, EOS or
    end of stream. Operand tokens with no mnemonic before them form one
    malformed slot. A leading BOS is structural and ignored; parsing stops
    at the first EOS.
    """
    v = vocab()
    groups: list[Group] = []
    i, n = 0, len(ids)
    if n and ids[0] == BOS:
        i = 1
    while i < n and ids[i] != EOS:
        start = i
        i += 1
        while i < n and ids[i] != EOS and ids[i] not in v.mnemonic_ids:
            i += 1
        groups.append(Group(_build(ids[start:i], v), start, i))
    return groups


def _build(run: Sequence[int], v: TokenVocab) -> Instruction | None:
    if run[0] not in v.mnemonic_ids:
        return None
    m = v.tokens[run[0]]
    fields = operand_fields(m)
    ops = run[1:]
    if len(ops) != len(fields):
        return None
    kwargs = {}
    for f, t in zip(fields, ops):
        if f == "imm":
            if t not in v.imm_ids:
                return None
            kwargs[f] = v.id_to_value[t]
        else:
            if t not in v.reg_ids:
                return None
            kwargs[f] = int(v.tokens[t][1:])
    ins = Instruction(m, **kwargs)
    return ins if ins.is_valid else None


class Detokenized(NamedTuple):
    instrs: list[Instruction]
    skipped: int  # tokens belonging to malformed slots
    invalid: int  # number of malformed slots


def detokenize(ids: Sequence[int]) -> Detokenized:
    groups = parse_groups(ids)
    good = [g.instr for g in groups if g.instr is not None]
    bad = [g for g in groups if g.instr is None]
    return Detokenized(good, sum(g.end - g.start for g in bad), len(bad))


def token_words(ids: Sequence[int]) -> list[int]:
    """Machine words for a token stream; malformed slots become the all-zero
    (illegal) word so the disassembler sees and counts them."""
    return [0 if g.instr is None else encode(g.instr) for g in parse_groups(ids)]


def count_instructions(ids: Sequence[int]) -> int:
    return len(parse_groups(ids))


# -- ingest -----------------------------------------------------------------

_OBJDUMP_FN = re.compile(r"^[0-9a-fA-F]+\s+<([^>]+)>:\s*$")
_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*):\s*$")
_OBJDUMP_INSN = re.compile(r"^\s*[0-9a-fA-F]+:\s+([0-9a-fA-F]{8})\b")


@dataclass
class IngestResult:
    samples: list[CorpusSample]
    dropped: int


def ingest(text: str) -> IngestResult:
    """Split a disassembly listing into one sample per labelled function.

    Accepts the package's own listing format (``name:`` headers followed by
    assembly lines) and objdump-style output (``00000000 <name>:`` headers,
    instruction lines carrying the hex word). Functions containing anything
    outside the instruction subset are dropped and counted.
    """
    samples: list[CorpusSample] = []
    dropped = 0
    seen: set[str] = set()
    current: list[Instruction] | None = None
    bad = False

    def close():
        nonlocal dropped
        if current is None:
            return
        if bad:
            dropped += 1
        elif current:
            samples.append(CorpusSample(tuple(current), "ingested"))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        header = _OBJDUMP_FN.match(line) or _LABEL.match(line.strip())
        if header:
            close()
            name = header.group(1)
            if name in seen:
                raise ParseError(f"duplicate function label {name!r}", lineno)
            seen.add(name)
            current, bad = [], False
            continue
        if current is None:
            continue  # outside any function
        if bad:
            continue
        m = _OBJDUMP_INSN.match(line)
        if m:
            ins = decode(int(m.group(1), 16))
            if ins is ILLEGAL:
                bad = True
            else:
                current.append(ins)
            continue
        try:
            ins = parse_line(line, lineno)
        except (ParseError, FormatViolation):
            bad = True
            continue
        if ins is not None:
            current.append(ins)
    close()
    return IngestResult(samples, dropped)


def write_listing(samples: Iterable[CorpusSample]) -> str:
    out = []
    for i, s in enumerate(samples):
        out.append(f"fn_{i}:")
        out.extend(f"    {ins}" for ins in s.instrs)
    return "\n".join(out) + "\n"


# -- synthetic generator ------------------------------------------------------

_ALU_R = ("ADD", "SUB", "SLL", "SLT", "SLTU", "XOR", "SRL", "SRA", "OR", "AND")
_MULDIV = ("MUL", "MULH", "MULHSU", "MULHU", "DIV", "DIVU", "REM", "REMU")
_ALU_I = ("ADDI", "SLTI", "SLTIU", "XORI", "ORI", "ANDI")
_SHIFT_I = ("SLLI", "SRLI", "SRAI")
_BRANCH = ("BEQ", "BNE", "BLT", "BGE", "BLTU", "BGEU")
_LOAD_W = {"LB": 1, "LBU": 1, "LH": 2, "LHU": 2, "LW": 4}
_STORE_W = {"SB": 1, "SH": 2, "SW": 4}
_SMALL_IMMS = np.array([-15, -8, -4, -2, -1, 1, 2, 3, 4, 5, 7, 8, 12, 15, 0, 2047, -2048, 255, 100, -100])


class _Builder:
    def __init__(self, rng: np.random.Generator, length: int):
        self.rng = rng
        self.length = length
        self.out: list[Instruction] = []
        self.live: list[int] = []
        self.pointers: list[int] = []

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def fresh_reg(self) -> int:
        # reuse a live register sometimes so chains stay entangled
        if self.live and self.rng.random() < 0.35:
            return self.pick(self.live)
        return int(self.rng.integers(5, 32))

    def define(self, rd: int, pointer: bool = False):
        if rd in self.pointers and not pointer:
            self.pointers.remove(rd)
        if rd not in self.live:
            self.live.append(rd)
        if pointer and rd not in self.pointers:
            self.pointers.append(rd)

    def src(self) -> int:
        return self.pick(self.live)

    def emit(self, ins: Instruction):
        self.out.append(ins)

    def room(self) -> int:
        return self.length - 1 - len(self.out)


def _synth_one(rng: np.random.Generator) -> list[Instruction]:
    length = int(rng.integers(4, 33))
    b = _Builder(rng, length)
    # prologue: a base pointer in the data pages and one constant
    ptr = int(rng.integers(5, 32))
    b.emit(Instruction("LUI", rd=ptr, imm=int(rng.integers(1, 16))))
    b.define(ptr, pointer=True)
    if rng.random() < 0.5:
        rd = b.fresh_reg()
        b.emit(Instruction("ADDI", rd=rd, rs1=0, imm=int(rng.choice(_SMALL_IMMS))))
        b.define(rd)

    while b.room() > 0:
        r = rng.random()
        room = b.room()
        if r < 0.22:
            m = b.pick(_ALU_R)
            rd = b.fresh_reg()
            b.emit(Instruction(m, rd=rd, rs1=b.src(), rs2=b.src()))
            b.define(rd)
        elif r < 0.34:
            m = b.pick(_MULDIV)
            rd = b.fresh_reg()
            b.emit(Instruction(m, rd=rd, rs1=b.src(), rs2=b.src()))
            b.define(rd)
        elif r < 0.52:
            m = b.pick(_ALU_I)
            rd = b.fresh_reg()
            b.emit(Instruction(m, rd=rd, rs1=b.src(), imm=int(rng.choice(_SMALL_IMMS))))
            b.define(rd)
        elif r < 0.58:
            m = b.pick(_SHIFT_I)
            rd = b.fresh_reg()
            b.emit(Instruction(m, rd=rd, rs1=b.src(), imm=int(rng.integers(0, 32))))
            b.define(rd)
        elif r < 0.68 and b.pointers:
            m = b.pick(tuple(_LOAD_W))
            w = _LOAD_W[m]
            rd = b.fresh_reg()
            b.emit(Instruction(m, rd=rd, rs1=b.pick(b.pointers), imm=w * int(rng.integers(-3, 4))))
            b.define(rd)
        elif r < 0.78 and b.pointers:
            m = b.pick(tuple(_STORE_W))
            w = _STORE_W[m]
            b.emit(Instruction(m, rs1=b.pick(b.pointers), rs2=b.src(), imm=w * int(rng.integers(-3, 4))))
        elif r < 0.83 and b.pointers:
            p = b.pick(b.pointers)
            rd = b.fresh_reg()
            b.emit(Instruction("ADDI", rd=rd, rs1=p, imm=4 * int(rng.integers(-3, 4))))
            b.define(rd, pointer=True)
        elif r < 0.89 and room >= 3:
            # forward branch skipping 1-2 instructions
            skip = int(rng.integers(1, min(2, room - 1) + 1))
            m = b.pick(_BRANCH)
            b.emit(Instruction(m, rs1=b.src(), rs2=b.pick(b.live + [0]), imm=4 * (skip + 1)))
            for _ in range(skip):
                rd = b.fresh_reg()
                b.emit(Instruction("ADDI", rd=rd, rs1=b.src(), imm=int(rng.integers(-15, 16))))
                b.define(rd)
        elif r < 0.94 and room >= 4:
            # counted loop: cnt = k; body; cnt -= 1; bnez cnt, body
            cnt = int(rng.integers(5, 32))
            b.emit(Instruction("ADDI", rd=cnt, rs1=0, imm=int(rng.integers(2, 9))))
            b.define(cnt)
            body = 1
            rd = b.fresh_reg()
            while rd == cnt:
                rd = int(rng.integers(5, 32))
            b.emit(Instruction(b.pick(("ADD", "XOR", "MUL", "SUB")), rd=rd, rs1=b.src(), rs2=b.src()))
            b.define(rd)
            b.emit(Instruction("ADDI", rd=cnt, rs1=cnt, imm=-1))
            b.emit(Instruction("BNE", rs1=cnt, rs2=0, imm=-4 * (body + 1)))
        elif r < 0.96 and room >= 3:
            b.emit(Instruction("JAL", rd=b.pick((0, 1)), imm=8))
            rd = b.fresh_reg()
            b.emit(Instruction("ADDI", rd=rd, rs1=b.src(), imm=int(rng.integers(-15, 16))))
            b.define(rd)
        elif r < 0.975 and room >= 3:
            # patch the next instruction slot, then synchronise instruction fetch
            base = b.fresh_reg()
            b.emit(Instruction("AUIPC", rd=base, imm=0))
            b.define(base, pointer=False)
            b.emit(Instruction("SW", rs1=base, rs2=b.src(), imm=12))
            b.emit(Instruction("FENCE_I"))
        elif r < 0.985:
            b.emit(Instruction("FENCE"))
        else:
            rd = b.fresh_reg()
            b.emit(Instruction("LUI", rd=rd, imm=int(rng.integers(-15, 16))))
            b.define(rd)
    tail = rng.random()
    if tail < 0.75:
        b.emit(Instruction("ECALL"))
    elif tail < 0.85:
        b.emit(Instruction("JALR", rd=0, rs1=1, imm=0))
    else:
        rd = b.fresh_reg()
        b.emit(Instruction("ADD", rd=rd, rs1=b.src(), rs2=b.src()))
    return b.out[:length]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Stream for sample ``index``: independent of how generation is split."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def synth_generate(n: int, seed: int, start: int = 0) -> list[CorpusSample]:
    """``n`` synthetic function bodies; sample ``start + i`` always uses the
    same random stream, so disjoint index ranges can be generated in parallel."""
    if n <= 0:
        raise ValueError("n must be positive")
    return [CorpusSample(tuple(_synth_one(sample_rng(seed, start + i)))) for i in range(n)]


def manifest(n: int, seed: int) -> str:
    return json.dumps({"generator": GENERATOR_VERSION, "n": n, "seed": seed}, sort_keys=True)


def reads_of(ins: Instruction) -> tuple[int, ...]:
    fields = operand_fields(ins.mnemonic)
    return tuple(getattr(ins, f) for f in ("rs1", "rs2") if f in fields)


def writes_of(ins: Instruction) -> int | None:
    if "rd" in operand_fields(ins.mnemonic) and ins.rd:
        return ins.rd
    return None


def def_use_ratio(samples: Iterable[CorpusSample]) -> float:
    hit = total = 0
    for s in samples:
        written: set[int] = set()
        for ins in s.instrs:
            total += 1
            if any(r in written for r in reads_of(ins)):
                hit += 1
            w = writes_of(ins)
            if w is not None:
                written.add(w)
    return hit / total if total else 0.0
