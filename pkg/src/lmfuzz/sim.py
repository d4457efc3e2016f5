"""Behavioural RV32IM interpreter with injectable bugs.

With no toggles set this is the golden model; any toggle turns it into a
device under test whose traces can be diffed against the golden run.
Every exception halts execution (there is no trap vector).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from . import coverage
from .isa import ILLEGAL, MULDIV, SPECS, Instruction, decode

MASK = 0xFFFFFFFF


class BugToggle(str, enum.Enum):
    TRACE_OMIT_MULDIV_WB = "TRACE_OMIT_MULDIV_WB"
    TRACE_X0_WRITE = "TRACE_X0_WRITE"
    EXC_PRIORITY_SWAP = "EXC_PRIORITY_SWAP"
    STALE_IFETCH_NO_FENCEI = "STALE_IFETCH_NO_FENCEI"

    @classmethod
    def parse(cls, text: str) -> frozenset["BugToggle"]:
        """Comma-separated toggle names; ``all`` and ``none`` are accepted."""
        text = text.strip()
        if not text or text.lower() == "none":
            return frozenset()
        if text.lower() == "all":
            return frozenset(cls)
        return frozenset(cls(t.strip().upper()) for t in text.split(",") if t.strip())


class ProgramTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class ExecConfig:
    mem_size: int = 64 * 1024
    entry_pc: int = 0
    step_cap: int = 4096
    toggles: frozenset[BugToggle] = frozenset()

    def __post_init__(self):
        if self.step_cap <= 0:
            raise ValueError("step_cap must be positive")
        if self.mem_size <= 0 or self.mem_size % 4:
            raise ValueError("mem_size must be a positive multiple of 4")
        object.__setattr__(self, "toggles", frozenset(BugToggle(t) for t in self.toggles))

    def golden(self) -> "ExecConfig":
        return ExecConfig(self.mem_size, self.entry_pc, self.step_cap, frozenset())


class TraceRecord(NamedTuple):
    step: int
    pc: int
    word: int
    reg_write: tuple[int, int] | None = None
    mem_write: tuple[int, int, int] | None = None
    exception: str | None = None

    def serialize(self) -> str:
        rw = f"x{self.reg_write[0]}:{self.reg_write[1]:08x}" if self.reg_write else "-"
        mw = "{:08x}:{}:{:08x}".format(*self.mem_write) if self.mem_write else "-"
        return f"{self.step} {self.pc:08x} {self.word:08x} {rw} {mw} {self.exception or '-'}"

    @classmethod
    def parse(cls, line: str) -> "TraceRecord":
        step, pc, word, rw, mw, exc = line.split()
        reg_write = None
        if rw != "-":
            rd, val = rw.split(":")
            reg_write = (int(rd.lstrip("x")), int(val, 16))
        mem_write = None
        if mw != "-":
            a, wd, v = mw.split(":")
            mem_write = (int(a, 16), int(wd), int(v, 16))
        return cls(int(step), int(pc, 16), int(word, 16), reg_write, mem_write,
                   None if exc == "-" else exc)


Trace = list  # list[TraceRecord]


def serialize_trace(trace: Sequence[TraceRecord]) -> str:
    return "".join(r.serialize() + "\n" for r in trace)


def parse_trace(text: str) -> list[TraceRecord]:
    return [TraceRecord.parse(line) for line in text.splitlines() if line.strip()]


@dataclass
class ArchState:
    pc: int
    regs: list[int]
    mem: bytearray
    icache_snapshot: bytes
    halted: bool = False
    steps: int = 0
    code_range: tuple[int, int] = (0, 0)
    hits: set[int] = field(default_factory=set)
    # bookkeeping for memory / self-modifying-code coverage events
    stored: set[int] = field(default_factory=set)
    modified_words: set[int] = field(default_factory=set)
    dirty_words: set[int] = field(default_factory=set)
    code_dirty: bool = False


def reset(config: ExecConfig, program: Sequence[int]) -> ArchState:
    end = config.entry_pc + 4 * len(program)
    if config.entry_pc < 0 or end > config.mem_size:
        raise ProgramTooLarge(f"program occupies [{config.entry_pc:#x}, {end:#x}) "
                              f"but memory is {config.mem_size:#x} bytes")
    mem = bytearray(config.mem_size)
    for i, w in enumerate(program):
        mem[config.entry_pc + 4 * i: config.entry_pc + 4 * i + 4] = (w & MASK).to_bytes(4, "little")
    return ArchState(
        pc=config.entry_pc,
        regs=[0] * 32,
        mem=mem,
        icache_snapshot=bytes(mem),
        code_range=(config.entry_pc, end),
    )


def _s32(x: int) -> int:
    return x - (1 << 32) if x & 0x80000000 else x


def _tdiv(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def _alu(m: str, a: int, b: int) -> int:
    """a, b are unsigned 32-bit; result unsigned 32-bit."""
    if m in ("ADD", "ADDI"):
        return (a + b) & MASK
    if m == "SUB":
        return (a - b) & MASK
    if m in ("SLL", "SLLI"):
        return (a << (b & 31)) & MASK
    if m in ("SLT", "SLTI"):
        return int(_s32(a) < _s32(b))
    if m in ("SLTU", "SLTIU"):
        return int(a < b)
    if m in ("XOR", "XORI"):
        return a ^ b
    if m in ("SRL", "SRLI"):
        return a >> (b & 31)
    if m in ("SRA", "SRAI"):
        return (_s32(a) >> (b & 31)) & MASK
    if m in ("OR", "ORI"):
        return a | b
    if m in ("AND", "ANDI"):
        return a & b
    if m == "MUL":
        return (a * b) & MASK
    if m == "MULH":
        return ((_s32(a) * _s32(b)) >> 32) & MASK
    if m == "MULHSU":
        return ((_s32(a) * b) >> 32) & MASK
    if m == "MULHU":
        return (a * b) >> 32
    if m == "DIV":
        if b == 0:
            return MASK
        if a == 0x80000000 and b == MASK:
            return a
        return _tdiv(_s32(a), _s32(b)) & MASK
    if m == "DIVU":
        return MASK if b == 0 else a // b
    if m == "REM":
        if b == 0:
            return a
        if a == 0x80000000 and b == MASK:
            return 0
        sa, sb = _s32(a), _s32(b)
        return (sa - _tdiv(sa, sb) * sb) & MASK
    if m == "REMU":
        return a if b == 0 else a % b
    raise AssertionError(m)


class _Ids:
    """Coverage-point ids resolved once; the interpreter only touches ints."""

    def __init__(self):
        ids = coverage.point_ids()
        self.ids = ids
        self.op = {m: ids[f"op:{m}"] for m in SPECS}
        self.exc = {k: ids[f"exc:{k}"] for k in coverage.EXCEPTION_KINDS}
        self.res_zero = {m: ids[k] for m in SPECS if (k := f"res:{m}:zero") in ids}
        self.res_neg = {m: ids[k] for m in SPECS if (k := f"res:{m}:neg") in ids}
        self.res_one = {m: ids[k] for m in SPECS if (k := f"res:{m}:one") in ids}

    def __getitem__(self, name: str) -> int:
        return self.ids[name]


_IDS: _Ids | None = None


def _ids() -> _Ids:
    global _IDS
    if _IDS is None:
        _IDS = _Ids()
    return _IDS


def _operand_patterns(instr: Instruction, fmt: str, hits: set[int], ids: _Ids) -> None:
    rd, rs1, rs2, imm = instr.rd, instr.rs1, instr.rs2, instr.imm
    if fmt == "R":
        if rd == 0: hits.add(ids["pat:R:rd_x0"])
        if rs1 == 0: hits.add(ids["pat:R:rs1_x0"])
        if rs2 == 0: hits.add(ids["pat:R:rs2_x0"])
        if rd == rs1: hits.add(ids["pat:R:rd_eq_rs1"])
        if rs1 == rs2: hits.add(ids["pat:R:rs1_eq_rs2"])
    elif fmt == "I":
        if rd == 0: hits.add(ids["pat:I:rd_x0"])
        if rs1 == 0: hits.add(ids["pat:I:rs1_x0"])
        if rd == rs1: hits.add(ids["pat:I:rd_eq_rs1"])
        if imm == 0: hits.add(ids["pat:I:imm_zero"])
        if imm < 0: hits.add(ids["pat:I:imm_neg"])
        if imm == 2047: hits.add(ids["pat:I:imm_max"])
        if imm == -2048: hits.add(ids["pat:I:imm_min"])
    elif fmt == "SH":
        if rd == 0: hits.add(ids["pat:SH:rd_x0"])
        if imm == 0: hits.add(ids["pat:SH:imm_zero"])
        if imm == 31: hits.add(ids["pat:SH:imm_max"])
    elif fmt == "L":
        if rd == 0: hits.add(ids["pat:L:rd_x0"])
        if rs1 == 0: hits.add(ids["pat:L:rs1_x0"])
        if imm < 0: hits.add(ids["pat:L:imm_neg"])
    elif fmt == "S":
        if rs1 == 0: hits.add(ids["pat:S:rs1_x0"])
        if rs2 == 0: hits.add(ids["pat:S:rs2_x0"])
        if imm < 0: hits.add(ids["pat:S:imm_neg"])
    elif fmt == "B":
        if rs1 == rs2: hits.add(ids["pat:B:rs1_eq_rs2"])
        if rs1 == 0: hits.add(ids["pat:B:rs1_x0"])
        if imm < 0: hits.add(ids["pat:B:imm_neg"])
    elif fmt == "U":
        if rd == 0: hits.add(ids["pat:U:rd_x0"])
        if imm == 0: hits.add(ids["pat:U:imm_zero"])
        if imm < 0: hits.add(ids["pat:U:imm_neg"])
    elif fmt == "J":
        if rd == 0: hits.add(ids["pat:J:rd_x0"])
        if imm < 0: hits.add(ids["pat:J:imm_neg"])


def _result_patterns(m: str, value: int, hits: set[int], ids: _Ids) -> None:
    if m in ids.res_one:
        hits.add(ids.res_one[m] if value == 1 else ids.res_zero[m])
        return
    if value == 0 and m in ids.res_zero:
        hits.add(ids.res_zero[m])
    elif value & 0x80000000 and m in ids.res_neg:
        hits.add(ids.res_neg[m])


def _muldiv_patterns(m: str, a: int, b: int, value: int, hits: set[int], ids: _Ids) -> None:
    if m in ("DIV", "DIVU", "REM", "REMU") and b == 0:
        hits.add(ids[f"md:div_by_zero:{m}"])
    if m in ("DIV", "REM") and a == 0x80000000 and b == MASK:
        hits.add(ids[f"md:overflow:{m}"])
    if m == "MUL" and not (-(1 << 31) <= _s32(a) * _s32(b) < (1 << 31)):
        hits.add(ids["md:mul_wide:MUL"])
    if m in ("MULH", "MULHSU") and value & 0x80000000:
        hits.add(ids[f"md:neg_high:{m}"])
    if m in ("MUL", "MULH", "DIV", "REM") and a & 0x80000000 and b & 0x80000000:
        hits.add(ids[f"md:both_neg:{m}"])


_WIDTH = {"LB": 1, "LBU": 1, "SB": 1, "LH": 2, "LHU": 2, "SH": 2, "LW": 4, "SW": 4}


def _mem_exception(addr: int, width: int, mem_size: int, store: bool, swap: bool) -> str | None:
    misaligned = addr % width != 0
    oob = addr + width > mem_size
    kind = "Store" if store else "Load"
    if swap and oob:
        return f"{kind}AccessFault"
    if misaligned:
        return f"{kind}AddressMisaligned"
    if oob:
        return f"{kind}AccessFault"
    return None


def step(state: ArchState, config: ExecConfig) -> TraceRecord:
    if state.halted:
        raise RuntimeError("step() on a halted state")
    ids = _ids()
    hits = state.hits
    toggles = config.toggles
    pc = state.pc
    ordinal = state.steps
    state.steps += 1
    regs = state.regs

    def finish(rec: TraceRecord) -> TraceRecord:
        if rec.exception is not None:
            hits.add(ids.exc[rec.exception])
            state.halted = True
        if state.steps >= config.step_cap:
            state.halted = True
        return rec

    if pc + 4 > config.mem_size:
        return finish(TraceRecord(ordinal, pc, 0, exception="InstructionAccessFault"))
    src = state.icache_snapshot if BugToggle.STALE_IFETCH_NO_FENCEI in toggles else state.mem
    word = int.from_bytes(src[pc:pc + 4], "little")
    if pc in state.dirty_words:
        hits.add(ids["smc:exec_modified_unfenced"])
    elif pc in state.modified_words:
        hits.add(ids["smc:exec_modified_fenced"])

    instr = decode(word)
    if instr is ILLEGAL:
        return finish(TraceRecord(ordinal, pc, word, exception="IllegalInstruction"))
    m = instr.mnemonic
    fmt = SPECS[m].fmt
    hits.add(ids.op[m])
    _operand_patterns(instr, fmt, hits, ids)
    next_pc = (pc + 4) & MASK

    def write(rd: int, value: int) -> tuple[int, int] | None:
        if rd != 0:
            regs[rd] = value
        if m in MULDIV and BugToggle.TRACE_OMIT_MULDIV_WB in toggles:
            return None
        if rd == 0:
            return (0, value) if BugToggle.TRACE_X0_WRITE in toggles else None
        return (rd, value)

    if fmt in ("R", "I", "SH"):
        if m == "JALR":
            target = (regs[instr.rs1] + instr.imm) & MASK & ~1
            if target % 4:
                return finish(TraceRecord(ordinal, pc, word, exception="InstructionAddressMisaligned"))
            rw = write(instr.rd, next_pc)
            state.pc = target
            return finish(TraceRecord(ordinal, pc, word, reg_write=rw))
        a = regs[instr.rs1]
        b = regs[instr.rs2] if fmt == "R" else instr.imm & MASK
        value = _alu(m, a, b)
        _result_patterns(m, value, hits, ids)
        if m in MULDIV:
            _muldiv_patterns(m, a, b, value, hits, ids)
        rw = write(instr.rd, value)
        state.pc = next_pc
        return finish(TraceRecord(ordinal, pc, word, reg_write=rw))

    if fmt == "U":
        value = (instr.imm << 12) & MASK
        if m == "AUIPC":
            value = (value + pc) & MASK
        _result_patterns(m, value, hits, ids)
        rw = write(instr.rd, value)
        state.pc = next_pc
        return finish(TraceRecord(ordinal, pc, word, reg_write=rw))

    if fmt == "J":
        target = (pc + instr.imm) & MASK
        if target % 4:
            return finish(TraceRecord(ordinal, pc, word, exception="InstructionAddressMisaligned"))
        rw = write(instr.rd, next_pc)
        state.pc = target
        return finish(TraceRecord(ordinal, pc, word, reg_write=rw))

    if fmt == "B":
        a, b = regs[instr.rs1], regs[instr.rs2]
        if m == "BEQ":
            taken = a == b
        elif m == "BNE":
            taken = a != b
        elif m == "BLT":
            taken = _s32(a) < _s32(b)
        elif m == "BGE":
            taken = _s32(a) >= _s32(b)
        elif m == "BLTU":
            taken = a < b
        else:
            taken = a >= b
        if not taken:
            hits.add(ids[f"not_taken:{m}"])
            state.pc = next_pc
            return finish(TraceRecord(ordinal, pc, word))
        hits.add(ids[f"taken:{m}"])
        if instr.imm < 0:
            hits.add(ids[f"taken_back:{m}"])
        target = (pc + instr.imm) & MASK
        if target % 4:
            return finish(TraceRecord(ordinal, pc, word, exception="InstructionAddressMisaligned"))
        state.pc = target
        return finish(TraceRecord(ordinal, pc, word))

    swap = BugToggle.EXC_PRIORITY_SWAP in toggles
    if fmt == "L":
        width = _WIDTH[m]
        addr = (regs[instr.rs1] + instr.imm) & MASK
        hits.add(ids[f"mem:{m}:{'misaligned' if addr % width else 'aligned'}"])
        exc = _mem_exception(addr, width, config.mem_size, False, swap)
        if exc:
            return finish(TraceRecord(ordinal, pc, word, exception=exc))
        raw = int.from_bytes(state.mem[addr:addr + width], "little")
        if any(a in state.stored for a in range(addr, addr + width)):
            hits.add(ids["mem:load_after_store"])
        top = raw >> (8 * width - 1)
        if m in ("LB", "LH"):
            value = (raw - (top << (8 * width))) & MASK
            if top:
                hits.add(ids[f"mem:load_sext_neg:{m}"])
        else:
            value = raw
            if top and m in ("LBU", "LHU"):
                hits.add(ids[f"mem:load_zext_high:{m}"])
        rw = write(instr.rd, value)
        state.pc = next_pc
        return finish(TraceRecord(ordinal, pc, word, reg_write=rw))

    if fmt == "S":
        width = _WIDTH[m]
        addr = (regs[instr.rs1] + instr.imm) & MASK
        hits.add(ids[f"mem:{m}:{'misaligned' if addr % width else 'aligned'}"])
        exc = _mem_exception(addr, width, config.mem_size, True, swap)
        if exc:
            return finish(TraceRecord(ordinal, pc, word, exception=exc))
        value = regs[instr.rs2] & ((1 << (8 * width)) - 1)
        span = range(addr, addr + width)
        if any(a in state.stored for a in span):
            hits.add(ids["mem:store_overwrite"])
        state.stored.update(span)
        lo, hi = state.code_range
        if addr < hi and addr + width > lo:
            hits.add(ids["mem:store_code"])
            state.code_dirty = True
        wa = addr & ~3
        state.modified_words.update((wa, (addr + width - 1) & ~3))
        state.dirty_words.update((wa, (addr + width - 1) & ~3))
        state.mem[addr:addr + width] = value.to_bytes(width, "little")
        state.pc = next_pc
        return finish(TraceRecord(ordinal, pc, word, mem_write=(addr, width, value)))

    # operand-less
    if m == "ECALL":
        return finish(TraceRecord(ordinal, pc, word, exception="Ecall"))
    if m == "EBREAK":
        return finish(TraceRecord(ordinal, pc, word, exception="Breakpoint"))
    if m == "FENCE_I":
        hits.add(ids["fence_i:pending_code_store" if state.code_dirty else "fence_i:nothing_pending"])
        state.icache_snapshot = bytes(state.mem)
        state.dirty_words.clear()
        state.code_dirty = False
    state.pc = next_pc
    return finish(TraceRecord(ordinal, pc, word))


@dataclass
class RunResult:
    trace: list[TraceRecord]
    hits: frozenset[int]
    state: ArchState

    @property
    def capped(self) -> bool:
        """Halted by the step cap rather than by an exception."""
        return bool(self.trace) and self.trace[-1].exception is None


def run(program: Sequence[int], config: ExecConfig) -> RunResult:
    state = reset(config, program)
    trace: list[TraceRecord] = []
    while not state.halted:
        trace.append(step(state, config))
    return RunResult(trace, frozenset(state.hits), state)


def run_program(program: Sequence[int], config: ExecConfig) -> tuple[list[TraceRecord], frozenset[int]]:
    r = run(program, config)
    return r.trace, r.hits
