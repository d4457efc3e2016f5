import pytest
from hypothesis import given, strategies as st

from lmfuzz import coverage
from lmfuzz.difftest import compare
from lmfuzz.isa import MULDIV, Instruction, assemble, encode
from lmfuzz.sim import (
    BugToggle, ExecConfig, ProgramTooLarge, TraceRecord, parse_trace, reset, run, run_program,
    serialize_trace, step,
)

from strategies import programs

GOLDEN = ExecConfig()
M32 = (1 << 32) - 1


def with_toggles(*ts):
    return ExecConfig(toggles=frozenset(ts))


# -- reference semantics written straight from the ISA manual ------------------

def sx(v):
    v &= M32
    return v - (1 << 32) if v >> 31 else v


def ref_op(m, a, b):
    """a, b as unsigned 32-bit; returns unsigned 32-bit result."""
    sa, sb = sx(a), sx(b)
    if m == "DIV":
        if b == 0:
            r = -1
        elif sa == -(2**31) and sb == -1:
            r = sa
        else:
            q = abs(sa) // abs(sb)
            r = q if (sa < 0) == (sb < 0) else -q
    elif m == "REM":
        if b == 0:
            r = sa
        elif sa == -(2**31) and sb == -1:
            r = 0
        else:
            r = abs(sa) % abs(sb) * (-1 if sa < 0 else 1)
    else:
        r = {
            "ADD": lambda: a + b,
            "SUB": lambda: a - b,
            "SLL": lambda: a << (b & 31),
            "SLT": lambda: int(sa < sb),
            "SLTU": lambda: int(a < b),
            "XOR": lambda: a ^ b,
            "SRL": lambda: a >> (b & 31),
            "SRA": lambda: sa >> (b & 31),
            "OR": lambda: a | b,
            "AND": lambda: a & b,
            "MUL": lambda: sa * sb,
            "MULH": lambda: (sa * sb) >> 32,
            "MULHSU": lambda: (sa * b) >> 32,
            "MULHU": lambda: (a * b) >> 32,
            "DIVU": lambda: a // b if b else M32,
            "REMU": lambda: a % b if b else a,
        }[m]()
    return r & M32


def load_const(rd, value):
    """LUI+ADDI pair materialising a 32-bit constant."""
    lo = sx(value & 0xFFF) if value & 0x800 else value & 0xFFF
    lo = lo - 4096 if lo >= 2048 else lo
    hi = ((value - lo) >> 12) & 0xFFFFF
    hi = hi - (1 << 20) if hi >> 19 else hi
    return [encode(Instruction("LUI", rd=rd, imm=hi)), encode(Instruction("ADDI", rd=rd, rs1=rd, imm=lo))]


R_OPS = ["ADD", "SUB", "SLL", "SLT", "SLTU", "XOR", "SRL", "SRA", "OR", "AND",
         "MUL", "MULH", "MULHSU", "MULHU", "DIV", "DIVU", "REM", "REMU"]
u32 = st.one_of(st.integers(0, M32), st.sampled_from([0, 1, 2, 31, 0x7FFFFFFF, 0x80000000, M32]))


@given(st.sampled_from(R_OPS), u32, u32)
def test_r_type_matches_reference(m, a, b):
    prog = load_const(1, a) + load_const(2, b) + [encode(Instruction(m, rd=3, rs1=1, rs2=2))]
    prog.append(assemble("ecall")[0])
    r = run(prog, GOLDEN)
    assert r.state.regs[1] == a and r.state.regs[2] == b
    assert r.trace[4].reg_write == (3, ref_op(m, a, b))


@given(u32, st.integers(-2048, 2047))
def test_immediate_ops_match_reference(a, imm):
    ops = {"ADDI": "ADD", "XORI": "XOR", "ORI": "OR", "ANDI": "AND", "SLTI": "SLT", "SLTIU": "SLTU"}
    for m, ref in ops.items():
        prog = load_const(1, a) + [encode(Instruction(m, rd=2, rs1=1, imm=imm))]
        assert run(prog + [0x73], GOLDEN).trace[2].reg_write == (2, ref_op(ref, a, imm & M32))


# -- examples ---------------------------------------------------------------------

def test_reset_examples():
    s = reset(GOLDEN, [])
    assert s.pc == 0 and s.regs == [0] * 32
    s = reset(GOLDEN, [0x00100093, 0x00000073])
    assert bytes(s.mem[:8]) == bytes([0x93, 0, 0x10, 0, 0x73, 0, 0, 0])
    assert s.icache_snapshot[:8] == bytes(s.mem[:8])
    with pytest.raises(ProgramTooLarge):
        reset(ExecConfig(mem_size=64), [0] * 17)


def test_step_addi():
    s = reset(GOLDEN, assemble("addi x1, x0, 5"))
    rec = step(s, GOLDEN)
    assert rec.reg_write == (1, 5) and s.regs[1] == 5


def test_x0_write_only_visible_with_toggle():
    prog = assemble("addi x0, x0, 7")
    s = reset(GOLDEN, prog)
    assert step(s, GOLDEN).reg_write is None and s.regs[0] == 0
    cfg = with_toggles(BugToggle.TRACE_X0_WRITE)
    s = reset(cfg, prog)
    assert step(s, cfg).reg_write == (0, 7) and s.regs[0] == 0


def test_exception_priority():
    s = reset(GOLDEN, assemble("lw x1, 2(x0)"))
    assert step(s, GOLDEN).exception == "LoadAddressMisaligned"
    # misaligned and out of bounds at once
    prog = assemble("lw x1, -2(x0)")
    assert run(prog, GOLDEN).trace[0].exception == "LoadAddressMisaligned"
    swapped = with_toggles(BugToggle.EXC_PRIORITY_SWAP)
    assert run(prog, swapped).trace[0].exception == "LoadAccessFault"
    # in-bounds misaligned access is unaffected by the swap
    assert run(assemble("lw x1, 2(x0)"), swapped).trace[0].exception == "LoadAddressMisaligned"
    prog = assemble("sh x1, -1(x0)")
    assert run(prog, GOLDEN).trace[0].exception == "StoreAddressMisaligned"
    assert run(prog, swapped).trace[0].exception == "StoreAccessFault"


def test_ecall_and_step_cap():
    trace, hits = run_program([0x73], GOLDEN)
    assert len(trace) == 1 and trace[0].exception == "Ecall"
    assert coverage.point_id("exc:Ecall") in hits
    r = run(assemble("jal x0, 0"), ExecConfig(step_cap=100))
    assert len(r.trace) == 100 and r.capped and r.state.halted


def test_muldiv_writeback_omitted_from_trace_only():
    prog = assemble("addi x1, x0, 6\naddi x2, x0, 7\nmul x3, x1, x2\necall")
    g = run(prog, GOLDEN)
    d = run(prog, with_toggles(BugToggle.TRACE_OMIT_MULDIV_WB))
    assert g.trace[2].reg_write == (3, 42)
    assert d.trace[2].reg_write is None
    assert d.state.regs == g.state.regs


SMC = """
    addi x1, x0, 0x73
    sw x1, 12(x0)
    addi x2, x0, 1
    addi x3, x0, 2
    ecall
"""


def test_stale_fetch_without_fence_i():
    prog = assemble(SMC)
    g = run(prog, GOLDEN)
    d = run(prog, with_toggles(BugToggle.STALE_IFETCH_NO_FENCEI))
    # golden executes the freshly stored ecall at pc 12; the DUT runs the stale addi
    assert g.trace[3].word == 0x73 and g.trace[3].exception == "Ecall"
    assert d.trace[3].word == prog[3]
    assert g.trace[3].pc == d.trace[3].pc == 12
    assert coverage.point_id("smc:exec_modified_unfenced") in g.hits


def test_fence_i_refreshes_stale_copy():
    prog = assemble("""
        addi x1, x0, 0x73
        sw x1, 16(x0)
        fence.i
        addi x2, x0, 1
        addi x3, x0, 2
    """)
    g = run(prog, GOLDEN)
    d = run(prog, with_toggles(BugToggle.STALE_IFETCH_NO_FENCEI))
    assert g.trace == d.trace
    names = coverage.names(g.hits)
    assert "fence_i:pending_code_store" in names and "smc:exec_modified_fenced" in names


def test_control_flow_faults():
    assert run(assemble("jal x0, 2"), GOLDEN).trace[0].exception == "InstructionAddressMisaligned"
    r = run(assemble("lui x1, 16\njalr x0, x1, 0"), GOLDEN)
    assert r.trace[-1].exception == "InstructionAccessFault"
    assert run([0], GOLDEN).trace[0].exception == "IllegalInstruction"
    assert run(assemble("ebreak"), GOLDEN).trace[0].exception == "Breakpoint"


def test_trace_serialization_format():
    rec = TraceRecord(3, 0x10, 0x00100093, (1, 5), None, None)
    assert rec.serialize() == "3 00000010 00100093 x1:00000005 - -"
    rec = TraceRecord(0, 0, 0x0020A023, None, (4, 4, 0xDEADBEEF), "Ecall")
    assert rec.serialize() == "0 00000000 0020a023 - 00000004:4:deadbeef Ecall"


# -- properties -----------------------------------------------------------------------

def _words(instrs):
    return [encode(i) for i in instrs]


@given(programs())
def test_golden_never_writes_x0(instrs):
    r = run(_words(instrs), ExecConfig(step_cap=300))
    assert r.state.regs[0] == 0
    assert all(rec.reg_write is None or rec.reg_write[0] != 0 for rec in r.trace)
    assert all(rec.exception is None or rec.reg_write is None for rec in r.trace)
    assert sum(rec.exception is not None for rec in r.trace) <= 1


@given(programs(), st.sampled_from([BugToggle.TRACE_OMIT_MULDIV_WB, BugToggle.TRACE_X0_WRITE]))
def test_trace_only_toggles_keep_state(instrs, toggle):
    w = _words(instrs)
    g = run(w, ExecConfig(step_cap=300))
    d = run(w, ExecConfig(step_cap=300, toggles=frozenset({toggle})))
    assert d.state.regs == g.state.regs and d.state.mem == g.state.mem and d.state.pc == g.state.pc


EXPECTED = {
    BugToggle.TRACE_OMIT_MULDIV_WB:
        lambda m: m.kind == "MissingRegWrite" and m.mnemonic in MULDIV,
    BugToggle.TRACE_X0_WRITE:
        lambda m: m.kind == "ExtraRegWrite" and m.register == 0,
    BugToggle.EXC_PRIORITY_SWAP:
        lambda m: m.kind == "ExceptionKind" and m.dut_record.exception.endswith("AccessFault")
        and m.golden_record.exception.endswith("AddressMisaligned"),
    BugToggle.STALE_IFETCH_NO_FENCEI:
        lambda m: m.kind == "ControlFlowDivergence",
}


@given(programs(), st.sampled_from(list(BugToggle)))
def test_toggle_soundness(instrs, toggle):
    w = _words(instrs)
    g = run(w, ExecConfig(step_cap=300))
    d = run(w, ExecConfig(step_cap=300, toggles=frozenset({toggle})))
    for m in compare(d.trace, g.trace):
        assert EXPECTED[toggle](m), m


@given(programs())
def test_determinism_and_trace_roundtrip(instrs):
    w = _words(instrs)
    cfg = ExecConfig(step_cap=300, toggles=frozenset(BugToggle))
    a, b = run(w, cfg), run(w, cfg)
    assert a.trace == b.trace and a.hits == b.hits
    assert parse_trace(serialize_trace(a.trace)) == a.trace


def test_toggle_parse():
    assert BugToggle.parse("all") == frozenset(BugToggle)
    assert BugToggle.parse("none") == frozenset()
    assert BugToggle.parse("trace_x0_write, EXC_PRIORITY_SWAP") == {
        BugToggle.TRACE_X0_WRITE, BugToggle.EXC_PRIORITY_SWAP}
    with pytest.raises(ValueError):
        BugToggle.parse("NOT_A_BUG")
