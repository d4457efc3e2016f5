"""Coverage-point catalog and the stand-alone / incremental / total bookkeeping.

Points are behavioural events observed by the interpreter (opcode executed,
branch direction, exception kind, operand and result patterns, memory
events, multiply/divide corner cases, fence events).
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from functools import lru_cache
from typing import AbstractSet, Iterable

from .isa import BRANCHES, LOADS, MNEMONICS, SPECS, STORES

CATALOG_VERSION = 1

EXCEPTION_KINDS = (
    "IllegalInstruction",
    "InstructionAddressMisaligned",
    "InstructionAccessFault",
    "LoadAddressMisaligned",
    "LoadAccessFault",
    "StoreAddressMisaligned",
    "StoreAccessFault",
    "Ecall",
    "Breakpoint",
)

SET_LESS_THAN = ("SLT", "SLTU", "SLTI", "SLTIU")


class UnknownPoint(KeyError):
    pass


@dataclass(frozen=True)
class CoveragePoint:
    id: int
    name: str
    category: str


@dataclass(frozen=True)
class CoverageStats:
    standalone: int
    incremental: int
    total: int


def _catalog_entries() -> list[tuple[str, str]]:
    entries: list[tuple[str, str]] = []
    add = entries.append
    for m in MNEMONICS:
        add((f"op:{m}", "opcode-executed"))
    for b in BRANCHES:
        add((f"taken:{b}", "branch-taken"))
        add((f"not_taken:{b}", "branch-not-taken"))
        add((f"taken_back:{b}", "branch-taken"))
    for kind in EXCEPTION_KINDS:
        add((f"exc:{kind}", "exception-kind"))

    patterns = {
        "R": ("rd_x0", "rs1_x0", "rs2_x0", "rd_eq_rs1", "rs1_eq_rs2"),
        "I": ("rd_x0", "rs1_x0", "rd_eq_rs1", "imm_zero", "imm_neg", "imm_max", "imm_min"),
        "SH": ("rd_x0", "imm_zero", "imm_max"),
        "L": ("rd_x0", "rs1_x0", "imm_neg"),
        "S": ("rs1_x0", "rs2_x0", "imm_neg"),
        "B": ("rs1_eq_rs2", "rs1_x0", "imm_neg"),
        "U": ("rd_x0", "imm_zero", "imm_neg"),
        "J": ("rd_x0", "imm_neg"),
    }
    for fmt, pats in patterns.items():
        for p in pats:
            add((f"pat:{fmt}:{p}", "operand-pattern"))
    for m in MNEMONICS:
        if SPECS[m].fmt not in ("R", "I", "SH", "U") or m == "JALR":
            continue
        if m in SET_LESS_THAN:
            add((f"res:{m}:zero", "operand-pattern"))
            add((f"res:{m}:one", "operand-pattern"))
        else:
            add((f"res:{m}:zero", "operand-pattern"))
            add((f"res:{m}:neg", "operand-pattern"))

    for m in LOADS + STORES:
        add((f"mem:{m}:aligned", "mem-event"))
        if m not in ("LB", "LBU", "SB"):
            add((f"mem:{m}:misaligned", "mem-event"))
    for name in (
        "load_sext_neg:LB", "load_sext_neg:LH", "load_zext_high:LBU", "load_zext_high:LHU",
        "load_after_store", "store_overwrite", "store_code",
    ):
        add((f"mem:{name}", "mem-event"))

    for m in ("DIV", "DIVU", "REM", "REMU"):
        add((f"md:div_by_zero:{m}", "muldiv-edge"))
    for m in ("DIV", "REM"):
        add((f"md:overflow:{m}", "muldiv-edge"))
    add(("md:mul_wide:MUL", "muldiv-edge"))
    for m in ("MULH", "MULHSU"):
        add((f"md:neg_high:{m}", "muldiv-edge"))
    for m in ("MUL", "MULH", "DIV", "REM"):
        add((f"md:both_neg:{m}", "muldiv-edge"))

    for name in ("fence_i:pending_code_store", "fence_i:nothing_pending",
                 "smc:exec_modified_unfenced", "smc:exec_modified_fenced"):
        add((name, "fence-event"))
    return entries


@lru_cache(maxsize=1)
def _catalog() -> tuple[CoveragePoint, ...]:
    return tuple(CoveragePoint(i, n, c) for i, (n, c) in enumerate(_catalog_entries()))


def catalog() -> list[CoveragePoint]:
    return list(_catalog())


@lru_cache(maxsize=1)
def _ids() -> dict[str, int]:
    return {p.name: p.id for p in _catalog()}


def point_id(name: str) -> int:
    try:
        return _ids()[name]
    except KeyError:
        raise UnknownPoint(name) from None


def point_ids() -> dict[str, int]:
    """name -> id map (a copy; callers may cache it)."""
    return dict(_ids())


def catalog_size() -> int:
    return len(_catalog())


@lru_cache(maxsize=1)
def catalog_hash() -> str:
    h = hashlib.sha256(f"v{CATALOG_VERSION}\n".encode())
    for p in _catalog():
        h.update(f"{p.id},{p.name},{p.category}\n".encode())
    return h.hexdigest()[:16]


def _check(ids: Iterable[int]) -> None:
    n = catalog_size()
    for i in ids:
        if not (isinstance(i, int) and 0 <= i < n):
            raise UnknownPoint(i)


def update(total_set: AbstractSet[int], hits: AbstractSet[int]) -> tuple[CoverageStats, frozenset[int]]:
    """Fold one test's hits into the running total.

    Returns the per-test stats and the new total; neither input is modified.
    """
    _check(total_set)
    _check(hits)
    new_total = frozenset(total_set) | frozenset(hits)
    stats = CoverageStats(
        standalone=len(hits),
        incremental=len(hits - total_set),
        total=len(new_total),
    )
    return stats, new_total


def percent(total_set: AbstractSet[int]) -> float:
    return 100.0 * len(total_set) / catalog_size()


def catalog_csv() -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "name", "category"])
    for p in _catalog():
        w.writerow([p.id, p.name, p.category])
    return buf.getvalue()


def names(ids: Iterable[int]) -> list[str]:
    cat = _catalog()
    return [cat[i].name for i in sorted(ids)]
