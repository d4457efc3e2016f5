"""Trace differencing, mismatch fingerprints, dedup and engineer filters."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .isa import ILLEGAL, decode
from .sim import TraceRecord

KINDS = (
    "RegWriteValue",
    "MissingRegWrite",
    "ExtraRegWrite",
    "MemWriteValue",
    "ExceptionKind",
    "ControlFlowDivergence",
    "TraceLength",
)


@dataclass(frozen=True)
class Mismatch:
    kind: str
    step: int
    dut_record: TraceRecord | None
    golden_record: TraceRecord | None
    program_id: int | None = None

    def _ref(self) -> TraceRecord:
        return self.golden_record if self.golden_record is not None else self.dut_record

    @property
    def mnemonic(self) -> str:
        rec = self._ref()
        if rec is None:
            return "-"
        ins = decode(rec.word)
        return "ILLEGAL" if ins is ILLEGAL else ins.mnemonic

    @property
    def register(self) -> int | None:
        for rec in (self.dut_record, self.golden_record):
            if rec is not None and rec.reg_write is not None:
                return rec.reg_write[0]
        return None

    @property
    def exception_pair(self) -> str:
        d = self.dut_record.exception if self.dut_record else None
        g = self.golden_record.exception if self.golden_record else None
        if d is None and g is None:
            return "-"
        return f"{d or '-'}/{g or '-'}"


class Fingerprint(NamedTuple):
    mnemonic: str
    kind: str
    exceptions: str

    def __str__(self) -> str:
        return f"{self.mnemonic}:{self.kind}:{self.exceptions}"


def compare(dut: Sequence[TraceRecord], golden: Sequence[TraceRecord],
            program_id: int | None = None) -> list[Mismatch]:
    """Positional diff; stops after the first control-flow or length divergence."""
    out: list[Mismatch] = []
    for i in range(max(len(dut), len(golden))):
        d = dut[i] if i < len(dut) else None
        g = golden[i] if i < len(golden) else None
        if d is None or g is None:
            out.append(Mismatch("TraceLength", i, d, g, program_id))
            break
        if d.pc != g.pc or d.word != g.word:
            out.append(Mismatch("ControlFlowDivergence", i, d, g, program_id))
            break
        if d.exception != g.exception:
            kind = "ExceptionKind"
        elif d.reg_write != g.reg_write:
            if g.reg_write is None:
                kind = "ExtraRegWrite"
            elif d.reg_write is None:
                kind = "MissingRegWrite"
            else:
                kind = "RegWriteValue"
        elif d.mem_write != g.mem_write:
            kind = "MemWriteValue"
        else:
            continue
        out.append(Mismatch(kind, i, d, g, program_id))
    return out


def fingerprint(m: Mismatch) -> Fingerprint:
    return Fingerprint(m.mnemonic, m.kind, m.exception_pair)


def dedupe(ms: Iterable[Mismatch]) -> dict[Fingerprint, tuple[int, Mismatch]]:
    """Fingerprint -> (count, first exemplar), in first-seen order."""
    table: dict[Fingerprint, tuple[int, Mismatch]] = {}
    for m in ms:
        fp = fingerprint(m)
        if fp in table:
            n, ex = table[fp]
            table[fp] = (n + 1, ex)
        else:
            table[fp] = (1, m)
    return table


def _reg(text: str) -> int:
    text = text.strip().lower()
    return int(text[1:]) if text.startswith("x") else int(text)


@dataclass(frozen=True)
class FilterRule:
    """Conjunction of field matchers; ``None`` means "any"."""

    kind: str | None = None
    mnemonic: str | None = None
    reg: int | None = None
    exc: str | None = None

    def matches(self, m: Mismatch) -> bool:
        if self.kind is not None and m.kind != self.kind:
            return False
        if self.mnemonic is not None and m.mnemonic != self.mnemonic:
            return False
        if self.reg is not None and m.register != self.reg:
            return False
        if self.exc is not None:
            excs = {r.exception for r in (m.dut_record, m.golden_record) if r is not None}
            if self.exc not in excs:
                return False
        return True

    @classmethod
    def parse(cls, line: str) -> "FilterRule":
        fields: dict = {}
        for part in line.split(","):
            part = part.strip()
            if not part:
                continue
            key, _, value = part.partition("=")
            key, value = key.strip().lower(), value.strip()
            if key == "kind":
                if value not in KINDS:
                    raise ValueError(f"unknown mismatch kind {value!r}")
                fields["kind"] = value
            elif key == "mnemonic":
                fields["mnemonic"] = value.upper().replace(".", "_")
            elif key == "reg":
                fields["reg"] = _reg(value)
            elif key == "exc":
                fields["exc"] = value
            else:
                raise ValueError(f"unknown filter field {key!r}")
        return cls(**fields)


def parse_rules(text: str) -> list[FilterRule]:
    rules = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rules.append(FilterRule.parse(line))
    return rules


def apply_filters(ms: Iterable[Mismatch], rules: Sequence[FilterRule]) -> list[Mismatch]:
    return [m for m in ms if not any(r.matches(m) for r in rules)]


MISMATCH_HEADER = ["mnemonic", "kind", "exceptions", "count", "exemplar_program", "step"]


def mismatch_csv(table: dict[Fingerprint, tuple[int, Mismatch]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MISMATCH_HEADER)
    for fp, (count, ex) in table.items():
        pid = "-" if ex.program_id is None else ex.program_id
        w.writerow([fp.mnemonic, fp.kind, fp.exceptions, count, pid, ex.step])
    return buf.getvalue()
