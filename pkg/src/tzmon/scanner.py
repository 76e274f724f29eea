"""Static probe placement over a kernel image.

Every word of every text section is decoded (the ISA is fixed width and
fetches must be aligned, so there is no other instruction stream to find).
Writes to SCTLR, TTBR0/TTBR1 and TTBCR become probes of type #1, #2 and #3;
the data-abort vector slot is followed to the abort handler's first
instruction, which becomes the single #4 probe.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .image import Image, ImageError
from .isa import Instruction, SysReg, decode
from .machine import VBASE_HIGH, ExceptionKind
from .sprobe import ProbeType

MSR_TARGETS = {
    SysReg.SCTLR: ProbeType.SCTLR_WRITE,
    SysReg.TTBR0: ProbeType.TTBR_WRITE,
    SysReg.TTBR1: ProbeType.TTBR_WRITE,
    SysReg.TTBCR: ProbeType.TTBCR_WRITE,
}


class ScanError(Exception):
    pass


@dataclass(frozen=True, order=True)
class PlanEntry:
    va: int
    probe_type: ProbeType


@dataclass(frozen=True)
class PlacementPlan:
    entries: tuple[PlanEntry, ...]

    def counts(self) -> dict[ProbeType, int]:
        c = Counter(e.probe_type for e in self.entries)
        return {t: c.get(t, 0) for t in ProbeType}

    def count_tuple(self) -> tuple[int, int, int, int]:
        c = self.counts()
        return tuple(c[t] for t in ProbeType)

    def __len__(self):
        return len(self.entries)

    def to_text(self) -> str:
        lines = [f"{e.va:#010x} {e.probe_type.name}" for e in self.entries]
        c = self.counts()
        summary = " ".join(f"{t.tag}={c[t]}" for t in ProbeType)
        lines.append(f"# total={len(self.entries)} {summary}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> PlacementPlan:
        entries = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                va, tag = line.split()
                entries.append(PlanEntry(int(va, 16), ProbeType[tag]))
            except (ValueError, KeyError):
                raise ScanError(f"plan line {n}: cannot parse {line!r}") from None
        plan = cls(tuple(entries))
        plan.check()
        return plan

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> PlacementPlan:
        return cls.from_text(Path(path).read_text())

    def check(self) -> None:
        vas = [e.va for e in self.entries]
        if len(set(vas)) != len(vas):
            raise ScanError("duplicate probe address in plan")
        if any(va & 3 for va in vas):
            raise ScanError("probe address not word aligned")
        if self.counts()[ProbeType.FAULT_HANDLER] != 1:
            raise ScanError("plan needs exactly one fault-handler probe")


def sysreg_write_target(ins) -> ProbeType | None:
    if isinstance(ins, Instruction) and ins.mnemonic == "MSR":
        return MSR_TARGETS.get(SysReg(ins.sysreg))
    return None


def scan(image: Image, text_ranges: list[tuple[int, int]] | None = None,
         vector_base: int = VBASE_HIGH) -> PlacementPlan:
    if text_ranges is None:
        text_ranges = [(s.vaddr, s.vend) for s in image.text_sections()]
    entries = []
    for start, end in text_ranges:
        if start % 4 or end % 4:
            raise ScanError(f"text range {start:#x}-{end:#x} is not word aligned")
        for va in range(start, end, 4):
            t = sysreg_write_target(decode(image.word_at(va)))
            if t is not None:
                entries.append(PlanEntry(va, t))
    if not entries:
        warnings.warn("no system-register writes found in the text ranges", stacklevel=2)

    slot = vector_base + ExceptionKind.DATA_ABORT.value
    try:
        ins = decode(image.word_at(slot))
    except ImageError as exc:
        raise ScanError(f"data-abort vector slot: {exc}") from None
    if not isinstance(ins, Instruction) or ins.mnemonic != "B":
        raise ScanError(f"data-abort vector slot at {slot:#010x} is not a branch")
    handler = (slot + 4 * ins.imm) & 0xFFFFFFFF
    if not any(s <= handler < e for s, e in text_ranges):
        raise ScanError(f"abort handler {handler:#010x} lies outside the text ranges")
    if any(e.va == handler for e in entries):
        raise ScanError("abort handler starts with a system-register write")
    entries.append(PlanEntry(handler, ProbeType.FAULT_HANDLER))
    plan = PlacementPlan(tuple(sorted(entries)))
    plan.check()
    return plan
