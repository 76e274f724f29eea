"""Secure-world probe manager.

A probe replaces one normal-world instruction with ``SMC #0``. When the
normal world retires that SMC the machine switches to the secure world;
:meth:`SprobeEngine.on_smc` builds a :class:`Snapshot` from the saved
normal-world bank and asks the registered handler for a verdict, and
:meth:`SprobeEngine.resume` applies it.

Probes stay armed for their whole lifetime. The replaced instruction is
never written back to execute it; the engine runs it through the
machine's own instruction semantics against the normal-world state, so
there is no window in which a probe site holds its original word, and a
handler can substitute a filtered value for the one the kernel asked for.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Union

from .alerts import Alert, AlertKind
from .isa import SMC0, Instruction, SysReg, Undefined, decode, format_instruction
from .machine import Machine
from .memory import MemoryFault, SECURE_RAM_BASE, SECURE_RAM_SIZE, World
from .mmu import FRAME_MASK, NO_L2, WalkError, read_pte
from .sysregs import PSR_MODE_MASK, RegisterFile, SysRegs, psr_mode

REGISTRY_BASE = SECURE_RAM_BASE + 0x1000
_RECORD = struct.Struct("<IIII")  # va, pa, original, probe type
MAX_PROBES = (SECURE_RAM_SIZE - 0x1000) // _RECORD.size


class ProbeType(Enum):
    SCTLR_WRITE = 1
    TTBR_WRITE = 2
    TTBCR_WRITE = 3
    FAULT_HANDLER = 4

    @property
    def tag(self) -> str:
        return f"#{self.value}"


class ProbeError(Exception):
    pass


@dataclass
class Sprobe:
    va: int
    pa: int
    original: int
    probe_type: ProbeType
    handler_id: str
    hit_count: int = 0

    @property
    def instruction(self) -> Instruction:
        return decode(self.original)


@dataclass(frozen=True)
class Snapshot:
    """Normal-world state at a trap, as seen by the secure world."""

    regs: RegisterFile
    sysregs: SysRegs
    pc: int
    pa: int
    counter: int
    probe: Sprobe | None


# -- verdicts -------------------------------------------------------------


@dataclass(frozen=True)
class SysRegWrite:
    """An MSR with the value chosen by the handler instead of a register."""

    reg: SysReg
    value: int


@dataclass(frozen=True)
class EmulateAndResume:
    effective: Instruction | SysRegWrite
    resume_pc: int


@dataclass(frozen=True)
class SkipAndResume:
    """Resume without executing anything.

    With ``eret`` the normal world instead returns from the exception it was
    entering: psr <- spsr and execution continues after the instruction at
    elr. That is how a faulting store is retired once the secure world has
    performed it on the kernel's behalf.
    """

    resume_pc: int = 0
    eret: bool = False


class _PassThrough:
    def __repr__(self):
        return "PassThrough"


PassThrough = _PassThrough()


class BlockAction(Enum):
    HALT = "HALT"
    SKIP = "SKIP"


@dataclass(frozen=True)
class Block:
    alert: Alert
    action: BlockAction
    resume_pc: int | None = None  # default: after the trapped instruction
    eret: bool = False


Verdict = Union[EmulateAndResume, SkipAndResume, _PassThrough, Block]
Handler = Callable[[Snapshot], Verdict]


def verdict_name(v: Verdict) -> str:
    if isinstance(v, Block):
        return f"Block({v.alert.kind.value},{v.action.value})"
    return type(v).__name__.lstrip("_")


@dataclass(frozen=True)
class TrapRecord:
    counter: int
    probe_type: str
    va: int
    verdict: str

    def to_json(self) -> str:
        return json.dumps({"instruction_counter": self.counter, "probe_type": self.probe_type,
                           "va": f"{self.va:#010x}", "verdict": self.verdict}, sort_keys=True)


@dataclass
class SprobeEngine:
    machine: Machine
    unexpected_smc: str = "block"     # or "nop"
    halt_on_alert: bool = False
    table_base: int | None = None     # page table used to resolve probe addresses
    alert_log: list[Alert] = field(default_factory=list)
    trace: list[TrapRecord] = field(default_factory=list)
    snapshot_listeners: list[Callable[[Snapshot], None]] = field(default_factory=list)
    probes: dict[int, Sprobe] = field(default_factory=dict)
    handlers: dict[str, Handler] = field(default_factory=dict)
    halted_by: Alert | None = None

    def __post_init__(self):
        if self.unexpected_smc not in ("block", "nop"):
            raise ValueError("unexpected_smc must be 'block' or 'nop'")

    # -- installation -------------------------------------------------------

    def register_handler(self, handler_id: str, fn: Handler) -> None:
        self.handlers[handler_id] = fn

    def resolve(self, va: int) -> int:
        """Physical address of a normal-world virtual address, from the secure side."""
        m = self.machine
        base = self.table_base
        if base is None:
            if not m.sysregs.m:
                return va
            base = m.sysregs.ttbr0 & FRAME_MASK
        try:
            hit = read_pte(base, va, m.mem)
        except WalkError as exc:
            raise ProbeError(str(exc)) from None
        if hit is NO_L2 or not hit[1].valid:
            raise ProbeError(f"{va:#010x} is not mapped")
        return hit[1].frame | (va & 0xFFF)

    def insert(self, va: int, probe_type: ProbeType, handler_id: str) -> Sprobe:
        if va & 3:
            raise ProbeError(f"probe address {va:#010x} is not word aligned")
        pa = self.resolve(va)
        if pa in self.probes:
            raise ProbeError(f"{pa:#010x} is already probed")
        if len(self.probes) >= MAX_PROBES:
            raise ProbeError("probe registry is full")
        mem = self.machine.mem
        try:
            original = mem.read_word(pa, World.SECURE)
        except MemoryFault:
            raise ProbeError(f"{pa:#010x} is not backed by memory") from None
        ins = decode(original)
        if isinstance(ins, Undefined) or ins.mnemonic == "SMC":
            raise ProbeError(f"cannot probe {format_instruction(ins)} at {va:#010x}")
        probe = Sprobe(va, pa, original, probe_type, handler_id)
        mem.write_word(pa, SMC0, World.SECURE)
        self.probes[pa] = probe
        self._write_registry()
        return probe

    def remove(self, probe: Sprobe) -> None:
        if self.probes.get(probe.pa) is not probe:
            raise ProbeError(f"no probe installed at {probe.pa:#010x}")
        self.machine.mem.write_word(probe.pa, probe.original, World.SECURE)
        del self.probes[probe.pa]
        self._write_registry()

    def _write_registry(self) -> None:
        # mirror of the registry in secure RAM, where the normal world cannot reach it
        blob = bytearray(MAX_PROBES * _RECORD.size)
        for i, p in enumerate(self.probes.values()):
            _RECORD.pack_into(blob, i * _RECORD.size, p.va, p.pa, p.original, p.probe_type.value)
        self.machine.mem.write_bytes(REGISTRY_BASE, bytes(blob))

    def read_registry(self) -> list[tuple[int, int, int, int]]:
        blob = self.machine.mem.read_bytes(REGISTRY_BASE, len(self.probes) * _RECORD.size)
        return [_RECORD.unpack_from(blob, i * _RECORD.size) for i in range(len(self.probes))]

    # -- trap path ------------------------------------------------------------

    def on_smc(self) -> Verdict:
        m = self.machine
        if m.world is not World.SECURE:
            raise ProbeError("on_smc outside the secure world")
        saved = m.banks[World.NORMAL]
        pa = m.last_smc.fetch_pa
        probe = self.probes.get(pa)
        snap = Snapshot(saved.copy(), m.sysregs.copy(), saved.pc, pa, m.counter, probe)
        for fn in self.snapshot_listeners:
            fn(snap)
        self._snap = snap
        if probe is None:
            if self.unexpected_smc == "nop":
                return SkipAndResume(saved.pc + 4)
            alert = Alert(AlertKind.UNEXPECTED_SMC, f"SMC at {saved.pc:#010x} is not a probe site", m.counter)
            return Block(alert, BlockAction.HALT if self.halt_on_alert else BlockAction.SKIP)
        probe.hit_count += 1
        return self.handlers[probe.handler_id](snap)

    def resume(self, verdict: Verdict) -> None:
        m = self.machine
        snap = self._snap
        trap_pc = snap.pc
        if m.world is not World.SECURE:
            raise ProbeError("resume outside the secure world")
        m.world_switch(World.NORMAL, trap_pc)
        if verdict is PassThrough:
            assert snap.probe is not None, "PassThrough needs a probe to emulate"
            m.execute(snap.probe.instruction, trap_pc)
        elif isinstance(verdict, EmulateAndResume):
            eff = verdict.effective
            if isinstance(eff, SysRegWrite):
                if psr_mode(m.regs.psr) == 0:
                    raise ProbeError("system register write emulated for user mode")
                m.sysregs.set(eff.reg, eff.value)
                m.regs.pc = verdict.resume_pc
            else:
                before = m.exc_pending
                m.execute(eff, trap_pc)
                if m.regs.pc == (trap_pc + 4) & 0xFFFFFFFF and m.exc_pending == before:
                    m.regs.pc = verdict.resume_pc
        elif isinstance(verdict, SkipAndResume):
            self._skip(verdict.resume_pc, verdict.eret)
        elif isinstance(verdict, Block):
            self.alert_log.append(verdict.alert)
            if verdict.action is BlockAction.HALT:
                self.halted_by = verdict.alert
                m.halt(f"monitor halt: {verdict.alert.kind.value}: {verdict.alert.detail}")
            else:
                self._skip(trap_pc + 4 if verdict.resume_pc is None else verdict.resume_pc, verdict.eret)
        else:
            raise ProbeError(f"unknown verdict {verdict!r}")
        self.trace.append(TrapRecord(snap.counter, snap.probe.probe_type.tag if snap.probe else "none",
                                     trap_pc, verdict_name(verdict)))

    def _skip(self, resume_pc: int, eret: bool) -> None:
        m = self.machine
        if eret:
            spsr = m.sysregs.spsr
            if spsr & PSR_MODE_MASK > 1:
                raise ProbeError("cannot return into the saved mode")
            m.regs.psr = spsr
            m.regs.pc = (m.sysregs.elr + 4) & 0xFFFFFFFF
            m.exc_pending = False
        else:
            m.regs.pc = resume_pc & 0xFFFFFFFF

    def handle_trap(self) -> Verdict:
        verdict = self.on_smc()
        self.resume(verdict)
        return verdict


__all__ = [
    "Sprobe", "Snapshot", "ProbeType", "ProbeError", "SprobeEngine", "SysRegWrite", "EmulateAndResume",
    "SkipAndResume", "PassThrough", "Block", "BlockAction", "Verdict", "TrapRecord", "verdict_name",
    "REGISTRY_BASE",
]
