"""Single-core two-world CPU: fetch/decode/execute, exceptions, SMC world switch."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple

from .isa import LR, Instruction, SysReg, Undefined, decode
from .memory import PAGE_SHIFT, FaultKind, MemoryFault, PhysicalMemory, World, default_memory
from .mmu import FRAME_MASK, Access, Privilege, lookup, permitted
from .sysregs import (
    DFSR_ALIGNMENT, DFSR_EXTERNAL, DFSR_FETCH, DFSR_PERMISSION, DFSR_TRANSLATION, DFSR_WNR,
    PSR_MODE_MASK, PSR_Z, SCTLR_M, SCTLR_V, SCTLR_WXN, CpuMode, RegisterFile, SysRegs, make_psr,
)

MASK = 0xFFFFFFFF
VBASE_HIGH = 0xFFFF0000
VBASE_LOW = 0x00000000
# Simulator constant: real parts take this from a monitor vector base register.
MONITOR_ENTRY = 0x80000000

_USER = int(CpuMode.USER)
_SVC = int(CpuMode.SUPERVISOR)
_MODES = tuple(CpuMode)

# access codes for the permission table
FETCH, READ, WRITE = 0, 1, 2
_ACCESS = (Access.FETCH, Access.READ, Access.WRITE)


def _permission_table() -> bytes:
    """Index: pte[5:0] | access << 6 | user << 8 | wxn << 9."""
    out = bytearray(1024)
    for i in range(1024):
        pte, access, user, wxn = i & 0x3F, (i >> 6) & 3, (i >> 8) & 1, (i >> 9) & 1
        if access < 3:
            priv = Privilege.USER if user else Privilege.PRIVILEGED
            out[i] = permitted(pte, _ACCESS[access], priv, bool(wxn))
    return bytes(out)


_PERM = _permission_table()

_DFSR_STATUS = {
    FaultKind.ALIGNMENT: DFSR_ALIGNMENT,
    FaultKind.TRANSLATION: DFSR_TRANSLATION,
    FaultKind.PERMISSION: DFSR_PERMISSION,
    FaultKind.EXTERNAL: DFSR_EXTERNAL,
}


class ExceptionKind(Enum):
    """Exception type; the value is the slot offset in the vector table."""

    RESET = 0x00
    UNDEF = 0x04
    SVC = 0x08
    PREFETCH_ABORT = 0x0C
    DATA_ABORT = 0x10
    IRQ = 0x18
    FIQ = 0x1C


class MachineHalted(Exception):
    pass


class WorldSwitchError(Exception):
    pass


class _UndefinedInstruction(Exception):
    pass


def dfsr_for(fault: MemoryFault) -> int:
    code = _DFSR_STATUS[fault.kind]
    if fault.write:
        code |= DFSR_WNR
    if fault.fetch:
        code |= DFSR_FETCH
    return code


class StepEvent(NamedTuple):
    """One retired instruction."""

    world: World
    mode: CpuMode
    pc: int
    frame: int  # physical frame number the instruction was fetched from
    word: int
    instruction: Instruction
    counter: int  # normal-world retirements so far, this one included


@dataclass(frozen=True, slots=True)
class ExceptionEvent:
    kind: ExceptionKind
    from_mode: CpuMode
    return_addr: int
    vector: int
    counter: int


@dataclass(frozen=True)
class SmcRecord:
    """Hardware-side copy of the normal-world state at an SMC retirement."""

    regs: RegisterFile
    sysregs: SysRegs
    pc: int
    fetch_pa: int


class Machine:
    """The whole simulated machine.

    ``regs`` is the active register bank; ``banks`` holds the saved bank of
    each world (while the secure world runs, ``banks[World.NORMAL]`` is the
    monitor's copy of the interrupted normal-world state). ``sysregs`` are
    the normal world's system registers; the secure world runs flat against
    physical memory and is driven from Python, not stepped.
    """

    def __init__(self, memory: PhysicalMemory | None = None):
        self.mem = memory if memory is not None else default_memory()
        self.sysregs = SysRegs()
        self.regs = RegisterFile(psr=make_psr(CpuMode.SUPERVISOR))
        self.banks = {
            World.NORMAL: self.regs.copy(),
            World.SECURE: RegisterFile(pc=MONITOR_ENTRY, psr=make_psr(CpuMode.MONITOR)),
        }
        self.world = World.NORMAL
        self.halted = False
        self.halt_reason = ""
        self.halt_code: int | None = None
        self.counter = 0
        self.exc_pending = False
        self.irq_pending = False
        self.last_smc: SmcRecord | None = None
        self.trace: list[StepEvent] | None = None
        self.step_listeners: list[Callable[[StepEvent], None]] = []
        self.exception_listeners: list[Callable[[ExceptionEvent], None]] = []
        self._in_smc_entry = False
        self._fetch_pa = 0
        ram = max((r for r in self.mem.regions if r.ns), key=lambda r: r.size)
        self._ram_base, self._ram_size, self._ram_words = ram.base, ram.size, ram.words
        # software TLB: vpage -> (pte, l1 frame, l2 frame); permissions are rechecked on every hit
        self._tlb: dict[int, tuple[int, int, int]] = {}
        self._tlb_key: tuple[int, int, int] | None = None
        self._tlb_frames: set[int] = set()
        self.mem.write_observers.append(self._observe_write)
        self._ops = {
            "NOP": self._op_nop, "MOVI": self._op_movi, "MOVT": self._op_movt, "MOV": self._op_mov,
            "ADD": self._op_alu, "SUB": self._op_alu, "AND": self._op_alu, "OR": self._op_alu,
            "XOR": self._op_alu, "LDR": self._op_ldr, "STR": self._op_str, "B": self._op_b,
            "BL": self._op_bl, "BR": self._op_br, "CMP": self._op_cmp, "BEQ": self._op_beq,
            "BNE": self._op_bne, "MSR": self._op_msr, "MRS": self._op_mrs, "ERET": self._op_eret,
            "SVC": self._op_svc, "SMC": self._op_smc, "HALT": self._op_halt,
        }

    # -- state helpers -------------------------------------------------

    @property
    def mode(self) -> CpuMode:
        return CpuMode(self.regs.psr & PSR_MODE_MASK)

    @property
    def normal_bank(self) -> RegisterFile:
        """The normal world's registers, wherever they currently live."""
        return self.regs if self.world is World.NORMAL else self.banks[World.NORMAL]

    def reset(self, entry: int, mode: CpuMode = CpuMode.SUPERVISOR) -> None:
        self.flush_tlb()
        self.world = World.NORMAL
        self.regs = RegisterFile(pc=entry, psr=make_psr(mode))
        self.banks[World.NORMAL] = self.regs.copy()
        self.halted = False
        self.halt_reason = ""
        self.halt_code = None
        self.exc_pending = False

    def halt(self, reason: str, code: int | None = None) -> None:
        self.halted = True
        self.halt_reason = reason
        self.halt_code = code

    @property
    def vector_base(self) -> int:
        return VBASE_HIGH if self.sysregs.sctlr & SCTLR_V else VBASE_LOW

    def raise_irq(self) -> None:
        self.irq_pending = True

    # -- memory access on behalf of the normal world -----------------------

    def flush_tlb(self) -> None:
        self._tlb.clear()
        self._tlb_frames.clear()

    def _observe_write(self, world: World, pa: int, value: int) -> None:
        if pa >> PAGE_SHIFT in self._tlb_frames:
            self.flush_tlb()

    def translate(self, va: int, access: int, user: bool) -> int:
        """Normal-world virtual to physical, under the current regime."""
        sr = self.sysregs
        if not sr.sctlr & SCTLR_M:
            return va
        key = (sr.ttbr0, sr.ttbr1, sr.ttbcr)
        if key != self._tlb_key:
            self.flush_tlb()
            self._tlb_key = key
        hit = self._tlb.get(va >> PAGE_SHIFT)
        if hit is None:
            pte, l1_pa, l2_pa = lookup(va, sr, self.mem, write=access == WRITE, fetch=access == FETCH)
            self._tlb_frames.add(l1_pa >> PAGE_SHIFT)
            self._tlb_frames.add(l2_pa >> PAGE_SHIFT)
            self._tlb[va >> PAGE_SHIFT] = hit = (pte, l1_pa, l2_pa)
        pte = hit[0]
        if not _PERM[(pte & 0x3F) | access << 6 | user << 8 | (sr.sctlr & SCTLR_WXN and 512)]:
            raise MemoryFault(FaultKind.PERMISSION, va, write=access == WRITE, fetch=access == FETCH)
        return (pte & FRAME_MASK) | (va & 0xFFF)

    def data_pa(self, va: int, access: Access, mode: int) -> int:
        return self.translate(va, _ACCESS.index(access), mode == _USER)

    def fetch_pa(self, va: int, mode: int) -> int:
        if va & 3:
            raise MemoryFault(FaultKind.ALIGNMENT, va, fetch=True)
        return self.translate(va, FETCH, mode == _USER)

    def _read_pa(self, pa: int) -> int:
        off = pa - self._ram_base
        if 0 <= off < self._ram_size:
            return self._ram_words[off >> 2]
        return self.mem.read_word(pa, World.NORMAL)

    def load(self, va: int, mode: int) -> int:
        if va & 3:
            raise MemoryFault(FaultKind.ALIGNMENT, va)
        pa = self.translate(va, READ, mode == _USER)
        try:
            return self._read_pa(pa)
        except MemoryFault:
            raise MemoryFault(FaultKind.EXTERNAL, va) from None

    def store(self, va: int, value: int, mode: int) -> None:
        if va & 3:
            raise MemoryFault(FaultKind.ALIGNMENT, va, write=True)
        pa = self.translate(va, WRITE, mode == _USER)
        try:
            self.mem.write_word(pa, value, World.NORMAL)
        except MemoryFault:
            raise MemoryFault(FaultKind.EXTERNAL, va, write=True) from None

    # -- stepping ----------------------------------------------------------

    def step(self) -> StepEvent | None:
        """Advance by one normal-world step.

        Returns the :class:`StepEvent` for the retired instruction, or
        ``None`` when the step was an exception entry instead.
        """
        if self.halted:
            raise MachineHalted(self.halt_reason)
        if self.world is not World.NORMAL:
            raise WorldSwitchError("the secure world is not stepped; resume it through the monitor")
        regs = self.regs
        mode = regs.psr & PSR_MODE_MASK
        if self.irq_pending and mode == _USER:
            self.irq_pending = False
            self.enter_exception(ExceptionKind.IRQ, regs.pc)
            return None
        pc = regs.pc
        try:
            if pc & 3:
                raise MemoryFault(FaultKind.ALIGNMENT, pc, fetch=True)
            pa = self.translate(pc, FETCH, mode == _USER)
            word = self._read_pa(pa)
        except MemoryFault as f:
            if f.kind is FaultKind.EXTERNAL:
                f = MemoryFault(FaultKind.EXTERNAL, pc, fetch=True)
            self.enter_exception(ExceptionKind.PREFETCH_ABORT, pc, f)
            return None
        ins = decode(word)
        if ins.__class__ is Undefined:
            self.enter_exception(ExceptionKind.UNDEF, (pc + 4) & MASK)
            return None
        self._fetch_pa = pa
        try:
            self._ops[ins.mnemonic](ins, pc, mode)
        except MemoryFault as f:
            self.enter_exception(ExceptionKind.DATA_ABORT, pc, f)
            return None
        except _UndefinedInstruction:
            self.enter_exception(ExceptionKind.UNDEF, (pc + 4) & MASK)
            return None
        self.counter += 1
        ev = StepEvent(World.NORMAL, _MODES[mode], pc, pa >> PAGE_SHIFT, word, ins, self.counter)
        if self.trace is not None:
            self.trace.append(ev)
        for fn in self.step_listeners:
            fn(ev)
        return ev

    def execute(self, ins: Instruction, pc: int) -> None:
        """Apply one instruction's semantics to the normal world as if it sat at ``pc``.

        Used by the secure world to emulate a probed instruction. Faults are
        delivered to the normal world exactly as a direct execution would.
        """
        if self.world is not World.NORMAL:
            raise WorldSwitchError("emulation targets the normal world")
        mode = self.regs.psr & PSR_MODE_MASK
        try:
            self._ops[ins.mnemonic](ins, pc, mode)
        except MemoryFault as f:
            self.enter_exception(ExceptionKind.DATA_ABORT, pc, f)
        except _UndefinedInstruction:
            self.enter_exception(ExceptionKind.UNDEF, (pc + 4) & MASK)

    def run(self, max_steps: int) -> int:
        n = 0
        while n < max_steps and not self.halted and self.world is World.NORMAL:
            self.step()
            n += 1
        return n

    # -- exceptions and world switches -------------------------------------

    def enter_exception(self, kind: ExceptionKind, return_addr: int, fault: MemoryFault | None = None) -> None:
        if self.world is not World.NORMAL:
            raise WorldSwitchError("exceptions are only modelled in the normal world")
        regs = self.regs
        from_mode = CpuMode(regs.psr & PSR_MODE_MASK)
        if self.exc_pending:
            self.halt(f"double fault: {kind.name} at {return_addr:#010x} before the previous "
                      "exception entry was saved")
            return
        sr = self.sysregs
        sr.spsr = regs.psr
        sr.elr = return_addr & MASK
        if fault is not None:
            sr.dfar = fault.va & MASK
            sr.dfsr = dfsr_for(fault)
        regs.psr = _SVC
        regs.pc = (self.vector_base + kind.value) & MASK
        self.exc_pending = True
        if self.exception_listeners:
            ev = ExceptionEvent(kind, from_mode, return_addr, regs.pc, self.counter)
            for fn in self.exception_listeners:
                fn(ev)

    def world_switch(self, to: World, entry_pc: int) -> None:
        if to is self.world:
            raise WorldSwitchError(f"already in the {to.value} world")
        if self.world is World.NORMAL and not self._in_smc_entry:
            raise WorldSwitchError("the normal world can only leave through SMC")
        self.banks[self.world] = self.regs.copy()
        self.regs = self.banks[to].copy()
        self.regs.pc = entry_pc & MASK
        if to is World.SECURE:
            self.regs.psr = make_psr(CpuMode.MONITOR)
        self.world = to

    # -- instruction semantics ---------------------------------------------

    def _priv(self, mode: int) -> None:
        if mode == _USER:
            raise _UndefinedInstruction()

    def _op_nop(self, ins, pc, mode):
        self.regs.pc = (pc + 4) & MASK

    def _op_movi(self, ins, pc, mode):
        self.regs.r[ins.rd] = ins.imm & MASK
        self.regs.pc = (pc + 4) & MASK

    def _op_movt(self, ins, pc, mode):
        r = self.regs.r
        r[ins.rd] = (r[ins.rd] & 0xFFFF) | ins.imm << 16
        self.regs.pc = (pc + 4) & MASK

    def _op_mov(self, ins, pc, mode):
        self.regs.r[ins.rd] = self.regs.r[ins.rs]
        self.regs.pc = (pc + 4) & MASK

    def _op_alu(self, ins, pc, mode):
        r = self.regs.r
        a, b = r[ins.rs], r[ins.rt]
        m = ins.mnemonic
        if m == "ADD":
            v = a + b
        elif m == "SUB":
            v = a - b
        elif m == "AND":
            v = a & b
        elif m == "OR":
            v = a | b
        else:
            v = a ^ b
        r[ins.rd] = v & MASK
        self.regs.pc = (pc + 4) & MASK

    def _op_ldr(self, ins, pc, mode):
        r = self.regs.r
        r[ins.rd] = self.load((r[ins.rs] + ins.imm) & MASK, mode)
        self.regs.pc = (pc + 4) & MASK

    def _op_str(self, ins, pc, mode):
        r = self.regs.r
        self.store((r[ins.rs] + ins.imm) & MASK, r[ins.rd], mode)
        self.regs.pc = (pc + 4) & MASK

    def _op_b(self, ins, pc, mode):
        self.regs.pc = (pc + 4 * ins.imm) & MASK

    def _op_bl(self, ins, pc, mode):
        self.regs.r[LR] = (pc + 4) & MASK
        self.regs.pc = (pc + 4 * ins.imm) & MASK

    def _op_br(self, ins, pc, mode):
        self.regs.pc = self.regs.r[ins.rd]

    def _op_cmp(self, ins, pc, mode):
        regs = self.regs
        if regs.r[ins.rd] == regs.r[ins.rs]:
            regs.psr |= PSR_Z
        else:
            regs.psr &= ~PSR_Z
        regs.pc = (pc + 4) & MASK

    def _op_beq(self, ins, pc, mode):
        self.regs.pc = (pc + 4 * ins.imm if self.regs.psr & PSR_Z else pc + 4) & MASK

    def _op_bne(self, ins, pc, mode):
        self.regs.pc = (pc + 4 if self.regs.psr & PSR_Z else pc + 4 * ins.imm) & MASK

    def _op_msr(self, ins, pc, mode):
        self._priv(mode)
        self.sysregs.set(ins.sysreg, self.regs.r[ins.rs])
        self.regs.pc = (pc + 4) & MASK

    def _op_mrs(self, ins, pc, mode):
        self._priv(mode)
        self.regs.r[ins.rd] = self.sysregs.get(ins.sysreg)
        if ins.sysreg in (SysReg.ELR, SysReg.SPSR):
            # reading the return state counts as the handler having saved it
            self.exc_pending = False
        self.regs.pc = (pc + 4) & MASK

    def _op_eret(self, ins, pc, mode):
        self._priv(mode)
        spsr = self.sysregs.spsr
        if spsr & PSR_MODE_MASK not in (_USER, _SVC):
            raise _UndefinedInstruction()
        self.regs.psr = spsr
        self.regs.pc = self.sysregs.elr
        self.exc_pending = False

    def _op_svc(self, ins, pc, mode):
        self.enter_exception(ExceptionKind.SVC, (pc + 4) & MASK)

    def _op_smc(self, ins, pc, mode):
        self._priv(mode)
        self.regs.pc = pc
        self.last_smc = SmcRecord(self.regs.copy(), self.sysregs.copy(), pc, self._fetch_pa)
        self._in_smc_entry = True
        try:
            self.world_switch(World.SECURE, MONITOR_ENTRY)
        finally:
            self._in_smc_entry = False

    def _op_halt(self, ins, pc, mode):
        self._priv(mode)
        self.regs.pc = (pc + 4) & MASK
        self.halt("HALT", self.regs.r[0])


__all__ = [
    "Machine", "StepEvent", "ExceptionEvent", "ExceptionKind", "MachineHalted", "WorldSwitchError",
    "SmcRecord", "VBASE_HIGH", "VBASE_LOW", "MONITOR_ENTRY",
]
