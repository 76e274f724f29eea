"""CPU modes, program status words and the system-register file."""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import IntEnum

from .isa import NUM_GPRS, SysReg


class CpuMode(IntEnum):
    USER = 0
    SUPERVISOR = 1
    MONITOR = 2


# psr layout: bits[1:0] mode, bit 30 Z flag
PSR_MODE_MASK = 0x3
PSR_Z = 1 << 30

# SCTLR bits (ARM positions)
SCTLR_M = 1 << 0
SCTLR_A = 1 << 1
SCTLR_V = 1 << 13
SCTLR_WXN = 1 << 19

# DFSR layout: bits[3:0] status, bit 11 write-not-read, bit 12 instruction fetch
DFSR_ALIGNMENT = 0x1
DFSR_TRANSLATION = 0x5
DFSR_EXTERNAL = 0x8
DFSR_PERMISSION = 0xD
DFSR_WNR = 1 << 11
DFSR_FETCH = 1 << 12


def psr_mode(psr: int) -> CpuMode:
    return CpuMode(psr & PSR_MODE_MASK)


def make_psr(mode: CpuMode, z: bool = False) -> int:
    return int(mode) | (PSR_Z if z else 0)


@dataclass
class SysRegs:
    """Normal-world system registers. Field order matches :class:`SysReg`."""

    sctlr: int = 0
    ttbr0: int = 0
    ttbr1: int = 0
    ttbcr: int = 0
    dfar: int = 0
    dfsr: int = 0
    elr: int = 0
    spsr: int = 0

    @property
    def m(self) -> bool:
        return bool(self.sctlr & SCTLR_M)

    @property
    def wxn(self) -> bool:
        return bool(self.sctlr & SCTLR_WXN)

    @property
    def v(self) -> bool:
        return bool(self.sctlr & SCTLR_V)

    @property
    def ttbcr_n(self) -> int:
        return self.ttbcr & 0x7

    def get(self, reg: int) -> int:
        return getattr(self, _SYSREG_ATTRS[reg])

    def set(self, reg: int, value: int) -> None:
        setattr(self, _SYSREG_ATTRS[reg], value & 0xFFFFFFFF)

    def copy(self) -> SysRegs:
        return SysRegs(self.sctlr, self.ttbr0, self.ttbr1, self.ttbcr, self.dfar, self.dfsr, self.elr, self.spsr)

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_SYSREG_ATTRS = [f.name for f in fields(SysRegs)]
assert _SYSREG_ATTRS == [r.name.lower() for r in SysReg]


class RegisterFile:
    """r0-r12, sp, lr as a list plus pc and psr."""

    __slots__ = ("r", "pc", "psr")

    def __init__(self, r: list[int] | None = None, pc: int = 0, psr: int = 0):
        self.r = list(r) if r is not None else [0] * NUM_GPRS
        self.pc = pc
        self.psr = psr

    @property
    def mode(self) -> CpuMode:
        return CpuMode(self.psr & PSR_MODE_MASK)

    @property
    def z(self) -> bool:
        return bool(self.psr & PSR_Z)

    def copy(self) -> RegisterFile:
        return RegisterFile(self.r, self.pc, self.psr)

    def as_tuple(self) -> tuple:
        return (*self.r, self.pc, self.psr)

    def __eq__(self, other):
        if not isinstance(other, RegisterFile):
            return NotImplemented
        return self.as_tuple() == other.as_tuple()

    def __repr__(self):
        regs = " ".join(f"r{i}={v:#x}" for i, v in enumerate(self.r) if v)
        return f"RegisterFile(pc={self.pc:#010x} psr={self.psr:#x} {regs})"
