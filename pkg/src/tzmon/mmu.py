"""Two-level (10/10/12) virtual-to-physical translation with permission checks.

L1 entry: bits[31:12] physical base of an L2 table, bit 0 valid, all other
bits must be zero. L2 entry (:class:`PageTableEntry`): bits[31:12] frame
number, bit 0 valid, bit 1 writable at PL1, bit 2 user read, bit 3 user
write, bit 4 XN, bit 5 PXN, bits[11:6] must be zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .memory import PAGE_SHIFT, FaultKind, MemoryFault, PhysicalMemory, World
from .sysregs import SCTLR_WXN

PTE_V = 1 << 0
PTE_W = 1 << 1
PTE_UR = 1 << 2
PTE_UW = 1 << 3
PTE_XN = 1 << 4
PTE_PXN = 1 << 5
PTE_MBZ = 0xFC0
PTE_WRITE_BITS = PTE_W | PTE_UW

L1_MBZ = 0xFFE
ENTRIES = 1024
FRAME_MASK = 0xFFFFF000


class Access(Enum):
    FETCH = "fetch"
    READ = "read"
    WRITE = "write"


class Privilege(Enum):
    USER = "user"
    PRIVILEGED = "privileged"


@dataclass(frozen=True)
class PageTableEntry:
    word: int

    @property
    def valid(self) -> bool:
        return pte_valid(self.word)

    @property
    def pfn(self) -> int:
        return self.word >> PAGE_SHIFT

    @property
    def frame(self) -> int:
        return self.word & FRAME_MASK

    @property
    def writable_pl1(self) -> bool:
        return bool(self.word & PTE_W)

    @property
    def user_read(self) -> bool:
        return bool(self.word & PTE_UR)

    @property
    def user_write(self) -> bool:
        return bool(self.word & PTE_UW)

    @property
    def xn(self) -> bool:
        return bool(self.word & PTE_XN)

    @property
    def pxn(self) -> bool:
        return bool(self.word & PTE_PXN)

    @property
    def writable(self) -> bool:
        """Writable at some privilege."""
        return bool(self.word & PTE_WRITE_BITS)

    @classmethod
    def make(cls, pa: int, flags: int) -> PageTableEntry:
        return cls((pa & FRAME_MASK) | (flags & 0x3F) | PTE_V)

    def __repr__(self):
        names = [n for bit, n in ((PTE_W, "W"), (PTE_UR, "UR"), (PTE_UW, "UW"),
                                  (PTE_XN, "XN"), (PTE_PXN, "PXN")) if self.word & bit]
        tag = "|".join(names) if self.valid else "INVALID"
        return f"PTE({self.frame:#010x} {tag})"


def pte_valid(word: int) -> bool:
    # user_write without user_read is malformed, same as must-be-zero bits
    return bool(word & PTE_V) and not word & PTE_MBZ and (word & (PTE_UR | PTE_UW)) != PTE_UW


def l1_valid(word: int) -> bool:
    return bool(word & 1) and not word & L1_MBZ


@dataclass(frozen=True)
class Mapped:
    pa: int
    entry: PageTableEntry


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    va: int


TranslationResult = Mapped | Fault


def select_base(va: int, sysregs) -> int:
    n = sysregs.ttbcr & 0x7
    if n and va >> (32 - n):
        return sysregs.ttbr1 & FRAME_MASK
    return sysregs.ttbr0 & FRAME_MASK


def permitted(word: int, access: Access, priv: Privilege, wxn: bool) -> bool:
    if priv is Privilege.PRIVILEGED:
        if access is Access.READ:
            return True
        if access is Access.WRITE:
            return bool(word & PTE_WRITE_BITS)
        if word & (PTE_XN | PTE_PXN):
            return False
        return not (wxn and word & PTE_WRITE_BITS)
    if access is Access.READ:
        return bool(word & PTE_UR)
    if access is Access.WRITE:
        return bool(word & PTE_UW)
    if not word & PTE_UR or word & PTE_XN:
        return False
    return not (wxn and word & PTE_UW)


def lookup(va: int, sysregs, mem: PhysicalMemory, *, write: bool = False, fetch: bool = False) -> tuple[int, int, int]:
    """Walk both levels without checking permissions.

    Returns ``(pte_word, l1_entry_pa, l2_entry_pa)``; raises
    :class:`MemoryFault` for translation and external faults.
    """
    base = select_base(va, sysregs)
    l1_pa = base | (va >> 22) << 2
    try:
        l1 = mem.read_word(l1_pa, World.NORMAL)
        if not l1_valid(l1):
            raise MemoryFault(FaultKind.TRANSLATION, va, write=write, fetch=fetch)
        l2_pa = (l1 & FRAME_MASK) | ((va >> 12) & 0x3FF) << 2
        pte = mem.read_word(l2_pa, World.NORMAL)
    except MemoryFault as exc:
        if exc.kind is FaultKind.EXTERNAL:
            raise MemoryFault(FaultKind.EXTERNAL, va, write=write, fetch=fetch) from None
        raise
    if not pte_valid(pte):
        raise MemoryFault(FaultKind.TRANSLATION, va, write=write, fetch=fetch)
    return pte, l1_pa, l2_pa


def walk(va: int, access: Access, priv: Privilege, sysregs, mem: PhysicalMemory) -> tuple[int, int]:
    """Translate with permission checks. Returns ``(pa, pte_word)`` or raises :class:`MemoryFault`."""
    write = access is Access.WRITE
    fetch = access is Access.FETCH
    if fetch and va & 3:
        raise MemoryFault(FaultKind.ALIGNMENT, va, fetch=True)
    pte = lookup(va, sysregs, mem, write=write, fetch=fetch)[0]
    if not permitted(pte, access, priv, bool(sysregs.sctlr & SCTLR_WXN)):
        raise MemoryFault(FaultKind.PERMISSION, va, write=write, fetch=fetch)
    return (pte & FRAME_MASK) | (va & 0xFFF), pte


def translate(va: int, access: Access, priv: Privilege, sysregs, mem: PhysicalMemory) -> TranslationResult:
    """Translate ``va`` under the normal world's current regime (MMU assumed on)."""
    try:
        pa, pte = walk(va & 0xFFFFFFFF, access, priv, sysregs, mem)
    except MemoryFault as exc:
        return Fault(exc.kind, va)
    return Mapped(pa, PageTableEntry(pte))


class NoL2Table:
    """Designator returned by :func:`read_pte` when the L1 slot is invalid."""

    def __repr__(self):
        return "NO_L2"

    def __bool__(self):
        return False


NO_L2 = NoL2Table()


class WalkError(Exception):
    """A table walk left normal-world memory."""


def _read(mem: PhysicalMemory, pa: int) -> int:
    try:
        return mem.read_word(pa, World.NORMAL)
    except MemoryFault:
        raise WalkError(f"table walk touched non-normal memory at {pa:#010x}") from None


def read_pte(pt_base: int, va: int, mem: PhysicalMemory) -> tuple[int, PageTableEntry] | NoL2Table:
    """Physical address and value of the L2 entry governing ``va``."""
    if pt_base & 0xFFF:
        raise ValueError("table base must be page aligned")
    l1 = _read(mem, pt_base | (va >> 22) << 2)
    if not l1_valid(l1):
        return NO_L2
    entry_pa = (l1 & FRAME_MASK) | ((va >> 12) & 0x3FF) << 2
    return entry_pa, PageTableEntry(_read(mem, entry_pa))


def l2_tables(pt_base: int, mem: PhysicalMemory) -> list[tuple[int, int]]:
    """``(l1_slot, l2_base)`` for every valid L1 entry."""
    if pt_base & 0xFFF:
        raise ValueError("table base must be page aligned")
    out = []
    for slot in range(ENTRIES):
        l1 = _read(mem, pt_base | slot << 2)
        if l1_valid(l1):
            out.append((slot, l1 & FRAME_MASK))
    return out


def table_frames(pt_base: int, mem: PhysicalMemory) -> frozenset[int]:
    """Physical frame numbers holding the L1 table and every L2 it references."""
    return frozenset([pt_base >> PAGE_SHIFT] + [b >> PAGE_SHIFT for _, b in l2_tables(pt_base, mem)])


def enumerate_mappings(pt_base: int, mem: PhysicalMemory) -> list[tuple[int, PageTableEntry]]:
    """Every valid 4 KiB mapping, in ascending virtual address order."""
    out = []
    for slot, l2 in l2_tables(pt_base, mem):
        for i in range(ENTRIES):
            word = _read(mem, l2 | i << 2)
            if pte_valid(word):
                out.append((slot << 22 | i << 12, PageTableEntry(word)))
    return out
