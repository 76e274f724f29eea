"""NS-tagged physical memory shared by both worlds."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

PAGE_SIZE = 4096
PAGE_SHIFT = 12


class World(Enum):
    NORMAL = "normal"
    SECURE = "secure"


class FaultKind(Enum):
    TRANSLATION = "translation"
    PERMISSION = "permission"
    ALIGNMENT = "alignment"
    EXTERNAL = "external"


class MemoryFault(Exception):
    """A failed normal-world memory access (raised on the hot path)."""

    def __init__(self, kind: FaultKind, va: int, *, write: bool = False, fetch: bool = False):
        super().__init__(f"{kind.value} fault at {va:#010x}")
        self.kind = kind
        self.va = va
        self.write = write
        self.fetch = fetch


@dataclass(frozen=True)
class ExternalAbortEvent:
    """Harness-visible record of a normal-world access that hit secure or absent memory."""

    pa: int
    write: bool
    secure_region: bool


@dataclass
class Region:
    base: int
    size: int
    ns: bool
    name: str = ""
    data: bytearray = field(default=None, repr=False)

    def __post_init__(self):
        if self.base % PAGE_SIZE or self.size % PAGE_SIZE:
            raise ValueError("regions must be page aligned")
        if self.data is None:
            self.data = bytearray(self.size)
        self.words = memoryview(self.data).cast("I")

    @property
    def end(self) -> int:
        return self.base + self.size

    def __contains__(self, pa: int) -> bool:
        return self.base <= pa < self.end


if sys.byteorder != "little":  # pragma: no cover
    raise ImportError("word views assume a little-endian host")


WriteObserver = Callable[[World, int, int], None]


class PhysicalMemory:
    """A handful of contiguous regions, each tagged normal (ns=True) or secure.

    Word accesses take a physical address and the requesting world. A normal
    world access to a secure region, or to an address no region covers,
    raises an external :class:`MemoryFault` and appends an
    :class:`ExternalAbortEvent` to ``external_aborts``.
    """

    def __init__(self, regions: list[Region]):
        self.regions = sorted(regions, key=lambda r: r.base)
        for a, b in zip(self.regions, self.regions[1:]):
            if a.end > b.base:
                raise ValueError("overlapping regions")
        self.external_aborts: list[ExternalAbortEvent] = []
        self.write_observers: list[WriteObserver] = []
        self._last = self.regions[0]

    def region_of(self, pa: int) -> Region | None:
        r = self._last
        if r.base <= pa < r.base + r.size:
            return r
        for r in self.regions:
            if r.base <= pa < r.base + r.size:
                self._last = r
                return r
        return None

    def is_normal(self, pa: int) -> bool:
        r = self.region_of(pa)
        return r is not None and r.ns

    def _resolve(self, pa: int, world: World, write: bool) -> Region:
        r = self.region_of(pa)
        if r is None or (world is World.NORMAL and not r.ns):
            if world is World.NORMAL:
                self.external_aborts.append(ExternalAbortEvent(pa, write, r is not None))
            raise MemoryFault(FaultKind.EXTERNAL, pa, write=write)
        return r

    def read_word(self, pa: int, world: World = World.NORMAL) -> int:
        r = self._resolve(pa, world, False)
        return r.words[(pa - r.base) >> 2]

    def write_word(self, pa: int, value: int, world: World = World.NORMAL) -> None:
        r = self._resolve(pa, world, True)
        r.words[(pa - r.base) >> 2] = value & 0xFFFFFFFF
        for obs in self.write_observers:
            obs(world, pa, value & 0xFFFFFFFF)

    def read_bytes(self, pa: int, n: int) -> bytes:
        """Secure-world bulk read (loader, digests)."""
        r = self._resolve(pa, World.SECURE, False)
        if pa + n > r.end:
            raise MemoryFault(FaultKind.EXTERNAL, pa + n)
        return bytes(r.data[pa - r.base:pa - r.base + n])

    def write_bytes(self, pa: int, data: bytes) -> None:
        """Secure-world bulk write (loader)."""
        r = self._resolve(pa, World.SECURE, True)
        if pa + len(data) > r.end:
            raise MemoryFault(FaultKind.EXTERNAL, pa + len(data), write=True)
        r.data[pa - r.base:pa - r.base + len(data)] = data

    def copy(self) -> PhysicalMemory:
        return PhysicalMemory([Region(r.base, r.size, r.ns, r.name, bytearray(r.data)) for r in self.regions])


# Default board: 4 MiB of normal-world RAM and 64 KiB of secure RAM.
NORMAL_RAM_BASE = 0xC0000000
NORMAL_RAM_SIZE = 0x00400000
SECURE_RAM_BASE = 0x80000000
SECURE_RAM_SIZE = 0x00010000


def default_memory() -> PhysicalMemory:
    return PhysicalMemory([
        Region(NORMAL_RAM_BASE, NORMAL_RAM_SIZE, ns=True, name="dram"),
        Region(SECURE_RAM_BASE, SECURE_RAM_SIZE, ns=False, name="secure"),
    ])
