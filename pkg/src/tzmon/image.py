"""Binary kernel image: header, section table, symbol table, little-endian payload."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

from .memory import PhysicalMemory

MAGIC = b"TZIM"
VERSION = 1
SECTION_KINDS = ("text", "data", "pagetable", "user")

_HEADER = struct.Struct("<4sIIIII")      # magic, version, entry, load_pa, nsections, nsymbols
_SECTION = struct.Struct("<IIII")        # kind index, vaddr, paddr, size
_SYMBOL = struct.Struct("<IH")           # value, name length


class ImageError(ValueError):
    pass


@dataclass
class Section:
    kind: str
    vaddr: int
    paddr: int
    data: bytearray = field(default_factory=bytearray, repr=False)

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def vend(self) -> int:
        return self.vaddr + self.size

    def words(self) -> list[int]:
        n = self.size // 4
        return list(struct.unpack(f"<{n}I", bytes(self.data[:4 * n])))

    def word_at(self, va: int) -> int:
        off = va - self.vaddr
        if not 0 <= off <= self.size - 4:
            raise ImageError(f"{va:#010x} outside section at {self.vaddr:#010x}")
        return struct.unpack_from("<I", self.data, off)[0]


@dataclass
class Image:
    entry: int
    sections: list[Section]
    symbols: dict[str, int] = field(default_factory=dict)

    @property
    def load_pa(self) -> int:
        return min((s.paddr for s in self.sections), default=0)

    def text_sections(self) -> list[Section]:
        return [s for s in self.sections if s.kind == "text"]

    def section_at(self, va: int) -> Section | None:
        for s in self.sections:
            if s.vaddr <= va < s.vend:
                return s
        return None

    def word_at(self, va: int) -> int:
        s = self.section_at(va)
        if s is None:
            raise ImageError(f"no section covers {va:#010x}")
        return s.word_at(va)

    def symbol(self, name: str) -> int:
        try:
            return self.symbols[name]
        except KeyError:
            raise ImageError(f"undefined symbol {name!r}") from None

    def load(self, mem: PhysicalMemory) -> None:
        for s in self.sections:
            if s.size:
                mem.write_bytes(s.paddr, bytes(s.data))

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(MAGIC, VERSION, self.entry, self.load_pa,
                                     len(self.sections), len(self.symbols)))
        for s in self.sections:
            out += _SECTION.pack(SECTION_KINDS.index(s.kind), s.vaddr, s.paddr, s.size)
        for name in sorted(self.symbols):
            raw = name.encode()
            out += _SYMBOL.pack(self.symbols[name] & 0xFFFFFFFF, len(raw)) + raw
        for s in self.sections:
            out += s.data
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> Image:
        if len(blob) < _HEADER.size:
            raise ImageError("truncated header")
        magic, version, entry, _load_pa, nsec, nsym = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise ImageError("bad magic")
        if version != VERSION:
            raise ImageError(f"unsupported image version {version}")
        off = _HEADER.size
        table = []
        for _ in range(nsec):
            kind, vaddr, paddr, size = _SECTION.unpack_from(blob, off)
            off += _SECTION.size
            if kind >= len(SECTION_KINDS):
                raise ImageError(f"unknown section kind {kind}")
            table.append((SECTION_KINDS[kind], vaddr, paddr, size))
        symbols = {}
        for _ in range(nsym):
            value, n = _SYMBOL.unpack_from(blob, off)
            off += _SYMBOL.size
            symbols[blob[off:off + n].decode()] = value
            off += n
        sections = []
        for kind, vaddr, paddr, size in table:
            if off + size > len(blob):
                raise ImageError("truncated section payload")
            sections.append(Section(kind, vaddr, paddr, bytearray(blob[off:off + size])))
            off += size
        return cls(entry, sections, symbols)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path: str | Path) -> Image:
        return cls.from_bytes(Path(path).read_bytes())
