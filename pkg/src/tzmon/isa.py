"""Toy fixed-width instruction set.

Every instruction is one little-endian 32-bit word. The opcode lives in
bits [31:27]; operand fields and their widths come from the checked-in
encoding table (``data/encoding.json``), which the assembler, the decoder
and the scanner all read, so there is exactly one source of truth for the
bit layout.

``decode`` is total: any word either decodes to an :class:`Instruction` or
to an :class:`Undefined` value carrying the raw word. For every word that
decodes, ``encode(decode(w)) == w``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from importlib import resources

_TABLE = json.loads(resources.files("tzmon").joinpath("data/encoding.json").read_text())

WORD_MASK = 0xFFFFFFFF
OPCODE_SHIFT = _TABLE["opcode_bits"][1]

REGISTERS: tuple[str, ...] = tuple(_TABLE["registers"])
REGISTER_ALIASES: dict[str, str] = dict(_TABLE["register_aliases"])
NUM_GPRS = len(REGISTERS)  # r0-r12, sp, lr; encoding 15 is reserved
SP = REGISTERS.index("sp")
LR = REGISTERS.index("lr")


class SysReg(IntEnum):
    SCTLR = 0
    TTBR0 = 1
    TTBR1 = 2
    TTBCR = 3
    DFAR = 4
    DFSR = 5
    ELR = 6
    SPSR = 7


assert [r.name for r in SysReg] == _TABLE["sysregs"]

#: system registers whose writes change the translation regime
PROTECTED_SYSREGS = frozenset({SysReg.SCTLR, SysReg.TTBR0, SysReg.TTBR1, SysReg.TTBCR})

BRANCHES = frozenset({"B", "BL", "BEQ", "BNE"})
ALU_OPS = frozenset({"ADD", "SUB", "AND", "OR", "XOR"})


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class _Field:
    name: str
    hi: int
    lo: int
    kind: str
    attr: str

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1

    @property
    def mask(self) -> int:
        return ((1 << self.width) - 1) << self.lo


@dataclass(frozen=True)
class _Form:
    mnemonic: str
    opcode: int
    fields: tuple[_Field, ...]
    used_mask: int


def _load_forms() -> dict[str, _Form]:
    fields = {
        name: _Field(name, spec["bits"][0], spec["bits"][1], spec["kind"], spec["attr"])
        for name, spec in _TABLE["fields"].items()
    }
    hi, lo = _TABLE["opcode_bits"]
    opmask = ((1 << (hi - lo + 1)) - 1) << lo
    forms = {}
    for ins in _TABLE["instructions"]:
        fs = tuple(fields[o] for o in ins["operands"])
        used = opmask
        for f in fs:
            if used & f.mask:
                raise RuntimeError(f"overlapping fields in {ins['mnemonic']}")
            used |= f.mask
        forms[ins["mnemonic"]] = _Form(ins["mnemonic"], ins["opcode"], fs, used)
    return forms


FORMS: dict[str, _Form] = _load_forms()
_BY_OPCODE: dict[int, _Form] = {f.opcode: f for f in FORMS.values()}
MNEMONICS = frozenset(FORMS)


@dataclass(frozen=True)
class Instruction:
    """A decoded instruction. Unused operand slots are zero."""

    mnemonic: str
    rd: int = 0
    rs: int = 0
    rt: int = 0
    imm: int = 0
    sysreg: int = 0

    def __str__(self) -> str:
        return format_instruction(self)


@dataclass(frozen=True)
class Undefined:
    """Designator for a word with no defined encoding."""

    word: int
    mnemonic = "UNDEFINED"

    def __str__(self) -> str:
        return f".word {self.word:#010x}"


def _sext(value: int, width: int) -> int:
    sign = 1 << (width - 1)
    return (value ^ sign) - sign


_decode_cache: dict[int, Instruction | Undefined] = {}


def decode(word: int) -> Instruction | Undefined:
    try:
        return _decode_cache[word]
    except KeyError:
        pass
    result = _decode_uncached(word)
    if len(_decode_cache) < 1 << 16:
        _decode_cache[word] = result
    return result


def _decode_uncached(word: int) -> Instruction | Undefined:
    word &= WORD_MASK
    form = _BY_OPCODE.get(word >> OPCODE_SHIFT)
    if form is None or word & ~form.used_mask & WORD_MASK:
        return Undefined(word)
    args = {}
    for f in form.fields:
        raw = (word & f.mask) >> f.lo
        if f.kind == "reg":
            if raw >= NUM_GPRS:
                return Undefined(word)
        elif f.kind == "sysreg":
            if raw >= len(SysReg):
                return Undefined(word)
        elif f.kind == "simm":
            raw = _sext(raw, f.width)
        args[f.attr] = raw
    return Instruction(form.mnemonic, **args)


def encode(ins: Instruction) -> int:
    form = FORMS.get(ins.mnemonic)
    if form is None:
        raise EncodingError(f"unknown mnemonic {ins.mnemonic!r}")
    word = form.opcode << OPCODE_SHIFT
    seen = set()
    for f in form.fields:
        value = getattr(ins, f.attr)
        seen.add(f.attr)
        if f.kind == "reg":
            if not 0 <= value < NUM_GPRS:
                raise EncodingError(f"{ins.mnemonic}: bad register {value}")
        elif f.kind == "sysreg":
            if not 0 <= value < len(SysReg):
                raise EncodingError(f"{ins.mnemonic}: bad system register {value}")
        elif f.kind == "simm":
            lim = 1 << (f.width - 1)
            if not -lim <= value < lim:
                raise EncodingError(f"{ins.mnemonic}: immediate {value} out of range")
            value &= (1 << f.width) - 1
        elif f.kind == "uimm":
            if not 0 <= value < 1 << f.width:
                raise EncodingError(f"{ins.mnemonic}: immediate {value} out of range")
        word |= value << f.lo
    for attr in ("rd", "rs", "rt", "imm", "sysreg"):
        if attr not in seen and getattr(ins, attr):
            raise EncodingError(f"{ins.mnemonic} has no {attr} operand")
    return word


SMC0 = encode(Instruction("SMC", imm=0))
NOP_WORD = encode(Instruction("NOP"))


def is_smc(word: int) -> bool:
    return decode(word).mnemonic == "SMC"


def reg_name(r: int) -> str:
    return REGISTERS[r]


def _imm(value: int) -> str:
    return f"#{value}" if -256 < value < 256 else f"#{'-' if value < 0 else ''}{abs(value):#x}"


def format_instruction(ins: Instruction | Undefined, addr: int | None = None) -> str:
    """Disassemble one instruction.

    Branch targets print as absolute hex addresses when ``addr`` is known,
    otherwise as a raw word offset (``B #-2``). The assembler accepts both.
    """
    if isinstance(ins, Undefined):
        return str(ins)
    m = ins.mnemonic
    r = REGISTERS
    if m in ("NOP", "ERET", "HALT"):
        return m
    if m in ("MOVI", "MOVT"):
        return f"{m} {r[ins.rd]}, {_imm(ins.imm)}"
    if m == "MOV":
        return f"MOV {r[ins.rd]}, {r[ins.rs]}"
    if m in ALU_OPS:
        return f"{m} {r[ins.rd]}, {r[ins.rs]}, {r[ins.rt]}"
    if m in ("LDR", "STR"):
        off = f", {_imm(ins.imm)}" if ins.imm else ""
        return f"{m} {r[ins.rd]}, [{r[ins.rs]}{off}]"
    if m in BRANCHES:
        if addr is None:
            return f"{m} #{ins.imm}"
        return f"{m} {(addr + 4 * ins.imm) & WORD_MASK:#010x}"
    if m == "BR":
        return f"BR {r[ins.rd]}"
    if m == "CMP":
        return f"CMP {r[ins.rd]}, {r[ins.rs]}"
    if m == "MSR":
        return f"MSR {SysReg(ins.sysreg).name}, {r[ins.rs]}"
    if m == "MRS":
        return f"MRS {r[ins.rd]}, {SysReg(ins.sysreg).name}"
    if m in ("SVC", "SMC"):
        return f"{m} {_imm(ins.imm)}"
    raise AssertionError(m)


def disassemble_words(words, base: int = 0) -> list[str]:
    return [f"{base + 4 * i:08x}:  {w:08x}  {format_instruction(decode(w), base + 4 * i)}"
            for i, w in enumerate(words)]
