"""Two-pass assembler for the toy ISA, with page-table building directives.

Syntax, one statement per line (``;`` starts a comment)::

    label:  MOVI r1, #5
            LDR  r2, [r1, #4]
            B    label            ; label, absolute address, or #word_offset
            LI   r12, target       ; pseudo-op: MOVI low half + MOVT high half

Directives:

``.section kind, vaddr[, paddr]``
    start a new section (kind is text, data, pagetable or user).
``.org addr`` / ``.align n`` / ``.space n`` / ``.word e, ...``
    layout inside the current section.
``.equ name, expr`` / ``.entry expr`` / ``.include "file"``
``.table name, paddr[, n_l2[, kind]]``
    reserve an identity-placed page table: one L1 page plus ``n_l2`` L2
    pages (default 4), in its own section (kind defaults to pagetable).
``.map table, va, pa, npages, flags``
    fill PTEs; L2 pages are handed out in source order.
``.share dst, src, from_va``
    copy src's L1 slots at and above ``from_va`` into dst. Applied after
    every ``.map``, so the shared L2 pages are complete.

Expressions are Python-syntax integer arithmetic over numbers, symbols and
the functions ``pa(label)``, ``lo(x)``, ``hi(x)`` and ``pte(table, va)``
(the physical address of the L2 entry for ``va``).
"""

from __future__ import annotations

import ast
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

from . import mmu
from .image import SECTION_KINDS, Image, Section
from .isa import (
    BRANCHES, FORMS, REGISTER_ALIASES, REGISTERS, EncodingError, Instruction, SysReg, decode,
    encode, format_instruction,
)
from .memory import PAGE_SIZE
from .sysregs import SCTLR_A, SCTLR_M, SCTLR_V, SCTLR_WXN

PREDEFINED = {
    "PTE_V": mmu.PTE_V, "PTE_W": mmu.PTE_W, "PTE_UR": mmu.PTE_UR, "PTE_UW": mmu.PTE_UW,
    "PTE_XN": mmu.PTE_XN, "PTE_PXN": mmu.PTE_PXN, "PAGE_SIZE": PAGE_SIZE,
    "SCTLR_M": SCTLR_M, "SCTLR_A": SCTLR_A, "SCTLR_V": SCTLR_V, "SCTLR_WXN": SCTLR_WXN,
}

_LABEL = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*):")
_REG_NAMES = {name: i for i, name in enumerate(REGISTERS)}
_REG_NAMES.update({a: REGISTERS.index(t) for a, t in REGISTER_ALIASES.items()})
_MEM_OPERAND = re.compile(r"^\[\s*([A-Za-z0-9]+)\s*(?:,\s*(.+?))?\s*\]$")


class AsmError(Exception):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where
        self.message = message


@dataclass
class _Line:
    where: str
    op: str          # mnemonic or directive, upper-cased mnemonic / lower-cased directive
    args: list[str]


@dataclass
class _Table:
    name: str
    pa: int
    n_l2: int
    section: Section
    next_l2: int = 0
    l1: dict[int, int] = field(default_factory=dict)   # slot -> L2 pa

    def word(self, pa: int, value: int) -> None:
        struct.pack_into("<I", self.section.data, pa - self.pa, value & 0xFFFFFFFF)

    def read(self, pa: int) -> int:
        return struct.unpack_from("<I", self.section.data, pa - self.pa)[0]


def _strip_comment(text: str) -> str:
    out, quoted = [], False
    i = 0
    while i < len(text):
        c = text[i]
        if c == '"':
            quoted = not quoted
        elif not quoted and c == ";":
            break
        out.append(c)
        i += 1
    return "".join(out).strip()


def _split_args(text: str) -> list[str]:
    args, depth, cur = [], 0, []
    for c in text:
        if c in "([":
            depth += 1
        elif c in ")]":
            depth -= 1
        if c == "," and depth == 0:
            args.append("".join(cur).strip())
            cur = []
        else:
            cur.append(c)
    tail = "".join(cur).strip()
    if tail or args:
        args.append(tail)
    return args


_BINOPS = {
    ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b, ast.Mult: lambda a, b: a * b,
    ast.FloorDiv: lambda a, b: a // b, ast.Mod: lambda a, b: a % b,
    ast.BitOr: lambda a, b: a | b, ast.BitAnd: lambda a, b: a & b, ast.BitXor: lambda a, b: a ^ b,
    ast.LShift: lambda a, b: a << b, ast.RShift: lambda a, b: a >> b,
}


class _Unresolved(Exception):
    pass


class Assembler:
    """Assemble source text into an :class:`Image`."""

    def __init__(self, include_paths: list[Path] | None = None, defines: dict[str, int] | None = None):
        self.include_paths = [Path(p) for p in include_paths or []]
        # like -D on a C compiler: these win over an .equ of the same name
        self.defines = dict(defines or {})

    # -- reading ----------------------------------------------------------

    def _read_lines(self, text: str, name: str, base: Path | None, depth: int = 0) -> list[_Line]:
        if depth > 16:
            raise AsmError(name, "include nesting too deep")
        out = []
        for n, raw in enumerate(text.splitlines(), 1):
            where = f"{name}:{n}"
            line = _strip_comment(raw)
            while True:
                m = _LABEL.match(line)
                if not m:
                    break
                out.append(_Line(where, ":label", [m.group(1)]))
                line = line[m.end():].strip()
            if not line:
                continue
            head, _, rest = line.partition(" ")
            args = _split_args(rest.strip())
            if head.startswith("."):
                head = head.lower()
                if head == ".include":
                    if len(args) != 1:
                        raise AsmError(where, ".include takes one quoted file name")
                    path = self._find_include(args[0].strip('"'), base, where)
                    out.extend(self._read_lines(path.read_text(), str(path), path.parent, depth + 1))
                    continue
            else:
                head = head.upper()
            out.append(_Line(where, head, args))
        return out

    def _find_include(self, fname: str, base: Path | None, where: str) -> Path:
        for d in ([base] if base else []) + self.include_paths:
            p = d / fname
            if p.is_file():
                return p
        raise AsmError(where, f"cannot find include file {fname!r}")

    # -- expressions ----------------------------------------------------------

    def _eval(self, text: str, where: str, *, final: bool = True) -> int:
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError:
            raise AsmError(where, f"bad expression {text!r}") from None
        try:
            return self._eval_node(tree.body, where, set())
        except _Unresolved as exc:
            if final:
                raise AsmError(where, f"undefined symbol {exc.args[0]!r}") from None
            raise

    def _lookup(self, name: str, where: str, seen: set) -> int:
        if name in self.symbols:
            return self.symbols[name]
        if name in self.equs:
            if name in seen:
                raise AsmError(where, f"circular .equ {name!r}")
            expr, ewhere = self.equs[name]
            value = self._eval_node(ast.parse(expr, mode="eval").body, ewhere, seen | {name})
            return value
        if name in PREDEFINED:
            return PREDEFINED[name]
        raise _Unresolved(name)

    def _eval_node(self, node, where: str, seen: set) -> int:
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.Name):
            return self._lookup(node.id, where, seen)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](self._eval_node(node.left, where, seen),
                                          self._eval_node(node.right, where, seen))
        if isinstance(node, ast.UnaryOp):
            v = self._eval_node(node.operand, where, seen)
            if isinstance(node.op, ast.USub):
                return -v
            if isinstance(node.op, ast.UAdd):
                return v
            if isinstance(node.op, ast.Invert):
                return ~v & 0xFFFFFFFF
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            fn = node.func.id
            if fn == "pa" and len(node.args) == 1 and isinstance(node.args[0], ast.Name):
                label = node.args[0].id
                if label not in self.label_pa:
                    raise _Unresolved(label)
                return self.label_pa[label]
            args = [self._eval_node(a, where, seen) for a in node.args]
            if fn == "lo" and len(args) == 1:
                return args[0] & 0xFFFF
            if fn == "hi" and len(args) == 1:
                return (args[0] >> 16) & 0xFFFF
            if fn == "pte" and len(args) == 2:
                return self._pte_address(args[0], args[1], where)
        raise AsmError(where, f"unsupported expression {ast.unparse(node)!r}")

    # -- main entry ---------------------------------------------------------

    def assemble(self, text: str, name: str = "<source>", base: Path | None = None) -> Image:
        lines = self._read_lines(text, name, base)
        self.symbols: dict[str, int] = {}
        self.label_pa: dict[str, int] = {}
        self.equs: dict[str, tuple[str, str]] = {k: (str(v), "<define>") for k, v in self.defines.items()}
        self.tables: dict[int, _Table] = {}
        self.tables_built = False
        self._layout(lines)
        self._build_tables(lines)
        return self._emit(lines)

    def _size_of(self, ln: _Line) -> int:
        if ln.op == "LI":
            return 8
        if ln.op in FORMS:
            return 4
        if ln.op == ".word":
            return 4 * len(ln.args)
        raise AssertionError(ln.op)

    def _layout(self, lines: list[_Line]) -> None:
        sec: Section | None = None
        loc = 0
        self.sections: list[Section] = []
        self.layout: list[tuple[_Line, Section | None, int]] = []
        self.entry_expr: tuple[str, str] | None = None

        def need_section(ln):
            if sec is None:
                raise AsmError(ln.where, f"{ln.op} outside any .section")

        for ln in lines:
            op, a, w = ln.op, ln.args, ln.where
            self.layout.append((ln, sec, loc))
            if op == ":label":
                need_section(ln)
                self._define(a[0], loc, w)
                self.label_pa[a[0]] = sec.paddr + (loc - sec.vaddr)
            elif op == ".section":
                if len(a) not in (2, 3):
                    raise AsmError(w, ".section takes kind, vaddr[, paddr]")
                kind = a[0].strip().lower()
                if kind not in SECTION_KINDS:
                    raise AsmError(w, f"unknown section kind {kind!r}")
                vaddr = self._eval(a[1], w)
                paddr = self._eval(a[2], w) if len(a) == 3 else vaddr
                if vaddr % 4 or paddr % 4:
                    raise AsmError(w, "section addresses must be word aligned")
                sec = Section(kind, vaddr, paddr)
                self.sections.append(sec)
                loc = vaddr
            elif op == ".equ":
                if len(a) != 2:
                    raise AsmError(w, ".equ takes name, expr")
                if a[0] in self.defines:
                    continue
                if a[0] in self.equs or a[0] in self.symbols:
                    raise AsmError(w, f"duplicate symbol {a[0]!r}")
                self.equs[a[0]] = (a[1], w)
            elif op == ".entry":
                self.entry_expr = (a[0], w)
            elif op == ".org":
                need_section(ln)
                target = self._eval(a[0], w)
                if target < loc:
                    raise AsmError(w, f".org {target:#x} moves backwards from {loc:#x}")
                loc = target
            elif op == ".align":
                need_section(ln)
                n = self._eval(a[0], w)
                if n <= 0 or n & (n - 1):
                    raise AsmError(w, ".align needs a power of two")
                loc = (loc + n - 1) & -n
            elif op == ".space":
                need_section(ln)
                n = self._eval(a[0], w)
                if n < 0 or n % 4:
                    raise AsmError(w, ".space needs a non-negative multiple of 4")
                loc += n
            elif op == ".table":
                self._reserve_table(ln)
            elif op in (".map", ".share"):
                pass
            elif op == "LI" or op in FORMS or op == ".word":
                need_section(ln)
                if loc % 4:
                    raise AsmError(w, "code and data words must be word aligned")
                loc += self._size_of(ln)
            elif op.startswith("."):
                raise AsmError(w, f"unknown directive {op}")
            else:
                raise AsmError(w, f"unknown mnemonic {op!r}")
            if sec is not None and loc - sec.vaddr > len(sec.data):
                sec.data.extend(bytes(loc - sec.vaddr - len(sec.data)))

    def _define(self, name: str, value: int, where: str) -> None:
        if name in self.symbols or name in self.equs or name in PREDEFINED:
            raise AsmError(where, f"duplicate symbol {name!r}")
        self.symbols[name] = value

    # -- page tables ---------------------------------------------------------

    def _reserve_table(self, ln: _Line) -> None:
        a, w = ln.args, ln.where
        if len(a) not in (2, 3, 4):
            raise AsmError(w, ".table takes name, paddr[, n_l2[, kind]]")
        pa = self._eval(a[1], w)
        n_l2 = self._eval(a[2], w) if len(a) >= 3 else 4
        kind = a[3].strip().lower() if len(a) == 4 else "pagetable"
        if pa % PAGE_SIZE:
            raise AsmError(w, "page tables must be page aligned")
        if kind not in SECTION_KINDS:
            raise AsmError(w, f"unknown section kind {kind!r}")
        sec = Section(kind, pa, pa, bytearray((1 + n_l2) * PAGE_SIZE))
        self.sections.append(sec)
        self._define(a[0], pa, w)
        self.label_pa[a[0]] = pa
        self.tables[pa] = _Table(a[0], pa, n_l2, sec)

    def _table(self, expr: str, where: str) -> _Table:
        base = self._eval(expr, where)
        if base not in self.tables:
            raise AsmError(where, f"{expr.strip()!r} is not a .table")
        return self.tables[base]

    def _build_tables(self, lines: list[_Line]) -> None:
        shares = []
        for ln in lines:
            a, w = ln.args, ln.where
            if ln.op == ".map":
                if len(a) != 5:
                    raise AsmError(w, ".map takes table, va, pa, npages, flags")
                t = self._table(a[0], w)
                va, pa, n, flags = (self._eval(x, w) for x in a[1:])
                if va % PAGE_SIZE or pa % PAGE_SIZE:
                    raise AsmError(w, ".map addresses must be page aligned")
                if flags & ~0x3F:
                    raise AsmError(w, f"bad PTE flags {flags:#x}")
                for i in range(n):
                    v = (va + i * PAGE_SIZE) & 0xFFFFFFFF
                    slot = v >> 22
                    if slot not in t.l1:
                        if t.next_l2 >= t.n_l2:
                            raise AsmError(w, f"table {t.name!r} has no free L2 page")
                        t.next_l2 += 1
                        t.l1[slot] = t.pa + t.next_l2 * PAGE_SIZE
                        t.word(t.pa + slot * 4, t.l1[slot] | 1)
                    t.word(t.l1[slot] + ((v >> 12) & 0x3FF) * 4,
                           mmu.PageTableEntry.make(pa + i * PAGE_SIZE, flags).word)
            elif ln.op == ".share":
                if len(a) != 3:
                    raise AsmError(w, ".share takes dst, src, from_va")
                shares.append(ln)
        for ln in shares:
            a, w = ln.args, ln.where
            dst, src = self._table(a[0], w), self._table(a[1], w)
            first = self._eval(a[2], w) >> 22
            for slot, l2 in src.l1.items():
                if slot >= first:
                    dst.l1[slot] = l2
                    dst.word(dst.pa + slot * 4, l2 | 1)
        self.tables_built = True

    def _pte_address(self, base: int, va: int, where: str) -> int:
        if not self.tables_built:
            raise _Unresolved("pte")
        t = self.tables.get(base)
        if t is None:
            raise AsmError(where, f"{base:#x} is not a .table")
        l1 = t.read(t.pa + (va >> 22) * 4)
        if not l1 & 1:
            raise AsmError(where, f"{va:#x} has no L2 page in table {t.name!r}")
        return (l1 & mmu.FRAME_MASK) + ((va >> 12) & 0x3FF) * 4

    # -- emission -------------------------------------------------------------

    def _emit(self, lines) -> Image:
        for ln, sec, loc in self.layout:
            op = ln.op
            if op == ".word":
                for i, arg in enumerate(ln.args):
                    self._put(sec, loc + 4 * i, self._eval(arg, ln.where) & 0xFFFFFFFF)
            elif op == "LI":
                rd, value = self._li_args(ln)
                lo16 = value & 0xFFFF
                self._put(sec, loc, encode(Instruction("MOVI", rd=rd, imm=lo16 - 0x10000 if lo16 & 0x8000 else lo16)))
                self._put(sec, loc + 4, encode(Instruction("MOVT", rd=rd, imm=value >> 16)))
            elif op in FORMS:
                try:
                    self._put(sec, loc, encode(self._parse(ln, loc)))
                except EncodingError as exc:
                    raise AsmError(ln.where, str(exc)) from None
        entry = 0
        if self.entry_expr is not None:
            entry = self._eval(*self.entry_expr) & 0xFFFFFFFF
        return Image(entry, self.sections, dict(self.symbols))

    @staticmethod
    def _put(sec: Section, va: int, word: int) -> None:
        struct.pack_into("<I", sec.data, va - sec.vaddr, word)

    def _reg(self, text: str, where: str) -> int:
        t = text.strip().lower()
        if t not in _REG_NAMES:
            raise AsmError(where, f"bad register {text.strip()!r}")
        return _REG_NAMES[t]

    def _sysreg(self, text: str, where: str) -> int:
        try:
            return int(SysReg[text.strip().upper()])
        except KeyError:
            raise AsmError(where, f"bad system register {text.strip()!r}") from None

    def _imm(self, text: str, where: str) -> int:
        t = text.strip()
        if not t.startswith("#"):
            raise AsmError(where, f"expected #immediate, got {t!r}")
        return self._eval(t[1:], where)

    def _li_args(self, ln: _Line) -> tuple[int, int]:
        if len(ln.args) != 2:
            raise AsmError(ln.where, "LI takes rd, value")
        value = ln.args[1].strip()
        value = self._eval(value[1:] if value.startswith("#") else value, ln.where)
        if not -(1 << 31) <= value < 1 << 32:
            raise AsmError(ln.where, f"LI value {value:#x} does not fit 32 bits")
        return self._reg(ln.args[0], ln.where), value & 0xFFFFFFFF

    def _expect(self, ln: _Line, n: int) -> list[str]:
        if len(ln.args) != n:
            raise AsmError(ln.where, f"{ln.op} takes {n} operand{'s' if n != 1 else ''}")
        return ln.args

    def _parse(self, ln: _Line, loc: int) -> Instruction:
        m, w = ln.op, ln.where
        if m in ("NOP", "ERET", "HALT"):
            self._expect(ln, 0)
            return Instruction(m)
        if m in ("MOVI", "MOVT"):
            rd, imm = self._expect(ln, 2)
            return Instruction(m, rd=self._reg(rd, w), imm=self._imm(imm, w))
        if m == "MOV":
            rd, rs = self._expect(ln, 2)
            return Instruction(m, rd=self._reg(rd, w), rs=self._reg(rs, w))
        if m in ("ADD", "SUB", "AND", "OR", "XOR"):
            rd, rs, rt = self._expect(ln, 3)
            return Instruction(m, rd=self._reg(rd, w), rs=self._reg(rs, w), rt=self._reg(rt, w))
        if m in ("LDR", "STR"):
            rd, mem = self._expect(ln, 2)
            mm = _MEM_OPERAND.match(mem.strip())
            if not mm:
                raise AsmError(w, f"bad memory operand {mem.strip()!r}")
            off = self._imm(mm.group(2), w) if mm.group(2) else 0
            return Instruction(m, rd=self._reg(rd, w), rs=self._reg(mm.group(1), w), imm=off)
        if m in BRANCHES:
            (target,) = self._expect(ln, 1)
            target = target.strip()
            if target.startswith("#"):
                return Instruction(m, imm=self._eval(target[1:], w))
            delta = (self._eval(target, w) - loc) & 0xFFFFFFFF
            if delta & 3:
                raise AsmError(w, "branch target not word aligned")
            off = delta >> 2
            if off >= 1 << 29:
                off -= 1 << 30
            return Instruction(m, imm=off)
        if m == "BR":
            (rd,) = self._expect(ln, 1)
            return Instruction(m, rd=self._reg(rd, w))
        if m == "CMP":
            rd, rs = self._expect(ln, 2)
            return Instruction(m, rd=self._reg(rd, w), rs=self._reg(rs, w))
        if m == "MSR":
            sr, rs = self._expect(ln, 2)
            return Instruction(m, sysreg=self._sysreg(sr, w), rs=self._reg(rs, w))
        if m == "MRS":
            rd, sr = self._expect(ln, 2)
            return Instruction(m, rd=self._reg(rd, w), sysreg=self._sysreg(sr, w))
        if m in ("SVC", "SMC"):
            (imm,) = self._expect(ln, 1)
            return Instruction(m, imm=self._imm(imm, w))
        raise AsmError(w, f"unknown mnemonic {m!r}")


def assemble(text: str, name: str = "<source>", include_paths: list[Path] | None = None,
             defines: dict[str, int] | None = None) -> Image:
    return Assembler(include_paths, defines).assemble(text, name)


def assemble_file(path: str | Path, include_paths: list[Path] | None = None,
                  defines: dict[str, int] | None = None) -> Image:
    path = Path(path)
    return Assembler(include_paths, defines).assemble(path.read_text(), str(path), path.parent)


def disassemble(image: Image) -> str:
    """Render an image as source that assembles back to the same sections and entry."""
    out = [f".entry {image.entry:#010x}"]
    for s in image.sections:
        out.append(f".section {s.kind}, {s.vaddr:#010x}, {s.paddr:#010x}")
        words = s.words()
        i = 0
        while i < len(words):
            va = s.vaddr + 4 * i
            if s.kind != "text":
                j = i
                while j < len(words) and words[j] == 0:
                    j += 1
                if j - i >= 4:
                    out.append(f"    .space {4 * (j - i)}")
                    i = j
                    continue
                out.append(f"    .word {words[i]:#010x}")
            else:
                out.append(f"    {format_instruction(decode(words[i]), va)}")
            i += 1
    return "\n".join(out) + "\n"
