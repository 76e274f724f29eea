"""
Page-table policy by example
============================

The monitor accepts a new translation table only if every mapping it makes
keeps code read-only, page tables unreachable from user space, and user
pages out of the kernel's instruction stream. Here we build a few tables by
hand and watch which rule rejects them.
"""

# %%
from tzmon.asm import assemble
from tzmon.memory import default_memory
from tzmon.mmu import PTE_PXN, PTE_UR, PTE_UW, PTE_V, PTE_W, PTE_XN, enumerate_mappings
from tzmon.monitor import PolicyView, validate_page_table

KTEXT, KDATA, PT = 0xC0008000, 0xC0040000, 0xC0100000
code = {KTEXT >> 12: KTEXT}
protected = frozenset({PT >> 12, (PT >> 12) + 1})
view = PolicyView(frozenset(code), code, split=0xC0000000, master_base=PT)

# %%
# The master table: kernel text read-only and executable, kernel data
# writable but never executable.
MASTER = f"""
.table master, {PT:#x}, 1
.map master, {KTEXT:#x}, {KTEXT:#x}, 1, PTE_V
.map master, {KDATA:#x}, {KDATA:#x}, 1, PTE_V | PTE_W | PTE_XN | PTE_PXN
"""


def build(extra: str, base: int = 0xC0200000):
    mem = default_memory()
    src = MASTER + f".table cand, {base:#x}, 2\n.share cand, master, 0xC0000000\n" + extra
    assemble(src).load(mem)
    return mem, base


# %%
# A process table that shares the kernel half and maps one user page.
cases = {
    "user data page": f".map cand, 0x8000, 0xC0300000, 1, {PTE_V | PTE_UR | PTE_UW | PTE_XN | PTE_PXN}",
    "user page without PXN": f".map cand, 0x8000, 0xC0300000, 1, {PTE_V | PTE_UR}",
    "kernel text aliased writable": f".map cand, 0x8000, {KTEXT:#x}, 1, {PTE_V | PTE_W | PTE_XN | PTE_PXN}",
    "page table mapped to user": f".map cand, 0x8000, {PT:#x}, 1, {PTE_V | PTE_UR | PTE_XN | PTE_PXN}",
}
for label, line in cases.items():
    mem, base = build(line)
    r = validate_page_table(base, view, protected, mem)
    where = "" if r.ok else f" at va {r.va:#010x}"
    print(f"{label:30} -> {'accepted' if r.ok else r.rule.name}{where}")

# %%
# What the walker sees in the accepted table.
mem, base = build(cases["user data page"])
for va, e in enumerate_mappings(base, mem):
    print(f"{va:#010x} -> {e.word & 0xFFFFF000:#010x} flags {e.word & 0xFFF:#05x}")
