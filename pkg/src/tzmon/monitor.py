"""Secure-world integrity policy: pre-boot setup, boot gate and the four probe handlers.

Trusted knowledge comes from :class:`PreBootConfig`: the kernel page-table
base, the approved kernel code frames with their digests, the frames that
hold page tables, the user/kernel split and the probe plan.

Page tables are write-protected. A kernel store into one faults, the abort
handler's probe hands the fault to :meth:`IntegrityMonitor.handle_page_fault`,
and the secure world performs the store itself when the new entry passes
:func:`check_pte_update`. New page tables are validated the first time a
TTBR write names them and are write-protected from then on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .alerts import Alert, AlertKind
from .image import Image
from .isa import Instruction, SysReg, decode
from .machine import Machine
from .memory import PAGE_SHIFT, PAGE_SIZE, MemoryFault, PhysicalMemory, World
from .mmu import (
    ENTRIES, FRAME_MASK, NO_L2, PTE_PXN, PTE_WRITE_BITS, PTE_XN, PageTableEntry, WalkError,
    enumerate_mappings, l1_valid, l2_tables, lookup, pte_valid, read_pte,
)
from .scanner import PlacementPlan, PlanEntry
from .sprobe import (
    Block, BlockAction, EmulateAndResume, PassThrough, ProbeType, SkipAndResume, Snapshot,
    ProbeError, SprobeEngine, SysRegWrite, Verdict,
)
from .sysregs import DFSR_PERMISSION, DFSR_WNR, PSR_MODE_MASK, SCTLR_M, SCTLR_V, SCTLR_WXN

CONFIG_VERSION = 1
DEFAULT_SPLIT = 0xC0000000


class ConfigError(Exception):
    pass


class BootRefused(Exception):
    def __init__(self, alert: Alert):
        super().__init__(alert.detail)
        self.alert = alert


# -- configuration --------------------------------------------------------


@dataclass
class PreBootConfig:
    kernel_pt_base: int
    kernel_code_ranges: list[tuple[int, int]]
    kernel_code_frames: dict[int, str]       # frame number -> sha256 hex digest
    pt_frames: frozenset[int]
    probe_plan: PlacementPlan
    kernel_va_split: int = DEFAULT_SPLIT

    def __post_init__(self):
        overlap = set(self.kernel_code_frames) & set(self.pt_frames)
        if overlap:
            raise ConfigError(f"frames {sorted(overlap)} are both code and page table")

    @property
    def code_frames(self) -> frozenset[int]:
        return frozenset(self.kernel_code_frames)

    @classmethod
    def from_image(cls, image: Image, plan: PlacementPlan, split: int = DEFAULT_SPLIT,
                   pt_symbol: str = "kernel_pt") -> PreBootConfig:
        frames: dict[int, str] = {}
        ranges = []
        for s in image.text_sections():
            ranges.append((s.vaddr, s.vend))
            for off in range(0, s.size, PAGE_SIZE):
                page = bytes(s.data[off:off + PAGE_SIZE]).ljust(PAGE_SIZE, b"\0")
                frames[(s.paddr + off) >> PAGE_SHIFT] = hashlib.sha256(page).hexdigest()
        pt = {(s.paddr + off) >> PAGE_SHIFT
              for s in image.sections if s.kind == "pagetable" for off in range(0, s.size, PAGE_SIZE)}
        return cls(image.symbol(pt_symbol), ranges, frames, frozenset(pt), plan, split)

    def to_json(self) -> str:
        doc = {
            "version": CONFIG_VERSION,
            "kernel_pt_base": f"{self.kernel_pt_base:#010x}",
            "kernel_va_split": f"{self.kernel_va_split:#010x}",
            "kernel_code_ranges": [[f"{a:#010x}", f"{b:#010x}"] for a, b in self.kernel_code_ranges],
            "kernel_code_frames": {f"{f:#07x}": d for f, d in sorted(self.kernel_code_frames.items())},
            "pt_frames": [f"{f:#07x}" for f in sorted(self.pt_frames)],
            "probe_plan": [{"va": f"{e.va:#010x}", "type": e.probe_type.name} for e in self.probe_plan.entries],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, base_dir: Path | None = None) -> PreBootConfig:
        doc = json.loads(text)
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {doc.get('version')!r}")
        if "probe_plan_file" in doc:
            plan = PlacementPlan.read((base_dir or Path(".")) / doc["probe_plan_file"])
        else:
            plan = PlacementPlan(tuple(PlanEntry(int(e["va"], 16), ProbeType[e["type"]])
                                       for e in doc["probe_plan"]))
            plan.check()
        return cls(
            int(doc["kernel_pt_base"], 16),
            [(int(a, 16), int(b, 16)) for a, b in doc["kernel_code_ranges"]],
            {int(f, 16): d for f, d in doc["kernel_code_frames"].items()},
            frozenset(int(f, 16) for f in doc["pt_frames"]),
            plan,
            int(doc.get("kernel_va_split", f"{DEFAULT_SPLIT:#x}"), 16),
        )


# -- the entry predicate ------------------------------------------------------


class Rule(Enum):
    CODE_ALIAS = "code frame mapped away from its kernel address"
    CODE_PERMS = "code frame mapped writable or execute-never"
    PT_IN_USER = "page-table frame mapped in user space"
    PT_WRITABLE = "page-table frame mapped writable"
    USER_PXN = "user page executable at PL1"
    EXEC_DATA = "non-code frame executable at PL1"
    KERNEL_REMAP = "kernel mapping differs from the master table"
    KERNEL_L1 = "kernel half of the table differs from the master table"
    TABLE_IS_CODE = "page-table frame is a code frame"
    TABLE_OUTSIDE_RAM = "page table outside normal-world memory"
    MISALIGNED = "table base not page aligned"


FAULT_PATH_KIND = {Rule.CODE_ALIAS: AlertKind.DOUBLE_MAP, Rule.USER_PXN: AlertKind.PXN_VIOLATION_CONFIG}


@dataclass(frozen=True)
class PolicyView:
    """The parts of the configuration the entry predicate needs."""

    code_frames: frozenset[int]
    code_va: dict[int, int]     # code frame -> its one kernel virtual page
    split: int
    master_base: int


def classify_pte(va: int, word: int, view: PolicyView, pt_frames, master_word: int | None) -> Rule | None:
    """The first rule a new L2 entry for ``va`` breaks, or None."""
    if not pte_valid(word):
        return None
    pfn = word >> PAGE_SHIFT
    user = va < view.split
    if pfn in view.code_frames:
        if view.code_va.get(pfn) != va & FRAME_MASK:
            return Rule.CODE_ALIAS
        if word & (PTE_WRITE_BITS | PTE_XN | PTE_PXN):
            return Rule.CODE_PERMS
    elif pfn in pt_frames:
        if user:
            return Rule.PT_IN_USER
        if word & PTE_WRITE_BITS:
            return Rule.PT_WRITABLE
    if user and not word & PTE_PXN:
        return Rule.USER_PXN
    if pfn not in view.code_frames and not word & (PTE_XN | PTE_PXN):
        return Rule.EXEC_DATA
    if not user and (pfn in view.code_frames or pfn in pt_frames) and word != master_word:
        return Rule.KERNEL_REMAP
    return None


def check_pte_update(va: int, word: int, view: PolicyView, pt_frames, master_word: int | None) -> bool:
    return classify_pte(va, word, view, pt_frames, master_word) is None


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    frames: frozenset[int] = frozenset()
    rule: Rule | None = None
    va: int | None = None
    entry: int | None = None

    def __bool__(self):
        return self.ok

    @property
    def detail(self) -> str:
        if self.ok:
            return "valid"
        where = f" at {self.va:#010x}" if self.va is not None else ""
        entry = f" (entry {self.entry:#010x})" if self.entry is not None else ""
        return f"{self.rule.value}{where}{entry}"


def validate_page_table(base: int, view: PolicyView, protected, mem: PhysicalMemory) -> ValidationResult:
    """Check a whole table before it may be installed.

    ``protected`` is the set of frames already write-protected. The table's
    own frames join that set on success, so entries mapping them are judged
    as they will be once write-protection is applied.
    """
    if base & 0xFFF:
        return ValidationResult(False, rule=Rule.MISALIGNED, entry=base)
    if not mem.is_normal(base):
        return ValidationResult(False, rule=Rule.TABLE_OUTSIDE_RAM, entry=base)
    try:
        l2s = l2_tables(base, mem)
        for _, l2 in l2s:
            if not mem.is_normal(l2):
                return ValidationResult(False, rule=Rule.TABLE_OUTSIDE_RAM, entry=l2)
        frames = frozenset([base >> PAGE_SHIFT] + [l2 >> PAGE_SHIFT for _, l2 in l2s])
        if frames & view.code_frames:
            return ValidationResult(False, rule=Rule.TABLE_IS_CODE, entry=min(frames & view.code_frames) << 12)
        first_kernel = view.split >> 22
        for slot in range(first_kernel, ENTRIES):
            mine = mem.read_word(base | slot << 2, World.SECURE)
            master = mem.read_word(view.master_base | slot << 2, World.SECURE)
            if mine != master:
                return ValidationResult(False, rule=Rule.KERNEL_L1, va=slot << 22, entry=mine)
        pt = set(protected) | frames
        for va, e in enumerate_mappings(base, mem):
            word = e.word
            if va >= view.split and word >> PAGE_SHIFT in pt:
                word &= ~PTE_WRITE_BITS
            # the kernel half shares the master's L2 pages, so the master entry is this one
            rule = classify_pte(va, word, view, pt, word)
            if rule is not None:
                return ValidationResult(False, rule=rule, va=va, entry=e.word)
    except (WalkError, MemoryFault):
        return ValidationResult(False, rule=Rule.TABLE_OUTSIDE_RAM)
    return ValidationResult(True, frames)


# -- policy state -------------------------------------------------------------


@dataclass
class PageTableRegistry:
    tables: dict[int, frozenset[int]] = field(default_factory=dict)   # base -> constituent frames
    l1_frames: dict[int, int] = field(default_factory=dict)           # frame -> table base
    l2_slots: dict[int, set[int]] = field(default_factory=dict)       # frame -> L1 slots it serves

    def __contains__(self, base: int) -> bool:
        return base in self.tables

    def add(self, base: int, frames: frozenset[int], mem: PhysicalMemory) -> None:
        self.tables[base] = frames
        self.l1_frames[base >> PAGE_SHIFT] = base
        for slot, l2 in l2_tables(base, mem):
            self.l2_slots.setdefault(l2 >> PAGE_SHIFT, set()).add(slot)


@dataclass
class PolicyState:
    boot_complete: bool = False
    boot_counter: int | None = None
    registry: PageTableRegistry = field(default_factory=PageTableRegistry)
    protected_pt_frames: set[int] = field(default_factory=set)
    alert_log: list[Alert] = field(default_factory=list)
    halt_on_alert: bool = False
    warnings: list[str] = field(default_factory=list)


def _msr_source(snap: Snapshot) -> tuple[Instruction, int]:
    ins = snap.probe.instruction
    if ins.mnemonic != "MSR":
        raise ConfigError(f"probe at {snap.pc:#010x} is not on an MSR")
    return ins, snap.regs.r[ins.rs]


class IntegrityMonitor:
    """Owns the probe engine and the policy state for one machine."""

    def __init__(self, machine: Machine, cfg: PreBootConfig, *, halt_on_alert: bool = False,
                 unexpected_smc: str = "block", sctlr_policy: str = "block"):
        if sctlr_policy not in ("block", "filter"):
            raise ValueError("sctlr_policy must be 'block' or 'filter'")
        self.machine = machine
        self.cfg = cfg
        self.sctlr_policy = sctlr_policy
        self.state = PolicyState(halt_on_alert=halt_on_alert)
        self.engine = SprobeEngine(machine, unexpected_smc=unexpected_smc, halt_on_alert=halt_on_alert,
                                   table_base=cfg.kernel_pt_base, alert_log=self.state.alert_log)
        self.engine.register_handler("sctlr", self.handle_sctlr_write)
        self.engine.register_handler("ttbr", self.handle_ttbr_write)
        self.engine.register_handler("ttbcr", self.handle_ttbcr_write)
        self.engine.register_handler("fault", self.handle_page_fault)
        self.view: PolicyView | None = None

    # -- helpers ------------------------------------------------------------

    @property
    def mem(self) -> PhysicalMemory:
        return self.machine.mem

    def _block(self, kind: AlertKind, detail: str, *, halt: bool | None = None, eret: bool = False) -> Block:
        alert = Alert(kind, detail, self.machine.counter)
        halt = self.state.halt_on_alert if halt is None else halt
        return Block(alert, BlockAction.HALT if halt else BlockAction.SKIP, eret=eret)

    def write_protect(self, frames) -> None:
        """Clear write permission on every mapping of ``frames`` in every registered table."""
        frames = set(frames)
        self.state.protected_pt_frames |= frames
        for base in list(self.state.registry.tables):
            for slot, l2 in l2_tables(base, self.mem):
                for i in range(ENTRIES):
                    pa = l2 | i << 2
                    w = self.mem.read_word(pa, World.SECURE)
                    if pte_valid(w) and w >> PAGE_SHIFT in frames and w & PTE_WRITE_BITS:
                        self.mem.write_word(pa, w & ~PTE_WRITE_BITS, World.SECURE)

    def register(self, base: int, frames: frozenset[int]) -> None:
        self.state.registry.add(base, frames, self.mem)
        self.write_protect(frames | self.state.protected_pt_frames)

    def validate(self, base: int) -> ValidationResult:
        result = validate_page_table(base, self.view, self.state.protected_pt_frames, self.mem)
        if result:
            # aliases of ordinary frames are legal but worth a note
            seen: dict[int, int] = {}
            for va, e in enumerate_mappings(base, self.mem):
                if va >= self.view.split:
                    break
                if e.pfn in seen:
                    self.state.warnings.append(
                        f"table {base:#010x}: frame {e.pfn:#x} mapped at {seen[e.pfn]:#010x} and {va:#010x}")
                seen.setdefault(e.pfn, va)
        return result

    def master_word(self, va: int) -> int | None:
        hit = read_pte(self.cfg.kernel_pt_base, va, self.mem)
        return None if hit is NO_L2 else hit[1].word

    # -- pre-boot -------------------------------------------------------------

    def configure(self) -> None:
        cfg, mem = self.cfg, self.mem
        for pfn, digest in sorted(cfg.kernel_code_frames.items()):
            actual = hashlib.sha256(mem.read_bytes(pfn << PAGE_SHIFT, PAGE_SIZE)).hexdigest()
            if actual != digest:
                alert = Alert(AlertKind.BOOT_GATE_FAIL, f"code frame {pfn:#x} does not match its digest", 0)
                self.state.alert_log.append(alert)
                self.machine.halt(f"boot refused: {alert.detail}")
                raise BootRefused(alert)

        code_va: dict[int, int] = {}
        for start, end in cfg.kernel_code_ranges:
            for va in range(start & FRAME_MASK, end, PAGE_SIZE):
                hit = read_pte(cfg.kernel_pt_base, va, mem)
                if hit is NO_L2 or not hit[1].valid:
                    raise ConfigError(f"kernel code page {va:#010x} is not mapped")
                pfn = hit[1].pfn
                if pfn not in cfg.kernel_code_frames:
                    raise ConfigError(f"kernel code page {va:#010x} maps a frame that is not approved code")
                if code_va.setdefault(pfn, va) != va:
                    raise ConfigError(f"code frame {pfn:#x} has two kernel addresses")
        if set(code_va) != set(cfg.kernel_code_frames):
            raise ConfigError("approved code frames and code ranges do not correspond")
        self.view = PolicyView(cfg.code_frames, code_va, cfg.kernel_va_split, cfg.kernel_pt_base)

        # the kernel table must not map its own frames writable
        self.state.registry.tables[cfg.kernel_pt_base] = frozenset()
        self.write_protect(cfg.pt_frames)
        del self.state.registry.tables[cfg.kernel_pt_base]

        result = self.validate(cfg.kernel_pt_base)
        if not result:
            raise ConfigError(f"kernel page table rejected: {result.detail}")
        self.register(cfg.kernel_pt_base, result.frames)

        handler = {ProbeType.SCTLR_WRITE: "sctlr", ProbeType.TTBR_WRITE: "ttbr",
                   ProbeType.TTBCR_WRITE: "ttbcr", ProbeType.FAULT_HANDLER: "fault"}
        for e in cfg.probe_plan.entries:
            try:
                pa = self.engine.resolve(e.va)
                if pa >> PAGE_SHIFT not in cfg.kernel_code_frames:
                    raise ConfigError(f"probe at {e.va:#010x} is outside approved code")
                self.engine.insert(e.va, e.probe_type, handler[e.probe_type])
            except ProbeError as exc:
                raise ConfigError(f"probe plan: {exc}") from None

    # -- handlers -------------------------------------------------------------

    def handle_sctlr_write(self, s: Snapshot) -> Verdict:
        ins, new = _msr_source(s)
        old = s.sysregs.sctlr
        if self.state.boot_complete:
            if old & SCTLR_WXN and not new & SCTLR_WXN:
                if self.sctlr_policy == "filter":
                    return EmulateAndResume(SysRegWrite(SysReg.SCTLR, new | SCTLR_WXN), s.pc + 4)
                return self._block(AlertKind.WXN_DISABLE, f"SCTLR write {new:#010x} clears WXN")
            if old & SCTLR_M and not new & SCTLR_M:
                return self._block(AlertKind.MMU_DISABLE, f"SCTLR write {new:#010x} clears the MMU enable")
            if (old ^ new) & SCTLR_V:
                return self._block(AlertKind.VECTOR_REBASE, f"SCTLR write {new:#010x} moves the vectors")
        return EmulateAndResume(ins, s.pc + 4)

    def handle_ttbr_write(self, s: Snapshot) -> Verdict:
        st = self.state
        _, new = _msr_source(s)
        if not st.boot_complete:
            if new == self.cfg.kernel_pt_base:
                return PassThrough
            if not (s.sysregs.sctlr & SCTLR_WXN and s.sysregs.sctlr & SCTLR_M):
                return self._block(AlertKind.BOOT_GATE_FAIL,
                                   f"first process switch with SCTLR {s.sysregs.sctlr:#010x}", halt=True)
            st.boot_complete = True
            st.boot_counter = s.counter
        if new & 0xFFF:
            return self._block(AlertKind.BAD_TTBR, f"TTBR value {new:#010x} is not a bare table base")
        if new in st.registry:
            return PassThrough
        result = self.validate(new)
        if not result:
            return self._block(AlertKind.BAD_TTBR, f"table {new:#010x}: {result.detail}")
        self.register(new, result.frames)
        return PassThrough

    def handle_ttbcr_write(self, s: Snapshot) -> Verdict:
        _, new = _msr_source(s)
        if new & 7:
            return self._block(AlertKind.BAD_TTBCR, f"TTBCR write {new:#x} enables the second table")
        return PassThrough

    def handle_page_fault(self, s: Snapshot) -> Verdict:
        sr = s.sysregs
        if sr.dfsr & 0xF != DFSR_PERMISSION or not sr.dfsr & DFSR_WNR or not sr.sctlr & SCTLR_M:
            return PassThrough
        try:
            pte = lookup(sr.dfar, sr, self.mem)[0]
        except MemoryFault:
            return PassThrough
        target = (pte & FRAME_MASK) | (sr.dfar & 0xFFF)
        if target >> PAGE_SHIFT not in self.state.protected_pt_frames:
            return PassThrough

        # a store into a page table: find it and decide
        try:
            ins_pa = (lookup(sr.elr, sr, self.mem)[0] & FRAME_MASK) | (sr.elr & 0xFFF)
            ins = decode(self.mem.read_word(ins_pa, World.SECURE))
        except MemoryFault:
            ins = None
        if (not isinstance(ins, Instruction) or ins.mnemonic != "STR"
                or (s.regs.r[ins.rs] + ins.imm) & 0xFFFFFFFF != sr.dfar):
            return self._block(AlertKind.ILLEGAL_PTE_UPDATE,
                               f"page-table write at {sr.elr:#010x} is not an emulable store", eret=True)
        if sr.spsr & PSR_MODE_MASK == 0:
            return self._block(AlertKind.ILLEGAL_PTE_UPDATE, "user-mode page-table write", eret=True)
        value = s.regs.r[ins.rd]
        rule, where = self._check_table_store(target, value)
        if rule is not None:
            kind = FAULT_PATH_KIND.get(rule, AlertKind.ILLEGAL_PTE_UPDATE)
            return self._block(kind, f"store {value:#010x} to {target:#010x} ({where:#010x}): {rule.value}",
                               eret=True)
        self.mem.write_word(target, value, World.SECURE)
        if self._new_l2 is not None:
            reg = self.state.registry
            reg.l2_slots.setdefault(self._new_l2, set()).add((target & 0xFFF) >> 2)
            self.write_protect({self._new_l2})
        return SkipAndResume(eret=True)

    def _check_table_store(self, target: int, value: int) -> tuple[Rule | None, int]:
        """Judge a store of ``value`` to table word ``target``; returns (rule, va governed)."""
        reg, view = self.state.registry, self.view
        pfn = target >> PAGE_SHIFT
        index = (target & 0xFFF) >> 2
        self._new_l2 = None
        if pfn in reg.l1_frames:
            va = index << 22
            if va >= view.split:
                master = self.mem.read_word(self.cfg.kernel_pt_base | index << 2, World.SECURE)
                return (None if value == master else Rule.KERNEL_L1), va
            if not l1_valid(value):
                return None, va
            l2 = value & FRAME_MASK
            if l2 >> PAGE_SHIFT in view.code_frames:
                return Rule.TABLE_IS_CODE, va
            if not self.mem.is_normal(l2):
                return Rule.TABLE_OUTSIDE_RAM, va
            pt = self.state.protected_pt_frames | {l2 >> PAGE_SHIFT}
            for i in range(ENTRIES):
                w = self.mem.read_word(l2 | i << 2, World.SECURE)
                rule = classify_pte(va | i << 12, w, view, pt, None)
                if rule is not None:
                    return rule, va | i << 12
            self._new_l2 = l2 >> PAGE_SHIFT
            return None, va
        slots = reg.l2_slots.get(pfn)
        if not slots:
            # a protected frame not linked from any table yet holds no live entries
            return None, target
        for slot in sorted(slots):
            va = slot << 22 | index << 12
            master = self.master_word(va) if va >= view.split else None
            rule = classify_pte(va, value, view, self.state.protected_pt_frames, master)
            if rule is not None:
                return rule, va
        return None, sorted(slots)[0] << 22 | index << 12


def preboot_configure(machine: Machine, cfg: PreBootConfig, **knobs) -> IntegrityMonitor:
    mon = IntegrityMonitor(machine, cfg, **knobs)
    mon.configure()
    return mon


__all__ = [
    "PreBootConfig", "PolicyState", "PageTableRegistry", "PolicyView", "IntegrityMonitor", "Rule",
    "ValidationResult", "ConfigError", "BootRefused", "classify_pte", "check_pte_update",
    "validate_page_table", "preboot_configure", "PageTableEntry",
]
