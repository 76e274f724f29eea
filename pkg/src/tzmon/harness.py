"""Scenario runner, omniscient oracles and metrics.

A scenario is a JSON file naming an assembly program (the kernel plus a
workload), the policy knobs and the expected outcome. :func:`run` builds the
image, scans it, configures the monitor, steps the machine to completion and
returns a :class:`RunReport` whose JSON form is byte-stable.

The oracles read machine state directly and never go through the monitor:

* :class:`ProvenanceOracle`: every PL1 retirement fetched from an approved code frame.
* :class:`InvariantOracle`: S1-S5 after every retirement once boot is complete.
* :class:`SnapshotOracle`: each handler-visible snapshot equals the hardware's SMC record.
* :class:`CompletenessOracle`: no protected system-register write retires outside the plan.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .alerts import Alert
from .asm import assemble_file
from .image import Image
from .isa import Instruction
from .machine import Machine, StepEvent
from .memory import PAGE_SHIFT, MemoryFault, World
from .mmu import lookup
from .monitor import BootRefused, IntegrityMonitor, PreBootConfig
from .scanner import PlacementPlan, scan, sysreg_write_target
from .sprobe import ProbeType, Snapshot, TrapRecord
from .sysregs import SCTLR_M, SCTLR_WXN, SysRegs

DEFAULT_PER_HIT_COST = 5611
DEFAULT_BUDGET = 1_000_000
OUTCOMES = ("CLEAN", "BLOCKED", "HALTED", "PANIC", "FAULT", "BUDGET")
PROBE_TARGET = {
    ProbeType.SCTLR_WRITE: "SCTLR write",
    ProbeType.TTBR_WRITE: "TTBR write",
    ProbeType.TTBCR_WRITE: "TTBCR write",
    ProbeType.FAULT_HANDLER: "abort handler",
}
MAX_LISTED = 5  # violations kept per oracle in a report


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class Outcome:
    outcome: str
    kind: str | None = None

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ScenarioError(f"unknown outcome {self.outcome!r}")

    def __str__(self):
        return f"{self.outcome}({self.kind})" if self.kind else self.outcome


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    program: Path
    expected: Outcome
    description: str = ""
    halt_on_alert: bool = False
    budget: int = DEFAULT_BUDGET
    per_hit_cost: int = DEFAULT_PER_HIT_COST
    unexpected_smc: str = "block"
    sctlr_policy: str = "block"
    defines: tuple[tuple[str, int], ...] = ()

    @classmethod
    def load(cls, path: str | Path) -> ScenarioSpec:
        path = Path(path)
        doc = json.loads(path.read_text())
        try:
            exp = doc["expected"]
            return cls(
                name=doc["name"],
                program=(path.parent / doc["program"]).resolve(),
                expected=Outcome(exp["outcome"], exp.get("kind")),
                description=doc.get("description", ""),
                halt_on_alert=bool(doc.get("halt_on_alert", False)),
                budget=int(doc.get("budget", DEFAULT_BUDGET)),
                per_hit_cost=int(doc.get("per_hit_cost", DEFAULT_PER_HIT_COST)),
                unexpected_smc=doc.get("unexpected_smc", "block"),
                sctlr_policy=doc.get("sctlr_policy", "block"),
                defines=tuple(sorted(doc.get("defines", {}).items())),
            )
        except KeyError as exc:
            raise ScenarioError(f"{path}: missing field {exc}") from None

    def with_defines(self, **defines: int) -> ScenarioSpec:
        return replace(self, defines=tuple(sorted({**dict(self.defines), **defines}.items())))

    def build(self) -> tuple[Image, PlacementPlan, PreBootConfig]:
        image = assemble_file(self.program, defines=dict(self.defines))
        plan = scan(image)
        return image, plan, PreBootConfig.from_image(image, plan)


def load_suite(directory: str | Path) -> list[ScenarioSpec]:
    return [ScenarioSpec.load(p) for p in sorted(Path(directory).glob("*.json"))]


def builtin_scenarios() -> Path:
    return Path(__file__).parent / "data" / "scenarios"


# -- oracles -------------------------------------------------------------------


@dataclass
class OracleVerdict:
    name: str
    checked: int = 0
    violations: list[tuple[int, str]] = field(default_factory=list)  # (counter, detail)
    skipped: bool = False

    @property
    def passed(self) -> bool:
        return not self.skipped and not self.violations

    def first_violation(self) -> int | None:
        return self.violations[0][0] if self.violations else None

    def fail(self, counter: int, detail: str) -> None:
        self.violations.append((counter, detail))

    def as_dict(self) -> dict:
        verdict = "SKIPPED" if self.skipped else ("PASS" if self.passed else "FAIL")
        return {"verdict": verdict, "checked": self.checked, "violation_count": len(self.violations),
                "violations": [{"counter": c, "detail": d} for c, d in self.violations[:MAX_LISTED]]}


class ProvenanceOracle:
    def __init__(self, code_frames: frozenset[int]):
        self.code_frames = code_frames
        self.verdict = OracleVerdict("provenance")

    def retired(self, ev: StepEvent, m: Machine) -> None:
        if ev.mode:
            self.verdict.checked += 1
            if ev.frame not in self.code_frames:
                self.verdict.fail(ev.counter, f"PL1 instruction at {ev.pc:#010x} fetched from frame {ev.frame:#x}")


class InvariantOracle:
    """S1-S5 after every retirement once the monitor has seen boot complete."""

    def __init__(self, mon: IntegrityMonitor):
        self.mon = mon
        self.split = mon.cfg.kernel_va_split
        self.verdict = OracleVerdict("invariants")
        mon.machine.mem.write_observers.append(self._write)
        self._counter = 0

    def _write(self, world: World, pa: int, value: int) -> None:
        # S4: page-table words change only through the secure world
        if world is World.NORMAL and pa >> PAGE_SHIFT in self.mon.state.protected_pt_frames:
            self.verdict.fail(self._counter, f"S4: normal-world store to page-table word {pa:#010x}")

    def retired(self, ev: StepEvent, m: Machine) -> None:
        self._counter = ev.counter
        st = self.mon.state
        if not st.boot_complete:
            return
        v = self.verdict
        v.checked += 1
        sr = m.sysregs
        if not sr.sctlr & SCTLR_WXN:
            v.fail(ev.counter, f"S2: WXN clear (SCTLR {sr.sctlr:#010x})")
        if not sr.sctlr & SCTLR_M:
            v.fail(ev.counter, f"S5: MMU off (SCTLR {sr.sctlr:#010x})")
        if sr.ttbr0 not in st.registry or (sr.ttbcr & 7 and sr.ttbr1 not in st.registry):
            v.fail(ev.counter, f"S3: unvalidated table base {sr.ttbr0:#010x}")
        if ev.mode and ev.pc < self.split:
            v.fail(ev.counter, f"S1: PL1 instruction retired from user address {ev.pc:#010x}")


class SnapshotOracle:
    def __init__(self, mon: IntegrityMonitor):
        self.machine = mon.machine
        self.engine = mon.engine
        self.verdict = OracleVerdict("snapshot")
        self.engine.snapshot_listeners.append(self._check)

    def _check(self, s: Snapshot) -> None:
        m, rec = self.machine, self.machine.last_smc
        self.verdict.checked += 1
        diffs = []
        if s.regs != rec.regs:
            diffs.append("registers")
        if s.sysregs != rec.sysregs:
            diffs.append("system registers")
        if s.pc != rec.pc:
            diffs.append("pc")
        if s.pa != rec.fetch_pa:
            diffs.append("fetch address")
        if s.counter != m.counter:
            diffs.append("counter")
        if s.probe is not self.engine.probes.get(rec.fetch_pa):
            diffs.append("probe")
        if diffs:
            self.verdict.fail(m.counter, f"snapshot at {rec.pc:#010x} differs in " + ", ".join(diffs))


class CompletenessOracle:
    def __init__(self, plan: PlacementPlan):
        self.sites = {e.va for e in plan.entries}
        self.verdict = OracleVerdict("completeness")

    def retired(self, ev: StepEvent, m: Machine) -> None:
        if ev.instruction.__class__ is Instruction and ev.instruction.mnemonic == "MSR":
            self.verdict.checked += 1
            if sysreg_write_target(ev.instruction) is not None and ev.pc not in self.sites:
                self.verdict.fail(ev.counter, f"unplanned system-register write at {ev.pc:#010x}")


# -- metrics and reports -----------------------------------------------------------


@dataclass(frozen=True)
class TypeMetrics:
    hits: int
    post_boot_hits: int
    frequency: float | None   # mean retirements per post-boot hit; None when there are none

    def frequency_text(self) -> str:
        return "N/A" if self.frequency is None else f"{self.frequency:,.1f}"


@dataclass(frozen=True)
class Metrics:
    per_type: dict[ProbeType, TypeMetrics]
    instructions: int
    boot_counter: int | None
    per_hit_cost: int

    @property
    def total_hits(self) -> int:
        return sum(t.hits for t in self.per_type.values())

    @property
    def estimated_overhead(self) -> int:
        return self.total_hits * self.per_hit_cost

    def as_dict(self) -> dict:
        return {
            "instructions": self.instructions,
            "boot_counter": self.boot_counter,
            "total_hits": self.total_hits,
            "per_hit_cost": self.per_hit_cost,
            "estimated_secure_overhead": self.estimated_overhead,
            "overhead_basis": "estimated from a fixed per-hit cost",
            "per_type": {t.tag: {"target": PROBE_TARGET[t], "hits": m.hits, "post_boot_hits": m.post_boot_hits,
                                 "hit_frequency": m.frequency_text()}
                         for t, m in self.per_type.items()},
        }


def compute_metrics(trace: list[TrapRecord], instructions: int, boot_counter: int | None,
                    per_hit_cost: int = DEFAULT_PER_HIT_COST) -> Metrics:
    per_type = {}
    for t in ProbeType:
        counters = [r.counter for r in trace if r.probe_type == t.tag]
        post = [c for c in counters if boot_counter is not None and c > boot_counter]
        freq = round((post[-1] - boot_counter) / len(post), 1) if post else None
        per_type[t] = TypeMetrics(len(counters), len(post), freq)
    return Metrics(per_type, instructions, boot_counter, per_hit_cost)


def render_table(metrics: Metrics, title: str = "") -> str:
    rows = [("Type", "Probe target", "Hits (post-boot)", "Hit frequency")]
    for t, m in metrics.per_type.items():
        rows.append((t.tag, PROBE_TARGET[t], str(m.post_boot_hits), m.frequency_text()))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = [title] if title else []
    for n, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    lines.append(f"{metrics.instructions} instructions, estimated secure-world overhead "
                 f"{metrics.estimated_overhead} instructions ({metrics.per_hit_cost} per hit, estimated)")
    return "\n".join(lines)


@dataclass
class RunReport:
    scenario: str
    expected: Outcome
    outcome: Outcome
    alerts: list[Alert]
    metrics: Metrics
    probes: list[dict]
    oracles: dict[str, OracleVerdict]
    trace: list[TrapRecord]
    halt_reason: str
    steps: int
    probes_enabled: bool = True

    @property
    def matched(self) -> bool:
        return self.outcome == self.expected

    @property
    def trace_digest(self) -> str:
        return hashlib.sha256("\n".join(r.to_json() for r in self.trace).encode()).hexdigest()

    def trace_text(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.trace)

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "probes_enabled": self.probes_enabled,
            "expected": str(self.expected),
            "outcome": str(self.outcome),
            "matched": self.matched,
            "halt_reason": self.halt_reason,
            "steps": self.steps,
            "alerts": [a.as_dict() for a in self.alerts],
            "metrics": self.metrics.as_dict(),
            "probes": self.probes,
            "oracles": {k: v.as_dict() for k, v in sorted(self.oracles.items())},
            "trace_digest": self.trace_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        status = "ok" if self.matched else "MISMATCH"
        head = f"{self.scenario}: {self.outcome} (expected {self.expected}) {status}"
        oracles = ", ".join(f"{k}={v.as_dict()['verdict']}" for k, v in sorted(self.oracles.items()))
        return "\n".join([head, render_table(self.metrics), f"oracles: {oracles}"])


# -- running ---------------------------------------------------------------------------------


def _outcome(m: Machine, mon: IntegrityMonitor | None, alerts: list[Alert], steps: int, budget: int) -> Outcome:
    if mon is not None and mon.engine.halted_by is not None:
        return Outcome("HALTED", mon.engine.halted_by.kind.value)
    if alerts:
        return Outcome("BLOCKED", alerts[0].kind.value)
    if m.halted:
        if m.halt_reason == "HALT":
            return Outcome("CLEAN" if m.halt_code == 0 else "PANIC")
        return Outcome("FAULT")
    return Outcome("BUDGET")


def arch_state(m: Machine) -> tuple:
    """The normal-world architectural state compared by the transparency check."""
    r, sr = m.normal_bank, m.sysregs
    return (r.pc, tuple(r.r), r.psr, sr.sctlr, sr.ttbr0, sr.ttbr1, sr.ttbcr)


def execute(spec: ScenarioSpec, *, probes: bool = True, halt_on_alert: bool | None = None,
            oracles: bool = True, record_states: bool = False):
    """Run a scenario and return ``(report, machine, states, events)``.

    ``states`` holds the architectural state after every normal-world
    retirement (after the monitor has resolved a trap, for probe sites) and
    ``events`` the matching step events; both are empty unless requested.
    """
    image, plan, cfg = spec.build()
    hoa = spec.halt_on_alert if halt_on_alert is None else halt_on_alert
    m = Machine()
    image.load(m.mem)
    m.reset(image.entry)
    mon = None
    alerts: list[Alert] = []
    watchers = []
    verdicts: dict[str, OracleVerdict] = {}
    if probes:
        mon = IntegrityMonitor(m, cfg, halt_on_alert=hoa, unexpected_smc=spec.unexpected_smc,
                               sctlr_policy=spec.sctlr_policy)
        alerts = mon.state.alert_log
        if oracles:
            snap = SnapshotOracle(mon)
            inv = InvariantOracle(mon)
            verdicts.update(snapshot=snap.verdict, invariants=inv.verdict)
            watchers.append(inv)
        try:
            mon.configure()
        except BootRefused:
            pass
    else:
        verdicts.update(snapshot=OracleVerdict("snapshot", skipped=True),
                        invariants=OracleVerdict("invariants", skipped=True))
    if oracles:
        prov = ProvenanceOracle(cfg.code_frames)
        comp = CompletenessOracle(plan)
        watchers += [prov, comp]
        verdicts.update(provenance=prov.verdict, completeness=comp.verdict)

    states: list[tuple] = []
    events: list[StepEvent] = []
    handle = mon.engine.handle_trap if mon is not None else None
    steps = 0
    budget = spec.budget
    entry_mark = None
    while not m.halted and steps < budget:
        ev = m.step()
        steps += 1
        if m.world is World.SECURE:
            if handle is not None:
                verdict = handle()
                if record_states and getattr(verdict, "eret", False) and entry_mark is not None:
                    # the monitor retired the faulting instruction itself: the exception
                    # entry and the vector branch are invisible to a run without probes
                    del states[entry_mark:], events[entry_mark:]
                    entry_mark = None
            else:
                # no secure firmware installed: SMC behaves as a no-op
                m.world_switch(World.NORMAL, m.last_smc.pc + 4)
        if ev is None:
            entry_mark = len(states)
            continue
        for w in watchers:
            w.retired(ev, m)
        if record_states:
            states.append(arch_state(m))
            events.append(ev)

    trace = mon.engine.trace if mon is not None else []
    boot = mon.state.boot_counter if mon is not None else None
    metrics = compute_metrics(trace, m.counter, boot, spec.per_hit_cost)
    probe_rows = []
    if mon is not None:
        probe_rows = [{"va": f"{p.va:#010x}", "pa": f"{p.pa:#010x}", "type": p.probe_type.tag,
                       "hits": p.hit_count} for p in sorted(mon.engine.probes.values(), key=lambda p: p.va)]
    report = RunReport(spec.name, spec.expected, _outcome(m, mon, alerts, steps, budget), list(alerts),
                       metrics, probe_rows, verdicts, list(trace), m.halt_reason, steps, probes)
    return report, m, states, events


def run(spec: ScenarioSpec, *, probes: bool = True, halt_on_alert: bool | None = None,
        oracles: bool = True) -> RunReport:
    return execute(spec, probes=probes, halt_on_alert=halt_on_alert, oracles=oracles)[0]


def run_suite(directory: str | Path | None = None) -> list[RunReport]:
    return [run(s) for s in load_suite(directory or builtin_scenarios())]


# -- transparency ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransparencyResult:
    scenario: str
    verdict: str            # PASS, FAIL or EXPECTED_DIVERGENCE
    with_probes: int
    without_probes: int
    divergence: int | None = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    def as_dict(self) -> dict:
        return {"scenario": self.scenario, "verdict": self.verdict, "with_probes": self.with_probes,
                "without_probes": self.without_probes, "divergence": self.divergence, "detail": self.detail}


def _reads_probe_site(prev: tuple, ev: StepEvent, m: Machine, probe_pas: set[int]) -> bool:
    ins = ev.instruction
    if ins.__class__ is not Instruction or ins.mnemonic != "LDR":
        return False
    va = (prev[1][ins.rs] + ins.imm) & 0xFFFFFFFF
    sr = SysRegs(sctlr=prev[3], ttbr0=prev[4], ttbr1=prev[5], ttbcr=prev[6])
    if not sr.sctlr & SCTLR_M:
        return va in probe_pas
    try:
        pte = lookup(va, sr, m.mem)[0]
    except MemoryFault:
        return False
    return (pte & 0xFFFFF000) | (va & 0xFFF) in probe_pas


def transparency_diff(spec: ScenarioSpec) -> TransparencyResult:
    """Compare per-retirement normal-world state with and without probes installed."""
    with_rep, _, a, _ = execute(spec, probes=True, oracles=False, record_states=True)
    _, plain_m, b, b_events = execute(spec, probes=False, oracles=False, record_states=True)
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            break
    else:
        if len(a) == len(b):
            return TransparencyResult(spec.name, "PASS", len(a), len(b))
        i = min(len(a), len(b))
    prev = b[i - 1] if i else None
    probe_pas = {int(p["pa"], 16) for p in with_rep.probes}
    if prev is not None and i < len(b_events) and _reads_probe_site(prev, b_events[i], plain_m, probe_pas):
        return TransparencyResult(spec.name, "EXPECTED_DIVERGENCE", len(a), len(b), i,
                                  f"instruction at {b_events[i].pc:#010x} reads a probe site and sees the SMC word")
    where = f"{b_events[i].pc:#010x}" if i < len(b_events) else "end of run"
    return TransparencyResult(spec.name, "FAIL", len(a), len(b), i, f"states differ after retirement {i} ({where})")

