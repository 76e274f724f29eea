import json
import pytest

from agreement import validator_agreement
from conftest import SCENARIOS, boot
from tablelab import KDATA, MASTER, PROTECTED, SPLIT, USER_CODE, USER_DATA, TableLab
from tzmon.alerts import AlertKind
from tzmon.harness import ScenarioSpec, execute
from tzmon.machine import Machine
from tzmon.memory import World
from tzmon.mmu import PTE_PXN, PTE_V, PTE_W, PTE_XN, table_frames
from tzmon.monitor import (
    BootRefused, ConfigError, IntegrityMonitor, PreBootConfig, Rule, check_pte_update, classify_pte,
    validate_page_table,
)
from tzmon.scanner import PlacementPlan, PlanEntry, scan
from tzmon.sprobe import BlockAction, EmulateAndResume, PassThrough, ProbeType, Snapshot
from tzmon.sysregs import SCTLR_A, SCTLR_M, SCTLR_V, SCTLR_WXN

BOOTED = SCTLR_M | SCTLR_V | SCTLR_WXN


def snap(mon, probe_type, value, **sysregs):
    """A trap snapshot at the first probe of ``probe_type`` with the MSR source register set to ``value``."""
    p = min((p for p in mon.engine.probes.values() if p.probe_type is probe_type), key=lambda p: p.va)
    m = mon.machine
    regs = m.regs.copy()
    regs.r[p.instruction.rs] = value
    sr = m.sysregs.copy()
    for k, v in sysregs.items():
        setattr(sr, k, v)
    return Snapshot(regs, sr, p.va, p.pa, m.counter, p)


@pytest.fixture
def booted(reference_image):
    return boot(reference_image)


# -- pre-boot ----------------------------------------------------------------------


def test_configure_installs_plan(booted, reference_image):
    m, mon = booted
    plan = scan(reference_image)
    assert sorted(p.va for p in mon.engine.probes.values()) == [e.va for e in plan.entries]
    assert mon.cfg.kernel_pt_base in mon.state.registry
    assert table_frames(mon.cfg.kernel_pt_base, m.mem) <= mon.state.protected_pt_frames
    assert not mon.state.boot_complete


def test_tampered_code_refuses_boot(reference_image):
    m = Machine()
    reference_image.load(m.mem)
    m.reset(reference_image.entry)
    cfg = PreBootConfig.from_image(reference_image, scan(reference_image))
    pa = reference_image.symbol("cpu_set_sctlr")
    m.mem.write_word(pa, m.mem.read_word(pa) ^ 1 << 20, World.SECURE)
    mon = IntegrityMonitor(m, cfg)
    with pytest.raises(BootRefused) as exc:
        mon.configure()
    assert exc.value.alert.kind is AlertKind.BOOT_GATE_FAIL
    assert m.halted and mon.engine.probes == {}


def test_probe_outside_code_is_rejected(reference_image):
    plan = scan(reference_image)
    bad = PlacementPlan(plan.entries + (PlanEntry(reference_image.symbol("current"), ProbeType.SCTLR_WRITE),))
    m = Machine()
    reference_image.load(m.mem)
    cfg = PreBootConfig.from_image(reference_image, bad)
    with pytest.raises(ConfigError, match="outside approved code"):
        IntegrityMonitor(m, cfg).configure()


def test_unmapped_probe_is_rejected(reference_image):
    plan = scan(reference_image)
    bad = PlacementPlan(plan.entries + (PlanEntry(0x50000000, ProbeType.SCTLR_WRITE),))
    m = Machine()
    reference_image.load(m.mem)
    with pytest.raises(ConfigError, match="probe plan"):
        IntegrityMonitor(m, PreBootConfig.from_image(reference_image, bad)).configure()


def test_config_json_round_trip(reference_image, tmp_path):
    cfg = PreBootConfig.from_image(reference_image, scan(reference_image))
    back = PreBootConfig.from_json(cfg.to_json())
    assert back == cfg
    doc = json.loads(cfg.to_json())
    del doc["probe_plan"]
    doc["probe_plan_file"] = "plan.txt"
    cfg.probe_plan.save(tmp_path / "plan.txt")
    assert PreBootConfig.from_json(json.dumps(doc), tmp_path) == cfg
    doc["version"] = 99
    with pytest.raises(ConfigError, match="version"):
        PreBootConfig.from_json(json.dumps(doc), tmp_path)


def test_config_rejects_overlapping_frames(reference_image):
    cfg = PreBootConfig.from_image(reference_image, scan(reference_image))
    with pytest.raises(ConfigError):
        PreBootConfig(cfg.kernel_pt_base, cfg.kernel_code_ranges, cfg.kernel_code_frames,
                      cfg.pt_frames | {min(cfg.kernel_code_frames)}, cfg.probe_plan)


# -- handlers ------------------------------------------------------------------------


def test_sctlr_before_boot_is_emulated(booted):
    _, mon = booted
    v = mon.handle_sctlr_write(snap(mon, ProbeType.SCTLR_WRITE, SCTLR_M, sctlr=BOOTED))
    assert isinstance(v, EmulateAndResume)


@pytest.mark.parametrize("new, kind", [
    (SCTLR_M | SCTLR_V, AlertKind.WXN_DISABLE),
    (SCTLR_V | SCTLR_WXN, AlertKind.MMU_DISABLE),
    (SCTLR_M | SCTLR_WXN, AlertKind.VECTOR_REBASE),
    (BOOTED | SCTLR_A, None),
    (BOOTED, None),
])
def test_sctlr_after_boot(booted, new, kind):
    _, mon = booted
    mon.state.boot_complete = True
    v = mon.handle_sctlr_write(snap(mon, ProbeType.SCTLR_WRITE, new, sctlr=BOOTED))
    if kind is None:
        assert isinstance(v, EmulateAndResume) and v.effective.mnemonic == "MSR"
    else:
        assert v.alert.kind is kind and v.action is BlockAction.SKIP


def test_boot_gate_needs_wxn(booted):
    _, mon = booted
    v = mon.handle_ttbr_write(snap(mon, ProbeType.TTBR_WRITE, 0xC0110000, sctlr=SCTLR_M | SCTLR_V))
    assert v.alert.kind is AlertKind.BOOT_GATE_FAIL and v.action is BlockAction.HALT
    assert not mon.state.boot_complete


def test_boot_gate_latches_on_first_process_table(booted):
    _, mon = booted
    kpt = mon.cfg.kernel_pt_base
    assert mon.handle_ttbr_write(snap(mon, ProbeType.TTBR_WRITE, kpt, sctlr=BOOTED)) is PassThrough
    assert not mon.state.boot_complete
    assert mon.handle_ttbr_write(snap(mon, ProbeType.TTBR_WRITE, 0xC0110000, sctlr=BOOTED)) is PassThrough
    assert mon.state.boot_complete
    counter = mon.state.boot_counter
    mon.handle_ttbr_write(snap(mon, ProbeType.TTBR_WRITE, 0xC0110000, sctlr=BOOTED))
    assert mon.state.boot_counter == counter


def test_registered_table_is_not_revalidated(booted, monkeypatch):
    _, mon = booted
    mon.handle_ttbr_write(snap(mon, ProbeType.TTBR_WRITE, 0xC0110000, sctlr=BOOTED))
    assert 0xC0110000 in mon.state.registry

    def boom(base):
        raise AssertionError("revalidated")

    monkeypatch.setattr(mon, "validate", boom)
    assert mon.handle_ttbr_write(snap(mon, ProbeType.TTBR_WRITE, 0xC0110000, sctlr=BOOTED)) is PassThrough


def test_crafted_table_is_refused(booted):
    m, mon = booted
    mon.state.boot_complete = True
    evil = 0xC0120000
    # a user mapping onto kernel text
    m.mem.write_word(evil, (evil + 0x1000) | 1, World.SECURE)
    m.mem.write_word(evil + 0x1000 + 4 * 0x20, 0xC0008000 | PTE_V | 0x4 | PTE_PXN, World.SECURE)
    v = mon.handle_ttbr_write(snap(mon, ProbeType.TTBR_WRITE, evil, sctlr=BOOTED))
    assert v.alert.kind is AlertKind.BAD_TTBR and evil not in mon.state.registry
    v = mon.handle_ttbr_write(snap(mon, ProbeType.TTBR_WRITE, 0xC0110004, sctlr=BOOTED))
    assert v.alert.kind is AlertKind.BAD_TTBR


@pytest.mark.parametrize("value, ok", [(0, True), (0x100, True), (1, False), (7, False)])
def test_ttbcr(booted, value, ok):
    _, mon = booted
    v = mon.handle_ttbcr_write(snap(mon, ProbeType.TTBCR_WRITE, value))
    assert (v is PassThrough) == ok
    if not ok:
        assert v.alert.kind is AlertKind.BAD_TTBCR


def test_fault_ignores_ordinary_faults(booted):
    _, mon = booted
    s = snap(mon, ProbeType.FAULT_HANDLER, 0, sctlr=BOOTED, ttbr0=0xC0110000, dfsr=0x5, dfar=0x1234)
    assert mon.handle_page_fault(s) is PassThrough


# -- the entry predicate --------------------------------------------------------------


@pytest.fixture(scope="module")
def lab():
    return TableLab()


@pytest.mark.parametrize("va, word, rule", [
    (0x8000, 0xC0300000 | USER_DATA, None),
    (0x8000, 0xC0300000 | USER_CODE, None),
    (0x8000, 0xC0300000 | (USER_DATA & ~PTE_PXN), Rule.USER_PXN),
    (0x8000, 0xC0008000 | USER_CODE, Rule.CODE_ALIAS),
    (0xC0008000, 0xC0008000 | PTE_V | PTE_W, Rule.CODE_PERMS),
    (0xC0008000, 0xC0008000 | PTE_V, None),
    (0x8000, 0xC0100000 | USER_DATA, Rule.PT_IN_USER),
    (0xC0100000, 0xC0100000 | KDATA, Rule.PT_WRITABLE),
    (0xC0300000, 0xC0300000 | PTE_V | PTE_W, Rule.EXEC_DATA),
    (0xC0300000, 0, None),
])
def test_classify_examples(lab, va, word, rule):
    # kernel-half entries are also compared with the master; make it agree here
    master = word if va >= SPLIT else None
    assert classify_pte(va, word, lab.view, PROTECTED, master) is rule
    assert check_pte_update(va, word, lab.view, PROTECTED, master) == (rule is None)


def test_kernel_remap_against_master(lab):
    master = 0xC0100000 | PTE_V | PTE_XN | PTE_PXN
    assert classify_pte(0xC0100000, master, lab.view, PROTECTED, master) is None
    assert classify_pte(0xC0100000, master ^ PTE_PXN, lab.view, PROTECTED, master) is Rule.KERNEL_REMAP


def test_master_table_is_valid(lab):
    r = validate_page_table(MASTER, lab.view, PROTECTED, lab.mem)
    assert r.ok and r.frames == PROTECTED


def test_kernel_half_must_match_master(lab):
    lab.clear_area()
    base = 0xC0200000
    for slot in range(SPLIT >> 22, 1024):
        lab.w(base | slot << 2, lab.master_l1(slot))
    assert validate_page_table(base, lab.view, PROTECTED, lab.mem)
    lab.w(base | 0x3FE << 2, 0xC0201000 | 1)
    r = validate_page_table(base, lab.view, PROTECTED, lab.mem)
    assert r.rule is Rule.KERNEL_L1 and r.va == 0x3FE << 22


def test_validator_matches_brute_force(lab):
    result = validator_agreement(250, seed=7, lab=lab)
    assert not result.mismatches, result.mismatches[:3]
    # A whole candidate table shares the master's kernel half, so only these rules can fire;
    # the per-entry ones (CODE_PERMS, PT_WRITABLE, EXEC_DATA, KERNEL_REMAP) need single updates.
    reachable = {Rule.MISALIGNED, Rule.TABLE_OUTSIDE_RAM, Rule.TABLE_IS_CODE, Rule.KERNEL_L1,
                 Rule.CODE_ALIAS, Rule.PT_IN_USER, Rule.USER_PXN}
    assert result.outcomes[None] > 20
    assert {r.name for r in reachable} <= set(result.outcomes)


# -- whole runs ------------------------------------------------------------------------


def test_boot_without_wxn_halts():
    spec = ScenarioSpec.load(SCENARIOS / "b1_boot.json").with_defines(BOOT_SCTLR=SCTLR_M | SCTLR_V)
    report = execute(spec, oracles=False)[0]
    assert str(report.outcome) == "HALTED(BOOT_GATE_FAIL)"


def test_registered_tables_stay_protected():
    spec = ScenarioSpec.load(SCENARIOS / "b3_mmap.json")
    image, plan, cfg = spec.build()
    m = Machine()
    image.load(m.mem)
    m.reset(image.entry)
    mon = IntegrityMonitor(m, cfg)
    mon.configure()
    while not m.halted:
        m.step()
        if m.world is World.SECURE:
            mon.engine.handle_trap()
    assert m.halt_reason == "HALT" and m.halt_code == 0 and not mon.state.alert_log
    reg = mon.state.registry
    assert len(reg.tables) >= 2
    for base in reg.tables:
        assert table_frames(base, m.mem) <= mon.state.protected_pt_frames
