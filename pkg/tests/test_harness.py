import json

import pytest

from conftest import PROGRAMS, SCENARIOS
from tzmon.cli import main
from tzmon.harness import (
    Outcome, ScenarioError, ScenarioSpec, compute_metrics, execute, render_table, run, transparency_diff,
)
from tzmon.image import Image
from tzmon.monitor import PreBootConfig
from tzmon.scanner import PlacementPlan
from tzmon.sprobe import ProbeType, TrapRecord


def spec(name: str) -> ScenarioSpec:
    return ScenarioSpec.load(SCENARIOS / f"{name}.json")


def test_outcome_text():
    assert str(Outcome("BLOCKED", "BAD_TTBR")) == "BLOCKED(BAD_TTBR)"
    assert str(Outcome("CLEAN")) == "CLEAN"
    with pytest.raises(ScenarioError):
        Outcome("EXPLODED")


def test_scenario_missing_field(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"name": "s", "program": "x.s"}))
    with pytest.raises(ScenarioError, match="expected"):
        ScenarioSpec.load(tmp_path / "s.json")


def test_metrics_from_a_hand_made_trace():
    trace = [TrapRecord(5, "#2", 0, "PassThrough"), TrapRecord(12, "#2", 0, "PassThrough"),
             TrapRecord(30, "#4", 0, "PassThrough"), TrapRecord(50, "#4", 0, "PassThrough"),
             TrapRecord(7, "#1", 0, "EmulateAndResume")]
    m = compute_metrics(trace, 100, 10, per_hit_cost=3)
    t = m.per_type
    assert (t[ProbeType.SCTLR_WRITE].hits, t[ProbeType.SCTLR_WRITE].post_boot_hits) == (1, 0)
    assert t[ProbeType.SCTLR_WRITE].frequency_text() == "N/A"
    assert t[ProbeType.TTBCR_WRITE].frequency is None
    assert (t[ProbeType.TTBR_WRITE].post_boot_hits, t[ProbeType.TTBR_WRITE].frequency) == (1, 2.0)
    assert (t[ProbeType.FAULT_HANDLER].post_boot_hits, t[ProbeType.FAULT_HANDLER].frequency) == (2, 20.0)
    assert m.total_hits == 5 and m.estimated_overhead == 15
    table = render_table(m)
    assert table.count("N/A") == 2 and "estimated" in table


def test_metrics_without_boot():
    m = compute_metrics([TrapRecord(5, "#1", 0, "x")], 10, None)
    assert all(t.frequency is None and t.post_boot_hits == 0 for t in m.per_type.values())


def test_metrics_agree_with_probe_counters():
    report = run(spec("b3_mmap"))
    by_type = {}
    for p in report.probes:
        by_type[p["type"]] = by_type.get(p["type"], 0) + p["hits"]
    for t, tm in report.metrics.per_type.items():
        assert tm.hits == by_type.get(t.tag, 0)
    assert report.metrics.total_hits == len(report.trace)
    # steps also count exception entries, which retire nothing
    assert report.metrics.instructions < report.steps


def test_report_is_deterministic():
    a = run(spec("b2_context_switch")).to_json()
    b = run(spec("b2_context_switch")).to_json()
    assert a == b
    doc = json.loads(a)
    assert doc["outcome"] == "CLEAN" and doc["matched"]


def test_budget_outcome():
    report = run(ScenarioSpec.load(SCENARIOS / "b4_cow.json").__class__(
        name="short", program=PROGRAMS / "b4_cow.s", expected=Outcome("BUDGET"), budget=500))
    assert str(report.outcome) == "BUDGET" and report.matched


def test_monitorless_attack_runs_unchecked():
    report = run(spec("a1_pxn_clear"), probes=False)
    assert str(report.outcome) == "CLEAN"
    assert not report.oracles["provenance"].passed
    assert report.oracles["snapshot"].skipped


def test_records_states_only_on_request():
    _, _, states, events = execute(spec("b1_boot"), oracles=False)
    assert states == [] == events
    _, m, states, events = execute(spec("b1_boot"), oracles=False, record_states=True)
    assert len(states) == len(events) > 0
    assert states[-1][0] == m.regs.pc


@pytest.mark.parametrize("name, verdict", [
    ("b1_boot", "PASS"), ("x1_code_peek", "EXPECTED_DIVERGENCE"), ("a2_wxn_clear", "FAIL"),
])
def test_transparency_verdicts(name, verdict):
    r = transparency_diff(spec(name))
    assert r.verdict == verdict, r.detail
    if verdict != "PASS":
        assert r.divergence is not None and r.detail


# -- command line ----------------------------------------------------------------------


def test_cli_assemble_scan(tmp_path, capsys):
    img, plan, cfg = tmp_path / "k.img", tmp_path / "k.plan", tmp_path / "k.json"
    assert main(["assemble", str(PROGRAMS / "reference.s"), "-o", str(img)]) == 0
    assert main(["scan", str(img), "-o", str(plan), "--config", str(cfg)]) == 0
    assert "total=12" in capsys.readouterr().out
    assert PlacementPlan.read(plan).count_tuple() == (6, 4, 1, 1)
    assert PreBootConfig.from_json(cfg.read_text()).probe_plan == PlacementPlan.read(plan)
    assert Image.read(img).entry == Image.read(img).symbol("_start")


def test_cli_assemble_defines_and_errors(tmp_path, capsys):
    src = tmp_path / "a.s"
    src.write_text(".equ N, 1\n.section text, 0x1000\nMOVI r0, #N\n")
    assert main(["assemble", str(src), "-o", str(tmp_path / "a.img"), "-D", "N=0x22"]) == 0
    assert Image.read(tmp_path / "a.img").sections[0].words()[0] & 0xFFFF == 0x22
    src.write_text("BOGUS\n")
    assert main(["assemble", str(src), "-o", str(tmp_path / "b.img")]) == 1
    assert ":1:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["assemble", str(src), "-o", "x", "-D", "N"])


def test_cli_run(tmp_path, capsys):
    rep, trace = tmp_path / "r.json", tmp_path / "t.jsonl"
    assert main(["run", str(SCENARIOS / "a3_forged_ttbr.json"), "--report", str(rep), "--trace", str(trace)]) == 0
    out = capsys.readouterr().out
    assert "BLOCKED(BAD_TTBR)" in out and "Hit frequency" in out
    doc = json.loads(rep.read_text())
    assert doc["outcome"] == "BLOCKED(BAD_TTBR)"
    lines = [json.loads(x) for x in trace.read_text().splitlines()]
    assert len(lines) == doc["metrics"]["total_hits"]
    assert {"instruction_counter", "probe_type", "va", "verdict"} == set(lines[0])
    # without the monitor the attack is not caught, so the outcome no longer matches
    assert main(["run", str(SCENARIOS / "a3_forged_ttbr.json"), "--no-probes"]) == 1


def test_cli_run_halt_on_alert(capsys):
    main(["run", str(SCENARIOS / "a2_wxn_clear.json"), "--halt-on-alert"])
    assert "HALTED(WXN_DISABLE)" in capsys.readouterr().out


def test_cli_suite(tmp_path, capsys):
    for name, expected in (("b1_boot", "CLEAN"), ("a7_stray_smc", "CLEAN")):
        doc = json.loads((SCENARIOS / f"{name}.json").read_text())
        doc["program"] = str(PROGRAMS / f"{name}.s")
        doc["expected"] = {"outcome": expected}
        (tmp_path / f"{name}.json").write_text(json.dumps(doc))
    # a7 is really blocked, so exactly one mismatch
    assert main(["suite", str(tmp_path)]) == 1
    out = capsys.readouterr().out
    assert "1/2 scenarios matched" in out and "MISMATCH a7_stray_smc" in out
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["suite", str(empty)]) == 1


def test_cli_diff_transparency(capsys):
    assert main(["diff-transparency", str(SCENARIOS / "b1_boot.json")]) == 0
    assert main(["diff-transparency", str(SCENARIOS / "x1_code_peek.json")]) == 1
    out = capsys.readouterr().out
    assert "b1_boot: PASS" in out and "EXPECTED_DIVERGENCE" in out
