"""
Where the traps land
====================

The hit table reports one number per probe type: instructions retired per
post-boot hit. The trace behind it has the retirement counter of every trap,
so we can look at the spacing directly. Longer runs of the benign workloads
give enough samples to be worth summarising.
"""

# %%
import numpy as np

from tzmon.harness import ScenarioSpec, builtin_scenarios, run
from tzmon.sprobe import ProbeType

runs = {
    "b2_context_switch": {"YIELDS": 1000},
    "b3_mmap": {"MMAPS": 3000},
    "b4_cow": {"ROUNDS": 1500},
}
reports = {name: run(ScenarioSpec.load(builtin_scenarios() / f"{name}.json").with_defines(**d))
           for name, d in runs.items()}

# %%
# Trap counters as arrays, one per probe type, keeping only post-boot traps.


def counters(report, ptype):
    boot = report.metrics.boot_counter
    c = np.array([t.counter for t in report.trace if t.probe_type == ptype.tag], dtype=np.int64)
    return c[c > boot] if boot is not None else c[:0]


for name, r in reports.items():
    for ptype in ProbeType:
        c = counters(r, ptype)
        print(f"{name:18} {ptype.tag}: {c.size:5d} post-boot traps")

# %%
# Gaps between consecutive traps of one type. A workload with a fixed loop
# body gives a sharply peaked distribution. The table's figure is measured
# from the boot point, so it matches the mean gap only when there are many
# hits; with three (b2's abort handler) the lead-in dominates.
for name, r in reports.items():
    for ptype in (ProbeType.TTBR_WRITE, ProbeType.FAULT_HANDLER):
        c = counters(r, ptype)
        if c.size < 2:
            continue
        gaps = np.diff(c)
        q = np.percentile(gaps, [5, 50, 95])
        freq = r.metrics.per_type[ptype].frequency_text()
        print(f"{name:18} {ptype.tag}: gap p5/p50/p95 = {q[0]:.0f}/{q[1]:.0f}/{q[2]:.0f}, "
              f"mean {gaps.mean():.1f}, table says {freq}")

# %%
# A coarse text histogram of the abort-handler gaps in the copy-on-write run.
gaps = np.diff(counters(reports["b4_cow"], ProbeType.FAULT_HANDLER))
hist, edges = np.histogram(gaps, bins=8)
for n, lo, hi in zip(hist, edges[:-1], edges[1:]):
    print(f"{lo:7.0f}-{hi:<7.0f} {'#' * int(60 * n / hist.max())}")

# %%
# Estimated secure-world cost: every hit is charged a fixed number of
# instructions, so the overhead is a straight multiple of the trap count.
for name, r in reports.items():
    m = r.metrics
    print(f"{name:18} {m.total_hits:5d} hits x {m.per_hit_cost} = {m.estimated_overhead:,} "
          f"vs {m.instructions:,} normal-world instructions")
