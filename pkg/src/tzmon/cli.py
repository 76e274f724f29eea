"""Command-line front end: ``tzmon {assemble,scan,run,suite,diff-transparency}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .asm import AsmError, assemble_file
from .harness import ScenarioSpec, builtin_scenarios, load_suite, run, transparency_diff
from .image import Image
from .monitor import PreBootConfig
from .scanner import scan


def _define(text: str) -> tuple[str, int]:
    name, _, value = text.partition("=")
    if not name or not value:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    return name, int(value, 0)


def cmd_assemble(args) -> int:
    try:
        image = assemble_file(args.src, defines=dict(args.define))
    except AsmError as exc:
        print(exc, file=sys.stderr)
        return 1
    image.save(args.output)
    print(f"{args.output}: {len(image.sections)} sections, entry {image.entry:#010x}")
    return 0


def cmd_scan(args) -> int:
    image = Image.read(args.image)
    plan = scan(image)
    plan.save(args.output)
    print(plan.to_text().splitlines()[-1])
    if args.config:
        Path(args.config).write_text(PreBootConfig.from_image(image, plan).to_json())
    return 0


def cmd_run(args) -> int:
    spec = ScenarioSpec.load(args.scenario)
    report = run(spec, probes=not args.no_probes, halt_on_alert=True if args.halt_on_alert else None)
    if args.report:
        Path(args.report).write_text(report.to_json())
    if args.trace:
        Path(args.trace).write_text(report.trace_text())
    print(report.summary())
    return 0 if report.matched else 1


def cmd_suite(args) -> int:
    specs = load_suite(args.dir or builtin_scenarios())
    if not specs:
        print(f"no scenarios in {args.dir}", file=sys.stderr)
        return 1
    mismatches = 0
    for spec in specs:
        report = run(spec)
        ok = report.matched
        mismatches += not ok
        print(f"{'ok      ' if ok else 'MISMATCH'} {spec.name:<22} {report.outcome}  (expected {spec.expected})")
    print(f"{len(specs) - mismatches}/{len(specs)} scenarios matched")
    return mismatches


def cmd_diff_transparency(args) -> int:
    result = transparency_diff(ScenarioSpec.load(args.scenario))
    line = f"{result.scenario}: {result.verdict} ({result.with_probes} vs {result.without_probes} states)"
    print(line + (f": {result.detail}" if result.detail else ""))
    return 0 if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tzmon", description="Two-world machine simulator and kernel integrity monitor.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("assemble", help="assemble a source file into an image")
    a.add_argument("src")
    a.add_argument("-o", "--output", required=True)
    a.add_argument("-D", "--define", type=_define, action="append", default=[], metavar="NAME=VALUE",
                   help="override an .equ constant")
    a.set_defaults(fn=cmd_assemble)

    s = sub.add_parser("scan", help="compute the probe plan for an image")
    s.add_argument("image")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--config", help="also write the pre-boot configuration JSON here")
    s.set_defaults(fn=cmd_scan)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario")
    r.add_argument("--report", help="write the JSON report here")
    r.add_argument("--trace", help="write the trap log here, one JSON object per line")
    r.add_argument("--no-probes", action="store_true", help="run without the monitor")
    r.add_argument("--halt-on-alert", action="store_true")
    r.set_defaults(fn=cmd_run)

    u = sub.add_parser("suite", help="run every scenario in a directory; exit status counts mismatches")
    u.add_argument("dir", nargs="?", help="defaults to the bundled scenarios")
    u.set_defaults(fn=cmd_suite)

    d = sub.add_parser("diff-transparency", help="compare a run with and without probes")
    d.add_argument("scenario")
    d.set_defaults(fn=cmd_diff_transparency)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
