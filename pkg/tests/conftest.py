from __future__ import annotations

import sys
from pathlib import Path

import pytest

import tzmon
from tzmon.asm import assemble, assemble_file
from tzmon.machine import Machine
from tzmon.monitor import PreBootConfig, preboot_configure
from tzmon.scanner import scan

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(tzmon.__file__).parent / "data"
PROGRAMS = DATA / "programs"
SCENARIOS = DATA / "scenarios"


def boot(image, **knobs):
    """Machine with ``image`` loaded and the monitor configured from a scan of it."""
    m = Machine()
    image.load(m.mem)
    m.reset(image.entry)
    cfg = PreBootConfig.from_image(image, scan(image))
    return m, preboot_configure(m, cfg, **knobs)


def flat(text: str, base: int = 0xC0008000):
    """Machine running a bare snippet with the MMU off."""
    image = assemble(f".section text, {base:#x}\n{text}\n")
    m = Machine()
    image.load(m.mem)
    m.reset(image.entry or base)
    return m, image


@pytest.fixture(scope="session")
def reference_image():
    return assemble_file(PROGRAMS / "reference.s")
