import struct
import warnings

import numpy as np
import pytest

from tzmon.image import Image, Section
from tzmon.isa import FORMS, PROTECTED_SYSREGS, Instruction, SysReg, encode
from tzmon.machine import VBASE_HIGH, Machine
from tzmon.memory import World
from tzmon.scanner import PlacementPlan, PlanEntry, ScanError, scan
from tzmon.sprobe import ProbeType
from tzmon.sysregs import CpuMode, RegisterFile, SysRegs, make_psr

TEXT = 0xC0008000
TARGET = {SysReg.SCTLR: ProbeType.SCTLR_WRITE, SysReg.TTBR0: ProbeType.TTBR_WRITE,
          SysReg.TTBR1: ProbeType.TTBR_WRITE, SysReg.TTBCR: ProbeType.TTBCR_WRITE}


def test_reference_kernel_counts(reference_image):
    plan = scan(reference_image)
    assert plan.count_tuple() == (6, 4, 1, 1)
    assert len(plan) == 12


def test_fault_probe_is_first_handler_instruction(reference_image):
    plan = scan(reference_image)
    (fault,) = [e for e in plan.entries if e.probe_type is ProbeType.FAULT_HANDLER]
    assert fault.va == reference_image.symbol("abort_handler")


def test_scan_is_deterministic(reference_image):
    assert scan(reference_image).to_text() == scan(reference_image).to_text()


def test_plan_text_round_trip(reference_image, tmp_path):
    plan = scan(reference_image)
    plan.save(tmp_path / "plan.txt")
    assert PlacementPlan.read(tmp_path / "plan.txt") == plan
    assert plan.to_text().splitlines()[-1] == "# total=12 #1=6 #2=4 #3=1 #4=1"


@pytest.mark.parametrize("text, msg", [
    ("0xc0008000 FAULT_HANDLER\n0xc0008000 SCTLR_WRITE\n", "duplicate"),
    ("0xc0008002 FAULT_HANDLER\n", "aligned"),
    ("0xc0008000 SCTLR_WRITE\n", "exactly one"),
    ("zzz\n", "cannot parse"),
])
def test_plan_check(text, msg):
    with pytest.raises(ScanError, match=msg):
        PlacementPlan.from_text(text)


def image_with(text_words: list[int], handler: int = VBASE_HIGH + 0x20) -> Image:
    """Vectors page (slots plus a one-word abort handler) and a text section of ``text_words``."""
    vectors = [encode(Instruction("B", imm=0))] * 8 + [encode(Instruction("NOP"))]
    vectors[4] = encode(Instruction("B", imm=(handler - VBASE_HIGH - 0x10) // 4))
    pack = lambda ws: bytearray(struct.pack(f"<{len(ws)}I", *ws))
    return Image(TEXT, [Section("text", VBASE_HIGH, 0xC0000000, pack(vectors)),
                        Section("text", TEXT, TEXT, pack(text_words))], {})


def test_no_sysreg_writes_warns():
    with pytest.warns(UserWarning, match="no system-register writes"):
        plan = scan(image_with([encode(Instruction("NOP"))] * 4))
    assert plan.count_tuple() == (0, 0, 0, 1)


@pytest.mark.filterwarnings("ignore:no system-register writes")
def test_vector_slot_must_branch():
    image = image_with([0] * 4)
    image.sections[0].data[0x10:0x14] = struct.pack("<I", 0)
    with pytest.raises(ScanError, match="not a branch"):
        scan(image)


@pytest.mark.filterwarnings("ignore:no system-register writes")
def test_handler_outside_text():
    image = image_with([0] * 4, handler=VBASE_HIGH + 0x100)
    with pytest.raises(ScanError, match="outside"):
        scan(image)


# -- oracle: execute each word on its own and see which protected register it changes ----------

class SingleStep:
    """Runs one instruction from a fixed state and reports the protected register it wrote."""

    SENTINEL = SysRegs(0x11110000, 0x22220000, 0x33330000, 0x44440000, 0, 0, 0, 0)

    def __init__(self):
        self.m = Machine()

    def target(self, word: int) -> ProbeType | None:
        m = self.m
        m.reset(TEXT)
        m.regs = RegisterFile(r=[0xA0000000 | i for i in range(15)], pc=TEXT, psr=make_psr(CpuMode.SUPERVISOR))
        m.sysregs = self.SENTINEL.copy()
        m.mem.write_word(TEXT, word, World.SECURE)
        m.exc_pending = False
        m.step()
        changed = [r for r in PROTECTED_SYSREGS if m.sysregs.get(r) != self.SENTINEL.get(r)]
        assert len(changed) <= 1
        return TARGET[changed[0]] if changed else None


def random_text(rng: np.random.Generator, n: int) -> list[int]:
    forms = sorted(FORMS)
    out = []
    for _ in range(n):
        u = rng.random()
        if u < 0.15:
            out.append(encode(Instruction("MSR", sysreg=int(rng.integers(0, 8)), rs=int(rng.integers(0, 15)))))
        elif u < 0.25:
            out.append(int(rng.integers(0, 1 << 32, dtype=np.uint64)))
        else:
            m = forms[int(rng.integers(0, len(forms)))]
            out.append(int(rng.integers(0, 1 << 27)) | FORMS[m].opcode << 27)
    return out


def test_scanner_matches_single_step_oracle():
    oracle = SingleStep()
    rng = np.random.default_rng(3)
    total = 0
    for _ in range(40):
        words = random_text(rng, 64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            plan = scan(image_with(words))
        expected = []
        for i, w in enumerate(words):
            t = oracle.target(w)
            if t is not None:
                expected.append(PlanEntry(TEXT + 4 * i, t))
        expected.append(PlanEntry(VBASE_HIGH + 0x20, ProbeType.FAULT_HANDLER))
        assert plan.entries == tuple(sorted(expected))
        total += len(expected)
    assert total > 200
