import pytest
from hypothesis import given, strategies as st

from tzmon.asm import assemble
from tzmon.isa import (
    FORMS, NOP_WORD, NUM_GPRS, OPCODE_SHIFT, SMC0, EncodingError, Instruction, SysReg, Undefined,
    decode, encode, format_instruction, is_smc,
)

words = st.integers(0, 0xFFFFFFFF)


def test_nop_is_all_zero():
    assert NOP_WORD == 0
    assert decode(0) == Instruction("NOP")


def test_probe_word():
    assert SMC0 == 30 << 27
    assert decode(SMC0) == Instruction("SMC", imm=0)
    assert is_smc(SMC0) and not is_smc(NOP_WORD)


def test_register_count():
    assert NUM_GPRS == 15
    # register field value 15 is reserved
    assert isinstance(decode(1 << 27 | 15 << 23), Undefined)


def test_sysreg_numbering():
    assert [r.name for r in SysReg] == ["SCTLR", "TTBR0", "TTBR1", "TTBCR", "DFAR", "DFSR", "ELR", "SPSR"]


@pytest.mark.parametrize("opcode", range(32))
@pytest.mark.parametrize("shift", [0, 11], ids=["low", "high"])
def test_exhaustive_sweep(opcode, shift):
    """Every word with this opcode and 16 varying operand bits decodes totally and round-trips."""
    defined = 0
    for x in range(1 << 16):
        w = opcode << OPCODE_SHIFT | x << shift
        d = decode(w)
        if isinstance(d, Undefined):
            assert d.word == w
            continue
        defined += 1
        assert encode(d) == w
    known = any(f.opcode == opcode for f in FORMS.values())
    assert (defined > 0) == known


@given(words)
def test_decode_total_and_roundtrip(w):
    d = decode(w)
    if not isinstance(d, Undefined):
        assert encode(d) == w


def instructions():
    reg = st.integers(0, NUM_GPRS - 1)
    sysreg = st.integers(0, len(SysReg) - 1)
    simm16 = st.integers(-(1 << 15), (1 << 15) - 1)
    uimm16 = st.integers(0, 0xFFFF)
    off23 = st.integers(-(1 << 22), (1 << 22) - 1)
    none = st.just({})
    by_kind = {
        "NOP": none, "ERET": none, "HALT": none,
        "MOVI": st.fixed_dictionaries({"rd": reg, "imm": simm16}),
        "MOVT": st.fixed_dictionaries({"rd": reg, "imm": uimm16}),
        "MOV": st.fixed_dictionaries({"rd": reg, "rs": reg}),
        "CMP": st.fixed_dictionaries({"rd": reg, "rs": reg}),
        "BR": st.fixed_dictionaries({"rd": reg}),
        "LDR": st.fixed_dictionaries({"rd": reg, "rs": reg, "imm": simm16}),
        "STR": st.fixed_dictionaries({"rd": reg, "rs": reg, "imm": simm16}),
        "MSR": st.fixed_dictionaries({"sysreg": sysreg, "rs": reg}),
        "MRS": st.fixed_dictionaries({"rd": reg, "sysreg": sysreg}),
        "SVC": st.fixed_dictionaries({"imm": uimm16}),
        "SMC": st.fixed_dictionaries({"imm": uimm16}),
    }
    for m in ("ADD", "SUB", "AND", "OR", "XOR"):
        by_kind[m] = st.fixed_dictionaries({"rd": reg, "rs": reg, "rt": reg})
    for m in ("B", "BL", "BEQ", "BNE"):
        by_kind[m] = st.fixed_dictionaries({"imm": off23})
    assert set(by_kind) == set(FORMS)
    return st.one_of(*(a.map(lambda kw, m=m: Instruction(m, **kw)) for m, a in sorted(by_kind.items())))


@given(instructions())
def test_encode_decode_roundtrip(ins):
    assert decode(encode(ins)) == ins


@given(instructions())
def test_text_roundtrip(ins):
    text = format_instruction(ins)
    image = assemble(f".section text, 0x1000\n{text}\n")
    assert image.sections[0].words() == [encode(ins)]


@pytest.mark.parametrize("bad", [
    Instruction("MOVI", rd=15),
    Instruction("MOVI", imm=1 << 15),
    Instruction("MOVT", imm=-1),
    Instruction("NOP", rd=1),
    Instruction("MSR", sysreg=8),
    Instruction("FOO"),
])
def test_encode_rejects(bad):
    with pytest.raises(EncodingError):
        encode(bad)


def test_branch_formats_absolute_with_address():
    ins = Instruction("B", imm=-2)
    assert format_instruction(ins) == "B #-2"
    assert format_instruction(ins, 0x1008) == "B 0x00001000"
