import numpy as np
import pytest

from xbarsim.errors import ParseError, ValidationError
from xbarsim.isa import (ALU_OPS, MASK_MTVM, MASK_MVM, MASK_OPA, MAX_MCUS,
                         Instruction, Program, assemble, decode,
                         decode_program, disassemble, encode, encode_program,
                         link_check, mcu_region_base)


def test_mask_bit_values():
    assert MASK_MVM == 4 and MASK_MTVM == 2 and MASK_OPA == 1


def test_spec_mask_example():
    p = assemble("mcu m0=110 m1=011\nhalt\n")
    ins = p.instructions[0]
    assert ins.op == "mcu"
    assert ins.masks[0] == MASK_MVM | MASK_MTVM
    assert ins.masks[1] == MASK_MTVM | MASK_OPA
    assert all(m == 0 for m in ins.masks[2:])


def test_assemble_each_opcode():
    text = """\
# full opcode tour
start:
mcu m0=111
alu add r0,r16,r32,16
alu loss_grad r0,r16,r32,10
load r4,@1024,48
store @2048,r4,48
set r1,-42
copy r160,r0,128
send t3,b7,r8,16
recv t2,b1,r8,16
beq r1,r2,done
jmp start
done:
halt
"""
    p = assemble(text)
    assert [i.op for i in p.instructions] == [
        "mcu", "alu", "alu", "load", "store", "set", "copy",
        "send", "recv", "beq", "jmp", "halt"]
    assert p.instructions[5].imm == -42
    assert p.instructions[9].target == 11  # done:
    assert p.instructions[10].target == 0  # start:


def test_text_roundtrip():
    text = "mcu m0=110 m1=011\nalu relu r0,r0,r0,32\nset r5,77\nhalt\n"
    p = assemble(text)
    assert disassemble(p) == text
    assert assemble(disassemble(p)) == p


def _random_instruction(rng):
    op = rng.choice(["mcu", "alu", "load", "store", "set", "copy",
                     "send", "recv", "jmp", "beq", "crs"])
    r = lambda hi: int(rng.integers(0, hi))
    if op == "mcu":
        return Instruction("mcu", masks=tuple(int(rng.integers(0, 8))
                                              for _ in range(MAX_MCUS)))
    if op == "alu":
        return Instruction("alu", subop=str(rng.choice(ALU_OPS)), dst=r(160),
                           src1=r(160), src2=r(160), len=1 + r(128))
    if op == "load":
        return Instruction("load", dst=r(3232), addr=r(1 << 18), len=1 + r(128))
    if op == "store":
        return Instruction("store", addr=r(1 << 18), src=r(3232), len=1 + r(128))
    if op == "set":
        return Instruction("set", dst=r(3232), imm=int(rng.integers(-32768, 32768)))
    if op == "copy":
        return Instruction("copy", dst=r(3232), src=r(3232), len=1 + r(128))
    if op == "send":
        return Instruction("send", tile=r(1024), buf=r(1024), src=r(3232), len=1 + r(128))
    if op == "recv":
        return Instruction("recv", tile=r(1024), buf=r(1024), dst=r(3232), len=1 + r(128))
    if op == "jmp":
        return Instruction("jmp", target=r(20))
    if op == "beq":
        return Instruction("beq", a=r(160), b=r(160), target=r(20))
    return Instruction("crs")


def test_binary_roundtrip_random_programs():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        ins = _random_instruction(rng)
        assert decode(encode(ins)) == ins
    for _ in range(50):
        prog = Program([_random_instruction(rng) for _ in range(40)]
                       + [Instruction("halt")])
        blob = encode_program(prog)
        assert len(blob) == 8 * len(prog)
        assert decode_program(blob) == prog


def test_text_roundtrip_random_programs():
    rng = np.random.default_rng(19)
    for _ in range(100):
        prog = Program([_random_instruction(rng) for _ in range(20)]
                       + [Instruction("halt")])
        assert assemble(disassemble(prog)) == prog


def test_missing_halt_rejected():
    with pytest.raises(ValidationError):
        Program([]).validate()
    with pytest.raises(ValidationError):
        Program([Instruction("crs")]).validate()


def test_absent_mcu_mask_rejected():
    p = Program([Instruction("mcu", masks=(0, 0, 7, 0, 0, 0)),
                 Instruction("halt")])
    with pytest.raises(ValidationError):
        p.validate(mcus_per_core=2)
    p.validate(mcus_per_core=3)


def test_branch_past_end_rejected():
    p = Program([Instruction("jmp", target=9), Instruction("halt")])
    with pytest.raises(ValidationError):
        p.validate()


def test_parse_errors_carry_position():
    with pytest.raises(ParseError) as e:
        assemble("halt extra\n")
    assert e.value.line == 1
    with pytest.raises(ParseError) as e:
        assemble("halt\nfrobnicate r1\n")
    assert e.value.line == 2 and e.value.col == 1
    with pytest.raises(ParseError) as e:
        assemble("  alu add r1,r2\nhalt\n")
    assert e.value.line == 1 and e.value.col == 7
    with pytest.raises(ParseError) as e:
        assemble("jmp nowhere\nhalt\n")
    assert "nowhere" in str(e.value)
    with pytest.raises(ParseError):
        assemble("mcu m9=111\nhalt\n")
    with pytest.raises(ParseError):
        assemble("alu add r1,r2,r3,0\nhalt\n")  # zero length
    with pytest.raises(ParseError):
        assemble("set r1,70000\nhalt\n")  # immediate too wide


def test_duplicate_label_rejected():
    with pytest.raises(ParseError):
        assemble("a:\na:\nhalt\n")


def test_comments_and_blank_lines_ignored():
    p = assemble("\n# nothing\n   \nhalt  # trailing\n")
    assert len(p) == 1


def test_region_addressing():
    assert mcu_region_base(0, "row_in") == 160
    assert mcu_region_base(0, "row_out") == 160 + 3 * 128
    assert mcu_region_base(1, "row_in") == 160 + 512
    with pytest.raises(ValueError):
        mcu_region_base(0, "bogus")


def test_link_check():
    a = Program([Instruction("send", tile=1, buf=0, src=0, len=8),
                 Instruction("halt")])
    b = Program([Instruction("recv", tile=0, buf=0, dst=0, len=8),
                 Instruction("halt")])
    tile_of = {"c0": 0, "c1": 1}
    assert link_check({"c0": a, "c1": b}, tile_of)
    bad = Program([Instruction("recv", tile=0, buf=1, dst=0, len=8),
                   Instruction("halt")])
    with pytest.raises(ValidationError):
        link_check({"c0": a, "c1": bad}, tile_of)
