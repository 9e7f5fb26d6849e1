"""Instruction set, 64-bit binary encoding, assembler and disassembler.

One instruction per line, '#' starts a comment, 'name:' on its own line is a
jump label. The textual forms:

    mcu m0=110 m1=011        masks are MVM/MTVM/OPA bits, omitted means 000
    alu add r4,r8,r12,16     subop dst,src1,src2,len
    load r4,@1024,16         shared memory -> registers
    store @1024,r4,16        registers -> shared memory
    set r4,-3                immediate write
    copy r4,r160,128         register block move
    send t3,b7,r4,16         to tile 3, buffer 7
    recv t3,b7,r4,16         from tile 3, buffer 7
    jmp done                 label or absolute instruction index
    beq r1,r2,done
    crs                      resolve carries on every resident matrix
    halt                     commit pending updates and stop

Registers live in one flat address space: r0..r159 are the general file, and
each MCU maps four 128-entry windows behind it (row_in, col_in, col_out,
row_out, in that order). ALU operands must stay in the general file; load,
store and copy may address the windows.

The fixed 64-bit word puts the opcode in bits [63:60]; field layouts per
opcode are in _encode_fields/_decode_fields. The mcu instruction takes no
source or destination operands: they are implied by each MCU's register
windows.
"""

import re
import struct

from .errors import ParseError, ValidationError

GENERAL_REGS = 160
MCU_REGION_NAMES = ("row_in", "col_in", "col_out", "row_out")
MCU_REGION_SIZE = 128
MCU_WINDOW = MCU_REGION_SIZE * len(MCU_REGION_NAMES)
MAX_MCUS = 6
REG_SPACE = GENERAL_REGS + MAX_MCUS * MCU_WINDOW

MASK_MVM = 0b100
MASK_MTVM = 0b010
MASK_OPA = 0b001

OPCODES = ("mcu", "alu", "load", "store", "set", "copy",
           "send", "recv", "jmp", "beq", "crs", "halt")
ALU_OPS = ("add", "sub", "mul", "relu", "relu_grad",
           "sigmoid", "sigmoid_grad", "loss_grad")

OP_FIELDS = {
    "mcu": ("masks",),
    "alu": ("subop", "dst", "src1", "src2", "len"),
    "load": ("dst", "addr", "len"),
    "store": ("addr", "src", "len"),
    "set": ("dst", "imm"),
    "copy": ("dst", "src", "len"),
    "send": ("tile", "buf", "src", "len"),
    "recv": ("tile", "buf", "dst", "len"),
    "jmp": ("target",),
    "beq": ("a", "b", "target"),
    "crs": (),
    "halt": (),
}


def mcu_region_base(mcu_index, region):
    """Flat register address of an MCU window region."""
    return (GENERAL_REGS + mcu_index * MCU_WINDOW
            + MCU_REGION_NAMES.index(region) * MCU_REGION_SIZE)


class Instruction:
    __slots__ = ("op", "fields")

    def __init__(self, op, **fields):
        if op not in OPCODES:
            raise ValidationError("unknown opcode %r" % op)
        expected = OP_FIELDS[op]
        if set(fields) != set(expected):
            raise ValidationError("%s takes fields %s, got %s"
                                  % (op, expected, tuple(sorted(fields))))
        if op == "mcu":
            masks = tuple(int(v) for v in fields["masks"])
            if len(masks) != MAX_MCUS or any(not 0 <= v <= 7 for v in masks):
                raise ValidationError("mcu needs %d masks in 0..7" % MAX_MCUS)
            fields = {"masks": masks}
        if op == "alu" and fields["subop"] not in ALU_OPS:
            raise ValidationError("unknown alu subop %r" % fields["subop"])
        self.op = op
        self.fields = {k: fields[k] for k in expected}
        self._check_ranges()

    def _check_ranges(self):
        f = self.fields
        for key in ("dst", "src", "src1", "src2", "a", "b"):
            if key in f and not 0 <= int(f[key]) < REG_SPACE:
                raise ValidationError("register %d out of range" % f[key])
        if "len" in f and not 1 <= int(f["len"]) <= 255:
            raise ValidationError("length must be 1..255")
        if "addr" in f and not 0 <= int(f["addr"]) < (1 << 18):
            raise ValidationError("address out of 18-bit range")
        if "imm" in f and not -(1 << 15) <= int(f["imm"]) < (1 << 15):
            raise ValidationError("immediate out of 16-bit range")
        if "tile" in f and not 0 <= int(f["tile"]) < (1 << 10):
            raise ValidationError("tile id out of range")
        if "buf" in f and not 0 <= int(f["buf"]) < (1 << 10):
            raise ValidationError("buffer id out of range")
        if "target" in f and not 0 <= int(f["target"]) < (1 << 24):
            raise ValidationError("branch target out of range")

    def __getattr__(self, name):
        try:
            return self.fields[name]
        except KeyError:
            raise AttributeError(name)

    def __eq__(self, other):
        return (isinstance(other, Instruction)
                and self.op == other.op and self.fields == other.fields)

    def __hash__(self):
        return hash((self.op, tuple(sorted(self.fields.items()))))

    def __repr__(self):
        return "Instruction(%s)" % format_instruction(self)


class Program:
    """One core's instruction list plus compile-time metadata.

    meta is a sideband dict (schedule levels, layer tags); it never survives
    binary encoding and does not participate in equality.
    """

    def __init__(self, instructions, meta=None):
        self.instructions = list(instructions)
        self.meta = meta or {}

    def validate(self, mcus_per_core=2):
        if not self.instructions or self.instructions[-1].op != "halt":
            raise ValidationError("program must end in halt")
        for i, ins in enumerate(self.instructions):
            if ins.op == "mcu":
                for m in range(mcus_per_core, MAX_MCUS):
                    if ins.masks[m]:
                        raise ValidationError(
                            "instruction %d sets mask for absent mcu %d" % (i, m))
            for key in ("target",):
                if key in ins.fields and ins.fields[key] >= len(self.instructions):
                    raise ValidationError(
                        "instruction %d branches past program end" % i)
        return self

    def __eq__(self, other):
        return (isinstance(other, Program)
                and self.instructions == other.instructions)

    def __len__(self):
        return len(self.instructions)


# ------------------------------------------------------------ binary encoding

_OPNUM = {name: i + 1 for i, name in enumerate(OPCODES)}
_NUMOP = {v: k for k, v in _OPNUM.items()}


def encode(ins):
    """Pack one instruction into its 64-bit word."""
    word = _OPNUM[ins.op] << 60
    f = ins.fields
    if ins.op == "mcu":
        for i, m in enumerate(f["masks"]):
            word |= m << (3 * i)
    elif ins.op == "alu":
        word |= ALU_OPS.index(f["subop"]) << 56
        word |= f["dst"] << 44 | f["src1"] << 32 | f["src2"] << 20
        word |= f["len"] << 12
    elif ins.op == "load":
        word |= f["dst"] << 44 | f["addr"] << 26 | f["len"] << 18
    elif ins.op == "store":
        word |= f["src"] << 44 | f["addr"] << 26 | f["len"] << 18
    elif ins.op == "set":
        word |= f["dst"] << 44 | (f["imm"] & 0xFFFF) << 28
    elif ins.op == "copy":
        word |= f["dst"] << 44 | f["src"] << 32 | f["len"] << 24
    elif ins.op in ("send", "recv"):
        reg = f["src"] if ins.op == "send" else f["dst"]
        word |= f["tile"] << 46 | f["buf"] << 36 | reg << 24 | f["len"] << 16
    elif ins.op == "jmp":
        word |= f["target"] << 32
    elif ins.op == "beq":
        word |= f["a"] << 44 | f["b"] << 32 | f["target"] << 8
    return word


def decode(word):
    """Unpack a 64-bit word back into an Instruction."""
    opnum = (word >> 60) & 0xF
    op = _NUMOP.get(opnum)
    if op is None:
        raise ValidationError("bad opcode %d in word 0x%016x" % (opnum, word))
    bits = lambda lo, n: (word >> lo) & ((1 << n) - 1)
    if op == "mcu":
        return Instruction("mcu", masks=tuple(bits(3 * i, 3) for i in range(MAX_MCUS)))
    if op == "alu":
        return Instruction("alu", subop=ALU_OPS[bits(56, 4)], dst=bits(44, 12),
                           src1=bits(32, 12), src2=bits(20, 12), len=bits(12, 8))
    if op == "load":
        return Instruction("load", dst=bits(44, 12), addr=bits(26, 18), len=bits(18, 8))
    if op == "store":
        return Instruction("store", src=bits(44, 12), addr=bits(26, 18), len=bits(18, 8))
    if op == "set":
        imm = bits(28, 16)
        if imm >= 1 << 15:
            imm -= 1 << 16
        return Instruction("set", dst=bits(44, 12), imm=imm)
    if op == "copy":
        return Instruction("copy", dst=bits(44, 12), src=bits(32, 12), len=bits(24, 8))
    if op == "send":
        return Instruction("send", tile=bits(46, 10), buf=bits(36, 10),
                           src=bits(24, 12), len=bits(16, 8))
    if op == "recv":
        return Instruction("recv", tile=bits(46, 10), buf=bits(36, 10),
                           dst=bits(24, 12), len=bits(16, 8))
    if op == "jmp":
        return Instruction("jmp", target=bits(32, 24))
    if op == "beq":
        return Instruction("beq", a=bits(44, 12), b=bits(32, 12), target=bits(8, 24))
    return Instruction(op)


def encode_program(program):
    return struct.pack("<%dQ" % len(program.instructions),
                       *(encode(i) for i in program.instructions))


def decode_program(blob):
    if len(blob) % 8:
        raise ValidationError("binary program length not a multiple of 8")
    words = struct.unpack("<%dQ" % (len(blob) // 8), blob)
    return Program([decode(w) for w in words])


# ------------------------------------------------------------------ assembler

_LABEL_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*):$")
_MASK_RE = re.compile(r"^m([0-9])=([01]{3})$")


def _parse_reg(tok, line, col):
    if not re.fullmatch(r"r\d+", tok):
        raise ParseError("expected register, got %r" % tok, line, col)
    return int(tok[1:])


def _parse_int(tok, line, col, what="integer"):
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError("expected %s, got %r" % (what, tok), line, col)


def assemble(text):
    """Two passes: collect labels, then parse instructions."""
    lines = text.splitlines()
    labels = {}
    slots = []  # (line_no, body, col of body start)
    for ln, raw in enumerate(lines, 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        m = _LABEL_RE.match(body)
        if m:
            if m.group(1) in labels:
                raise ParseError("duplicate label %r" % m.group(1),
                                 ln, raw.index(body) + 1)
            labels[m.group(1)] = len(slots)
            continue
        slots.append((ln, body, raw.index(body) + 1))

    out = []
    for ln, body, col0 in slots:
        out.append(_parse_instruction(body, ln, col0, labels))
    program = Program(out)
    program.validate(mcus_per_core=MAX_MCUS)  # structural checks only here
    return program


def _parse_instruction(body, line, col0, labels):
    parts = body.split(None, 1)
    op = parts[0].lower()
    rest = parts[1] if len(parts) > 1 else ""
    rest_col = col0 + body.find(parts[1]) if len(parts) > 1 else col0 + len(body)

    def args(n, what):
        toks = [t.strip() for t in rest.split(",")]
        if len(toks) != n or any(not t for t in toks):
            raise ParseError("%s expects %s" % (op, what), line, rest_col)
        return toks

    try:
        if op == "mcu":
            masks = [0] * MAX_MCUS
            for tok in rest.split():
                m = _MASK_RE.match(tok)
                if not m:
                    raise ParseError("bad mask token %r" % tok, line, rest_col)
                idx = int(m.group(1))
                if idx >= MAX_MCUS:
                    raise ParseError("mcu index %d out of range" % idx, line, rest_col)
                masks[idx] = int(m.group(2), 2)
            return Instruction("mcu", masks=tuple(masks))
        if op == "alu":
            sub_rest = rest.split(None, 1)
            if len(sub_rest) != 2:
                raise ParseError("alu expects subop and operands", line, rest_col)
            subop = sub_rest[0].lower()
            if subop not in ALU_OPS:
                raise ParseError("unknown alu subop %r" % subop, line, rest_col)
            toks = [t.strip() for t in sub_rest[1].split(",")]
            if len(toks) != 4:
                raise ParseError("alu expects dst,src1,src2,len", line, rest_col)
            return Instruction("alu", subop=subop,
                               dst=_parse_reg(toks[0], line, rest_col),
                               src1=_parse_reg(toks[1], line, rest_col),
                               src2=_parse_reg(toks[2], line, rest_col),
                               len=_parse_int(toks[3], line, rest_col, "length"))
        if op == "load":
            toks = args(3, "rD,@addr,len")
            if not toks[1].startswith("@"):
                raise ParseError("expected @address", line, rest_col)
            return Instruction("load", dst=_parse_reg(toks[0], line, rest_col),
                               addr=_parse_int(toks[1][1:], line, rest_col, "address"),
                               len=_parse_int(toks[2], line, rest_col, "length"))
        if op == "store":
            toks = args(3, "@addr,rS,len")
            if not toks[0].startswith("@"):
                raise ParseError("expected @address", line, rest_col)
            return Instruction("store",
                               addr=_parse_int(toks[0][1:], line, rest_col, "address"),
                               src=_parse_reg(toks[1], line, rest_col),
                               len=_parse_int(toks[2], line, rest_col, "length"))
        if op == "set":
            toks = args(2, "rD,imm")
            return Instruction("set", dst=_parse_reg(toks[0], line, rest_col),
                               imm=_parse_int(toks[1], line, rest_col, "immediate"))
        if op == "copy":
            toks = args(3, "rD,rS,len")
            return Instruction("copy", dst=_parse_reg(toks[0], line, rest_col),
                               src=_parse_reg(toks[1], line, rest_col),
                               len=_parse_int(toks[2], line, rest_col, "length"))
        if op in ("send", "recv"):
            toks = args(4, "t<id>,b<id>,r<reg>,len")
            if not toks[0].startswith("t") or not toks[1].startswith("b"):
                raise ParseError("expected t<id>,b<id>", line, rest_col)
            tile = _parse_int(toks[0][1:], line, rest_col, "tile id")
            buf = _parse_int(toks[1][1:], line, rest_col, "buffer id")
            reg = _parse_reg(toks[2], line, rest_col)
            length = _parse_int(toks[3], line, rest_col, "length")
            if op == "send":
                return Instruction("send", tile=tile, buf=buf, src=reg, len=length)
            return Instruction("recv", tile=tile, buf=buf, dst=reg, len=length)
        if op == "jmp":
            toks = args(1, "label or index")
            return Instruction("jmp", target=_resolve(toks[0], labels, line, rest_col))
        if op == "beq":
            toks = args(3, "rA,rB,label")
            return Instruction("beq", a=_parse_reg(toks[0], line, rest_col),
                               b=_parse_reg(toks[1], line, rest_col),
                               target=_resolve(toks[2], labels, line, rest_col))
        if op in ("crs", "halt"):
            if rest:
                raise ParseError("%s takes no operands" % op, line, rest_col)
            return Instruction(op)
    except ValidationError as exc:
        raise ParseError(str(exc), line, col0)
    raise ParseError("unknown opcode %r" % op, line, col0)


def _resolve(tok, labels, line, col):
    if tok in labels:
        return labels[tok]
    if re.fullmatch(r"\d+", tok):
        return int(tok)
    raise ParseError("unknown label %r" % tok, line, col)


# --------------------------------------------------------------- disassembler

def format_instruction(ins):
    f = ins.fields
    if ins.op == "mcu":
        toks = ["m%d=%s" % (i, format(m, "03b")) for i, m in enumerate(f["masks"]) if m]
        return "mcu" + (" " + " ".join(toks) if toks else "")
    if ins.op == "alu":
        return "alu %s r%d,r%d,r%d,%d" % (f["subop"], f["dst"], f["src1"],
                                          f["src2"], f["len"])
    if ins.op == "load":
        return "load r%d,@%d,%d" % (f["dst"], f["addr"], f["len"])
    if ins.op == "store":
        return "store @%d,r%d,%d" % (f["addr"], f["src"], f["len"])
    if ins.op == "set":
        return "set r%d,%d" % (f["dst"], f["imm"])
    if ins.op == "copy":
        return "copy r%d,r%d,%d" % (f["dst"], f["src"], f["len"])
    if ins.op == "send":
        return "send t%d,b%d,r%d,%d" % (f["tile"], f["buf"], f["src"], f["len"])
    if ins.op == "recv":
        return "recv t%d,b%d,r%d,%d" % (f["tile"], f["buf"], f["dst"], f["len"])
    if ins.op == "jmp":
        return "jmp %d" % f["target"]
    if ins.op == "beq":
        return "beq r%d,r%d,%d" % (f["a"], f["b"], f["target"])
    return ins.op


def disassemble(program):
    return "\n".join(format_instruction(i) for i in program.instructions) + "\n"


def link_check(programs_by_core, tile_of_core):
    """Static send/recv matching across a set of per-core programs.

    Each send names a destination tile and buffer; some core on that tile
    must recv the same buffer from the sender's tile, with equal lengths and
    equal counts.
    """
    sends = {}
    recvs = {}
    for core, prog in programs_by_core.items():
        my_tile = tile_of_core[core]
        for ins in prog.instructions:
            if ins.op == "send":
                key = (my_tile, ins.tile, ins.buf)
                sends.setdefault(key, []).append(ins.len)
            elif ins.op == "recv":
                key = (ins.tile, my_tile, ins.buf)
                recvs.setdefault(key, []).append(ins.len)
    if sends != recvs:
        missing = set(sends) ^ set(recvs)
        raise ValidationError("unmatched send/recv on links %s"
                              % sorted(missing) if missing else
                              "send/recv length or count mismatch")
    return True
