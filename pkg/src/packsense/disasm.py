"""Total linear-sweep x86 decoder over a fixed instruction subset.

decode_one never fails: a byte sequence that does not decode inside the
subset yields a RawByte unit of length 1, so a sweep always tiles its input
exactly. The subset covers the common unprivileged integer ISA in 32- and
64-bit modes (REX, 66/67/F0/F2/F3 and segment prefixes, ModRM/SIB incl.
RIP-relative and 16-bit addressing under 67), plus generic class decodes:
x87 escapes D8-DF as mnemonic "fpu" and the SSE/MMX rows of the 0F map as
mnemonic "simd" (correct lengths, xmm-class operand names; a few
gpr<->xmm mov forms surface their gpr as xmm class, which is fine for
tokenization). Privileged and IO instructions (hlt, cli/sti, in/out,
system 0F rows) are outside the subset and decode as RawByte.

Lengths follow the architecture: the 15-byte cap, d64 stack-op widths, and
Jz staying 4 bytes in 64-bit mode regardless of 66.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .binimage import BinaryImage, Mode

# ---------------------------------------------------------------------------
# unit / operand model


class UnitKind(enum.Enum):
    INSTRUCTION = "instruction"
    RAW_BYTE = "raw_byte"


class OperandKind(enum.Enum):
    REGISTER = "register"
    IMMEDIATE = "immediate"
    MEMORY = "memory"
    BRANCH = "branch"


@dataclass(frozen=True)
class MemExpr:
    base: str | None = None
    index: str | None = None
    scale: int = 1
    disp: int = 0
    disp_size: int = 0        # encoded displacement bytes; 0 = no disp field
    rip_relative: bool = False

    @property
    def absolute(self) -> bool:
        return self.base is None and self.index is None and not self.rip_relative


@dataclass(frozen=True)
class Operand:
    kind: OperandKind
    reg: str | None = None
    value: int | None = None   # immediate value, or branch rel/absolute target
    mem: MemExpr | None = None
    absolute: bool = False     # BRANCH only: value is an absolute address


@dataclass(frozen=True)
class DecodedUnit:
    offset: int                # offset within the swept buffer / file
    virtual_address: int
    length: int
    kind: UnitKind
    mnemonic: str
    prefixes: tuple[str, ...] = ()
    operands: tuple[Operand, ...] = ()
    raw: bytes = b""
    section: str | None = None


# ---------------------------------------------------------------------------
# register name tables

REG8_NOREX = ["al", "cl", "dl", "bl", "ah", "ch", "dh", "bh"]
REG8_REX = ["al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil",
            "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b"]
REG16 = ["ax", "cx", "dx", "bx", "sp", "bp", "si", "di",
         "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w"]
REG32 = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
         "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d"]
REG64 = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
         "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"]
SEGREGS = ["es", "cs", "ss", "ds", "fs", "gs"]
XMM = [f"xmm{i}" for i in range(16)]

SEG_PREFIX = {0x26: "es", 0x2E: "cs", 0x36: "ss",
              0x3E: "ds", 0x64: "fs", 0x65: "gs"}

# 16-bit addressing pairs for rm 0-7 (mod != 0 or rm != 6)
ADDR16 = [("bx", "si"), ("bx", "di"), ("bp", "si"), ("bp", "di"),
          ("si", None), ("di", None), ("bp", None), ("bx", None)]

CC = ["o", "no", "b", "ae", "e", "ne", "be", "a",
      "s", "ns", "p", "np", "l", "ge", "le", "g"]

GRP1 = ["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"]
GRP2 = ["rol", "ror", "rcl", "rcr", "shl", "shr", "shl", "sar"]
GRP3 = ["test", "test", "not", "neg", "mul", "imul", "div", "idiv"]
GRP8 = [None, None, None, None, "bt", "bts", "btr", "btc"]

# one-byte opcode map for the regular (non-special-cased) encodings.
# ops specifiers: Eb/Ev/Ew r/m; Gb/Gv/Gw reg; Sw segreg; M mem-only r/m;
# Ib/Iw/Iz immediates; Jb/Jz rel branches; Ap far ptr; Ob/Ov moffs;
# AL/CL/DX/eAX fixed registers; ONE literal 1.
_ARITH_ROWS = {0x00: "add", 0x08: "or", 0x10: "adc", 0x18: "sbb",
               0x20: "and", 0x28: "sub", 0x30: "xor", 0x38: "cmp"}

ONE_BYTE: dict[int, tuple[str, tuple[str, ...]]] = {}
for _base, _mn in _ARITH_ROWS.items():
    ONE_BYTE[_base + 0] = (_mn, ("Eb", "Gb"))
    ONE_BYTE[_base + 1] = (_mn, ("Ev", "Gv"))
    ONE_BYTE[_base + 2] = (_mn, ("Gb", "Eb"))
    ONE_BYTE[_base + 3] = (_mn, ("Gv", "Ev"))
    ONE_BYTE[_base + 4] = (_mn, ("AL", "Ib"))
    ONE_BYTE[_base + 5] = (_mn, ("eAX", "Iz"))

ONE_BYTE.update({
    0x62: ("bound", ("Gv", "M")),      # 32-bit only
    0x68: ("push", ("Iz",)),
    0x69: ("imul", ("Gv", "Ev", "Iz")),
    0x6A: ("push", ("Ib",)),
    0x6B: ("imul", ("Gv", "Ev", "Ib")),
    0x84: ("test", ("Eb", "Gb")),
    0x85: ("test", ("Ev", "Gv")),
    0x86: ("xchg", ("Eb", "Gb")),
    0x87: ("xchg", ("Ev", "Gv")),
    0x88: ("mov", ("Eb", "Gb")),
    0x89: ("mov", ("Ev", "Gv")),
    0x8A: ("mov", ("Gb", "Eb")),
    0x8B: ("mov", ("Gv", "Ev")),
    0x8C: ("mov", ("Ev", "Sw")),
    0x8D: ("lea", ("Gv", "M")),
    0x8E: ("mov", ("Sw", "Ew")),
    0x98: ("cwde", ()),
    0x99: ("cdq", ()),
    0x9A: ("call", ("Ap",)),           # 32-bit only
    0x9C: ("pushf", ()),
    0x9D: ("popf", ()),
    0x9E: ("sahf", ()),
    0x9F: ("lahf", ()),
    0xA0: ("mov", ("AL", "Ob")),
    0xA1: ("mov", ("eAX", "Ov")),
    0xA2: ("mov", ("Ob", "AL")),
    0xA3: ("mov", ("Ov", "eAX")),
    0xA8: ("test", ("AL", "Ib")),
    0xA9: ("test", ("eAX", "Iz")),
    0xC2: ("ret", ("Iw",)),
    0xC3: ("ret", ()),
    0xC4: ("les", ("Gv", "M")),        # 32-bit only
    0xC5: ("lds", ("Gv", "M")),        # 32-bit only
    0xC8: ("enter", ("Iw", "Ib")),
    0xC9: ("leave", ()),
    0xCA: ("retf", ("Iw",)),
    0xCB: ("retf", ()),
    0xCC: ("int3", ()),
    0xCD: ("int", ("Ib",)),
    0xCE: ("into", ()),                # 32-bit only
    0xCF: ("iret", ()),
    0xD4: ("aam", ("Ib",)),            # 32-bit only
    0xD5: ("aad", ("Ib",)),            # 32-bit only
    0xD7: ("xlat", ()),
    0xE0: ("loopne", ("Jb",)),
    0xE1: ("loope", ("Jb",)),
    0xE2: ("loop", ("Jb",)),
    0xE3: ("jecxz", ("Jb",)),
    0xE8: ("call", ("Jz",)),
    0xE9: ("jmp", ("Jz",)),
    0xEA: ("jmp", ("Ap",)),            # 32-bit only
    0xEB: ("jmp", ("Jb",)),
    0xF5: ("cmc", ()),
    0xF8: ("clc", ()),
    0xF9: ("stc", ()),
    0xFC: ("cld", ()),
    0xFD: ("std", ()),
})

# (mnemonic, ops) rows valid only outside 64-bit mode
ONLY32 = {0x06, 0x07, 0x0E, 0x16, 0x17, 0x1E, 0x1F, 0x27, 0x2F, 0x37, 0x3F,
          0x60, 0x61, 0x62, 0x82, 0x9A, 0xC4, 0xC5, 0xCE, 0xD4, 0xD5, 0xEA}

PUSH_POP_SEG = {0x06: ("push", "es"), 0x07: ("pop", "es"),
                0x0E: ("push", "cs"),
                0x16: ("push", "ss"), 0x17: ("pop", "ss"),
                0x1E: ("push", "ds"), 0x1F: ("pop", "ds")}

BCD_32 = {0x27: "daa", 0x2F: "das", 0x37: "aaa", 0x3F: "aas",
          0x60: "pusha", 0x61: "popa"}

STRING_OPS = {0xA4: "movs", 0xA5: "movs", 0xA6: "cmps", 0xA7: "cmps",
              0xAA: "stos", 0xAB: "stos", 0xAC: "lods", 0xAD: "lods",
              0xAE: "scas", 0xAF: "scas"}

# excluded from the subset in every mode (privileged / IO / traps)
EXCLUDED = {0x6C, 0x6D, 0x6E, 0x6F,            # ins/outs
            0xD6,                              # salc (undocumented)
            0xE4, 0xE5, 0xE6, 0xE7,            # in/out imm
            0xEC, 0xED, 0xEE, 0xEF,            # in/out dx
            0xF1,                              # int1/icebp
            0xF4,                              # hlt
            0xFA, 0xFB}                        # cli/sti

# 0F map rows decoded as generic "simd" with a ModRM byte
SIMD_MODRM = set(range(0x10, 0x18)) | set(range(0x28, 0x30)) | \
    set(range(0x50, 0x70)) | {0x74, 0x75, 0x76, 0x7C, 0x7D, 0x7E, 0x7F} | \
    {0xC3} | set(range(0xD0, 0xFF))
SIMD_MODRM_IMM8 = {0x70, 0x71, 0x72, 0x73, 0xC2, 0xC4, 0xC5, 0xC6}
SIMD_STORES = {0x11, 0x13, 0x17, 0x29, 0x2B, 0x7F, 0xD6, 0xE7}

TWO_BYTE: dict[int, tuple[str, tuple[str, ...]]] = {
    0x05: ("syscall", ()),             # 64-bit only
    0x0B: ("ud2", ()),
    0x31: ("rdtsc", ()),
    0x34: ("sysenter", ()),            # 32-bit only
    0x77: ("simd", ()),                # emms: no modrm
    0xA0: ("push", ()),                # fs, handled specially
    0xA1: ("pop", ()),
    0xA2: ("cpuid", ()),
    0xA3: ("bt", ("Ev", "Gv")),
    0xA4: ("shld", ("Ev", "Gv", "Ib")),
    0xA5: ("shld", ("Ev", "Gv", "CL")),
    0xA8: ("push", ()),                # gs
    0xA9: ("pop", ()),
    0xAB: ("bts", ("Ev", "Gv")),
    0xAC: ("shrd", ("Ev", "Gv", "Ib")),
    0xAD: ("shrd", ("Ev", "Gv", "CL")),
    0xAF: ("imul", ("Gv", "Ev")),
    0xB0: ("cmpxchg", ("Eb", "Gb")),
    0xB1: ("cmpxchg", ("Ev", "Gv")),
    0xB3: ("btr", ("Ev", "Gv")),
    0xB6: ("movzx", ("Gv", "Eb")),
    0xB7: ("movzx", ("Gv", "Ew")),
    0xB8: ("popcnt", ("Gv", "Ev")),
    0xBB: ("btc", ("Ev", "Gv")),
    0xBC: ("bsf", ("Gv", "Ev")),
    0xBD: ("bsr", ("Gv", "Ev")),
    0xBE: ("movsx", ("Gv", "Eb")),
    0xBF: ("movsx", ("Gv", "Ew")),
    0xC0: ("xadd", ("Eb", "Gb")),
    0xC1: ("xadd", ("Ev", "Gv")),
}

PREFIX_BYTES = {0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65, 0x66, 0x67,
                0xF0, 0xF2, 0xF3}


class _Undecodable(Exception):
    """Internal: current byte sequence is outside the subset."""


class _Cursor:
    """Bounds- and length-capped byte fetcher."""

    __slots__ = ("data", "start", "pos", "limit")

    def __init__(self, data: bytes, start: int):
        self.data = data
        self.start = start
        self.pos = start
        self.limit = min(len(data), start + 15)

    def u8(self) -> int:
        if self.pos >= self.limit:
            raise _Undecodable
        b = self.data[self.pos]
        self.pos += 1
        return b

    def peek(self) -> int:
        if self.pos >= self.limit:
            raise _Undecodable
        return self.data[self.pos]

    def bytes(self, n: int) -> bytes:
        if self.pos + n > self.limit:
            raise _Undecodable
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def sint(self, n: int) -> int:
        raw = self.bytes(n)
        return int.from_bytes(raw, "little", signed=True)

    def uint(self, n: int) -> int:
        raw = self.bytes(n)
        return int.from_bytes(raw, "little", signed=False)


def _reg_name(code: int, bits: int, rex: int) -> str:
    if bits == 8:
        return REG8_REX[code] if rex else REG8_NOREX[code & 7]
    if bits == 16:
        return REG16[code]
    if bits == 64:
        return REG64[code]
    return REG32[code]


class _Decoder:
    def __init__(self, data: bytes, offset: int, mode: Mode):
        self.cur = _Cursor(data, offset)
        self.mode = mode
        self.seg: str | None = None
        self.lock = False
        self.rep: str | None = None
        self.opsize = False
        self.addrsize = False
        self.rex = 0

    # --- width helpers -----------------------------------------------------

    def opbits(self) -> int:
        if self.mode is Mode.X86_64 and (self.rex & 0x8):
            return 64
        return 16 if self.opsize else 32

    def stackbits(self) -> int:
        # d64: push/pop default to 64-bit operands in long mode
        if self.mode is Mode.X86_64:
            return 16 if self.opsize else 64
        return 16 if self.opsize else 32

    def addrbits(self) -> int:
        if self.mode is Mode.X86_64:
            return 32 if self.addrsize else 64
        return 16 if self.addrsize else 32

    # --- modrm -------------------------------------------------------------

    def parse_modrm(self, rm_bits: int, mem_only: bool = False,
                    reg_only: bool = False):
        """Returns (rm_operand, reg_field_code)."""
        m = self.cur.u8()
        mod, reg, rm = m >> 6, (m >> 3) & 7, m & 7
        reg |= (self.rex >> 2 & 1) << 3
        if mod == 3:
            if mem_only:
                raise _Undecodable
            code = rm | ((self.rex & 1) << 3)
            op = Operand(OperandKind.REGISTER,
                         reg=_reg_name(code, rm_bits, self.rex))
            return op, reg
        if reg_only:
            raise _Undecodable

        abits = self.addrbits()
        if abits == 16:
            return self._mem16(mod, rm), reg
        rnames = REG64 if abits == 64 else REG32
        base = index = None
        scale = 1
        disp = 0
        dsize = 0
        rip = False
        if rm == 4:
            sib = self.cur.u8()
            ss, idx, bs = sib >> 6, (sib >> 3) & 7, sib & 7
            idx |= (self.rex >> 1 & 1) << 3
            if idx != 4:
                index = rnames[idx]
                scale = 1 << ss
            if bs == 5 and mod == 0:
                disp = self.cur.sint(4)
                dsize = 4
            else:
                base = rnames[bs | ((self.rex & 1) << 3)]
        elif rm == 5 and mod == 0:
            disp = self.cur.sint(4)
            dsize = 4
            if self.mode is Mode.X86_64:
                rip = True
        else:
            base = rnames[rm | ((self.rex & 1) << 3)]
        if mod == 1:
            disp = self.cur.sint(1)
            dsize = 1
        elif mod == 2:
            disp = self.cur.sint(4)
            dsize = 4
        if base is None and index is None and not rip:
            disp &= 0xFFFFFFFF  # absolute address, keep unsigned
        mem = MemExpr(base=base, index=index, scale=scale, disp=disp,
                      disp_size=dsize, rip_relative=rip)
        return Operand(OperandKind.MEMORY, mem=mem), reg

    def _mem16(self, mod: int, rm: int) -> Operand:
        base = index = None
        disp = 0
        dsize = 0
        if mod == 0 and rm == 6:
            disp = self.cur.uint(2)
            dsize = 2
        else:
            base, index = ADDR16[rm]
            if mod == 1:
                disp = self.cur.sint(1)
                dsize = 1
            elif mod == 2:
                disp = self.cur.sint(2)
                dsize = 2
        mem = MemExpr(base=base, index=index, scale=1, disp=disp,
                      disp_size=dsize)
        return Operand(OperandKind.MEMORY, mem=mem)

    # --- operand builders ----------------------------------------------------

    def build_operands(self, specs: tuple[str, ...], opc_bits: int | None = None):
        """Builds operand list; modrm parsed at most once, in spec order."""
        vbits = opc_bits if opc_bits is not None else self.opbits()
        ops: list[Operand | None] = [None] * len(specs)
        rm_op = None
        reg_field = None
        modrm_specs = {"Eb", "Ev", "Ew", "Gb", "Gv", "Gw", "Sw", "M",
                       "Vx", "Wx"}
        if any(s in modrm_specs for s in specs):
            rm_bits = 8 if "Eb" in specs else (16 if "Ew" in specs else vbits)
            mem_only = "M" in specs
            if "Wx" in specs:
                rm_op, reg_field = self.parse_modrm_xmm()
            else:
                rm_op, reg_field = self.parse_modrm(rm_bits, mem_only=mem_only)
        for i, s in enumerate(specs):
            if s in ("Eb", "Ev", "Ew", "M", "Wx"):
                ops[i] = rm_op
            elif s == "Gb":
                ops[i] = Operand(OperandKind.REGISTER,
                                 reg=_reg_name(reg_field, 8, self.rex))
            elif s in ("Gv", "Gw"):
                bits = 16 if s == "Gw" else vbits
                ops[i] = Operand(OperandKind.REGISTER,
                                 reg=_reg_name(reg_field, bits, self.rex))
            elif s == "Vx":
                ops[i] = Operand(OperandKind.REGISTER, reg=XMM[reg_field])
            elif s == "Sw":
                if reg_field > 5:
                    raise _Undecodable
                ops[i] = Operand(OperandKind.REGISTER, reg=SEGREGS[reg_field])
            elif s == "Ib":
                ops[i] = Operand(OperandKind.IMMEDIATE, value=self.cur.uint(1))
            elif s == "Iw":
                ops[i] = Operand(OperandKind.IMMEDIATE, value=self.cur.uint(2))
            elif s == "Iz":
                n = 2 if vbits == 16 else 4
                ops[i] = Operand(OperandKind.IMMEDIATE, value=self.cur.uint(n))
            elif s == "Iv":
                n = {16: 2, 32: 4, 64: 8}[vbits]
                ops[i] = Operand(OperandKind.IMMEDIATE, value=self.cur.uint(n))
            elif s == "Jb":
                ops[i] = Operand(OperandKind.BRANCH, value=self.cur.sint(1))
            elif s == "Jz":
                n = 2 if (vbits == 16 and self.mode is not Mode.X86_64) else 4
                ops[i] = Operand(OperandKind.BRANCH, value=self.cur.sint(n))
            elif s == "Ap":
                n = 2 if vbits == 16 else 4
                off = self.cur.uint(n)
                self.cur.uint(2)  # selector
                ops[i] = Operand(OperandKind.BRANCH, value=off, absolute=True)
            elif s in ("Ob", "Ov"):
                n = self.addrbits() // 8
                addr = self.cur.uint(n)
                mem = MemExpr(disp=addr, disp_size=n)
                ops[i] = Operand(OperandKind.MEMORY, mem=mem)
            elif s == "AL":
                ops[i] = Operand(OperandKind.REGISTER, reg="al")
            elif s == "CL":
                ops[i] = Operand(OperandKind.REGISTER, reg="cl")
            elif s == "DX":
                ops[i] = Operand(OperandKind.REGISTER, reg="dx")
            elif s == "eAX":
                ops[i] = Operand(OperandKind.REGISTER,
                                 reg=_reg_name(0, vbits, 0))
            elif s == "ONE":
                ops[i] = Operand(OperandKind.IMMEDIATE, value=1)
            else:
                raise AssertionError(f"unknown operand spec {s}")
        return tuple(ops)

    def parse_modrm_xmm(self):
        """ModRM where mod=3 names an xmm register."""
        m = self.cur.u8()
        mod, reg, rm = m >> 6, (m >> 3) & 7, m & 7
        reg |= (self.rex >> 2 & 1) << 3
        if mod == 3:
            code = rm | ((self.rex & 1) << 3)
            return Operand(OperandKind.REGISTER, reg=XMM[code]), reg
        self.cur.pos -= 1
        op, _ = self.parse_modrm(32)
        return op, reg

    # --- main ----------------------------------------------------------------

    def prefixes_tuple(self) -> tuple[str, ...]:
        out = []
        if self.lock:
            out.append("lock")
        if self.rep:
            out.append(self.rep)
        if self.seg:
            out.append(self.seg)
        return tuple(out)

    def decode(self) -> tuple[str, tuple[Operand, ...]]:
        is64 = self.mode is Mode.X86_64
        while True:
            b = self.cur.u8()
            if b in SEG_PREFIX:
                self.seg = SEG_PREFIX[b]
                self.rex = 0
                continue
            if b == 0x66:
                self.opsize = True
                self.rex = 0
                continue
            if b == 0x67:
                self.addrsize = True
                self.rex = 0
                continue
            if b == 0xF0:
                self.lock = True
                self.rex = 0
                continue
            if b == 0xF2:
                self.rep = "repne"
                self.rex = 0
                continue
            if b == 0xF3:
                self.rep = "rep"
                self.rex = 0
                continue
            if is64 and 0x40 <= b <= 0x4F:
                self.rex = b
                continue
            opcode = b
            break

        if opcode in EXCLUDED:
            raise _Undecodable
        if opcode == 0x0F:
            return self.decode_0f()
        if not is64 and opcode in PUSH_POP_SEG:
            mn, seg = PUSH_POP_SEG[opcode]
            return mn, (Operand(OperandKind.REGISTER, reg=seg),)
        if not is64 and opcode in BCD_32:
            return BCD_32[opcode], ()
        if is64 and opcode in ONLY32:
            raise _Undecodable

        if 0x40 <= opcode <= 0x4F and not is64:
            mn = "inc" if opcode < 0x48 else "dec"
            reg = _reg_name(opcode & 7, self.opbits(), 0)
            return mn, (Operand(OperandKind.REGISTER, reg=reg),)
        if 0x50 <= opcode <= 0x5F:
            mn = "push" if opcode < 0x58 else "pop"
            code = (opcode & 7) | ((self.rex & 1) << 3)
            reg = _reg_name(code, self.stackbits(), self.rex)
            return mn, (Operand(OperandKind.REGISTER, reg=reg),)
        if opcode == 0x63:
            return self._decode_63()
        if 0x70 <= opcode <= 0x7F:
            ops = self.build_operands(("Jb",))
            return "j" + CC[opcode & 0xF], ops
        if opcode in (0x80, 0x81, 0x82, 0x83):
            rm_spec = "Eb" if opcode in (0x80, 0x82) else "Ev"
            imm = "Ib" if opcode in (0x80, 0x82, 0x83) else "Iz"
            rm, reg = self.parse_modrm(8 if rm_spec == "Eb" else self.opbits())
            imm_op = self.build_operands((imm,))
            return GRP1[reg & 7], (rm,) + imm_op
        if opcode == 0x8F:
            rm, reg = self.parse_modrm(self.stackbits())
            if reg & 7:
                raise _Undecodable
            return "pop", (rm,)
        if opcode == 0x90 and not (self.rex & 1):
            return "nop", ()
        if 0x90 <= opcode <= 0x97:
            code = (opcode & 7) | ((self.rex & 1) << 3)
            bits = self.opbits()
            return "xchg", (Operand(OperandKind.REGISTER,
                                    reg=_reg_name(0, bits, 0)),
                            Operand(OperandKind.REGISTER,
                                    reg=_reg_name(code, bits, self.rex)))
        if opcode == 0x9B:
            return "fpu", ()
        if opcode in STRING_OPS:
            return STRING_OPS[opcode], ()
        if 0xB0 <= opcode <= 0xB7:
            code = (opcode & 7) | ((self.rex & 1) << 3)
            ops = self.build_operands(("Ib",))
            return "mov", (Operand(OperandKind.REGISTER,
                                   reg=_reg_name(code, 8, self.rex)),) + ops
        if 0xB8 <= opcode <= 0xBF:
            code = (opcode & 7) | ((self.rex & 1) << 3)
            bits = self.opbits()
            ops = self.build_operands(("Iv",))
            return "mov", (Operand(OperandKind.REGISTER,
                                   reg=_reg_name(code, bits, self.rex)),) + ops
        if opcode in (0xC0, 0xC1, 0xD0, 0xD1, 0xD2, 0xD3):
            ebits = 8 if opcode in (0xC0, 0xD0, 0xD2) else self.opbits()
            rm, reg = self.parse_modrm(ebits)
            if opcode in (0xC0, 0xC1):
                extra = self.build_operands(("Ib",))
            elif opcode in (0xD0, 0xD1):
                extra = (Operand(OperandKind.IMMEDIATE, value=1),)
            else:
                extra = (Operand(OperandKind.REGISTER, reg="cl"),)
            return GRP2[reg & 7], (rm,) + extra
        if opcode in (0xC6, 0xC7):
            ebits = 8 if opcode == 0xC6 else self.opbits()
            rm, reg = self.parse_modrm(ebits)
            if reg & 7:
                raise _Undecodable
            imm = "Ib" if opcode == 0xC6 else "Iz"
            ops = self.build_operands((imm,))
            return "mov", (rm,) + ops
        if 0xD8 <= opcode <= 0xDF:
            return self._decode_fpu()
        if opcode in (0xF6, 0xF7):
            ebits = 8 if opcode == 0xF6 else self.opbits()
            rm, reg = self.parse_modrm(ebits)
            mn = GRP3[reg & 7]
            if (reg & 7) in (0, 1):
                imm = "Ib" if opcode == 0xF6 else "Iz"
                return mn, (rm,) + self.build_operands((imm,))
            return mn, (rm,)
        if opcode == 0xFE:
            rm, reg = self.parse_modrm(8)
            if (reg & 7) > 1:
                raise _Undecodable
            return ("inc", "dec")[reg & 7], (rm,)
        if opcode == 0xFF:
            return self._decode_grp5()

        entry = ONE_BYTE.get(opcode)
        if entry is None:
            raise _Undecodable
        mn, specs = entry
        return mn, self.build_operands(specs)

    def _decode_63(self):
        if self.mode is Mode.X86_64:
            rm, reg = self.parse_modrm(32)
            dst = Operand(OperandKind.REGISTER,
                          reg=_reg_name(reg, self.opbits(), self.rex))
            return "movsxd", (dst, rm)
        rm, reg = self.parse_modrm(16)
        src = Operand(OperandKind.REGISTER, reg=_reg_name(reg, 16, 0))
        return "arpl", (rm, src)

    def _decode_fpu(self):
        m = self.cur.u8()
        mod = m >> 6
        if mod == 3:
            return "fpu", ()
        self.cur.pos -= 1
        rm, _ = self.parse_modrm(32)
        return "fpu", (rm,)

    def _decode_grp5(self):
        r = self.cur.peek() >> 3 & 7
        # call/jmp/push are d64 in long mode; inc/dec follow operand size
        bits = self.opbits() if r in (0, 1) else self.stackbits()
        rm, _ = self.parse_modrm(bits)
        if r in (0, 1):
            return ("inc", "dec")[r], (rm,)
        if r in (2, 4):
            return ("call" if r == 2 else "jmp"), (rm,)
        if r in (3, 5):
            if rm.kind is not OperandKind.MEMORY:
                raise _Undecodable
            return ("call" if r == 3 else "jmp"), (rm,)
        if r == 6:
            return "push", (rm,)
        raise _Undecodable

    def decode_0f(self):
        is64 = self.mode is Mode.X86_64
        opcode = self.cur.u8()
        if 0x80 <= opcode <= 0x8F:
            return "j" + CC[opcode & 0xF], self.build_operands(("Jz",))
        if 0x40 <= opcode <= 0x4F:
            return "cmov" + CC[opcode & 0xF], self.build_operands(("Gv", "Ev"))
        if 0x90 <= opcode <= 0x9F:
            return "set" + CC[opcode & 0xF], self.build_operands(("Eb",))
        if 0xC8 <= opcode <= 0xCF:
            code = (opcode & 7) | ((self.rex & 1) << 3)
            reg = _reg_name(code, 64 if (self.rex & 8) else 32, self.rex)
            return "bswap", (Operand(OperandKind.REGISTER, reg=reg),)
        if 0x18 <= opcode <= 0x1F or opcode == 0x0D:
            rm, _ = self.parse_modrm(self.opbits())
            return "nop", (rm,)
        if opcode == 0xAE:
            m = self.cur.u8()
            mod, reg = m >> 6, (m >> 3) & 7
            if mod == 3:
                if reg in (5, 6, 7):
                    return "fence", ()
                raise _Undecodable
            self.cur.pos -= 1
            rm, _ = self.parse_modrm(32)
            return "fence", (rm,)
        if opcode == 0xBA:
            rm, reg = self.parse_modrm(self.opbits())
            mn = GRP8[reg & 7]
            if mn is None:
                raise _Undecodable
            return mn, (rm,) + self.build_operands(("Ib",))
        if opcode == 0xC7:
            rm, reg = self.parse_modrm(self.opbits(), mem_only=True)
            if (reg & 7) != 1:
                raise _Undecodable
            return "cmpxchg8b", (rm,)
        if opcode in (0xA0, 0xA1, 0xA8, 0xA9):
            mn = "push" if opcode in (0xA0, 0xA8) else "pop"
            seg = "fs" if opcode in (0xA0, 0xA1) else "gs"
            return mn, (Operand(OperandKind.REGISTER, reg=seg),)
        if opcode in (0x38, 0x3A):
            # three-byte simd maps: opcode byte + modrm (+ imm8 for 0F3A)
            self.cur.u8()
            rm, reg = self.parse_modrm_xmm()
            ops = (Operand(OperandKind.REGISTER, reg=XMM[reg]), rm)
            if opcode == 0x3A:
                ops = ops + self.build_operands(("Ib",))
            return "simd", ops
        if opcode in SIMD_MODRM:
            rm, reg = self.parse_modrm_xmm()
            v = Operand(OperandKind.REGISTER, reg=XMM[reg])
            ops = (rm, v) if opcode in SIMD_STORES else (v, rm)
            if opcode in SIMD_MODRM_IMM8:
                ops = ops + self.build_operands(("Ib",))
            return "simd", ops

        entry = TWO_BYTE.get(opcode)
        if entry is None:
            raise _Undecodable
        mn, specs = entry
        if opcode == 0x05 and not is64:
            raise _Undecodable
        if opcode == 0x34 and is64:
            raise _Undecodable
        return mn, self.build_operands(specs)


def decode_one(data: bytes, offset: int, mode: Mode,
               va: int = 0) -> DecodedUnit:
    """Decode one unit at `offset`. Total: anything outside the subset is a
    RawByte of length 1. `va` is the virtual address of `offset`."""
    if not 0 <= offset < len(data):
        raise IndexError(f"offset {offset} outside buffer of {len(data)}")
    dec = _Decoder(data, offset, mode)
    try:
        mnemonic, operands = dec.decode()
        length = dec.cur.pos - offset
        if length > 15:
            raise _Undecodable
        return DecodedUnit(offset=offset, virtual_address=va, length=length,
                           kind=UnitKind.INSTRUCTION, mnemonic=mnemonic,
                           prefixes=dec.prefixes_tuple(), operands=operands,
                           raw=data[offset:offset + length])
    except _Undecodable:
        return DecodedUnit(offset=offset, virtual_address=va, length=1,
                           kind=UnitKind.RAW_BYTE, mnemonic="db",
                           raw=data[offset:offset + 1])


def sweep_bytes(data: bytes, mode: Mode, base_va: int = 0,
                base_offset: int = 0, section: str | None = None
                ) -> list[DecodedUnit]:
    """Linear sweep over a contiguous buffer; units tile it exactly."""
    units = []
    off = 0
    n = len(data)
    while off < n:
        u = decode_one(data, off, mode, va=base_va + off)
        if base_offset or section is not None:
            u = DecodedUnit(offset=base_offset + off,
                            virtual_address=u.virtual_address,
                            length=u.length, kind=u.kind,
                            mnemonic=u.mnemonic, prefixes=u.prefixes,
                            operands=u.operands, raw=u.raw, section=section)
        units.append(u)
        off += u.length
    return units


def linear_sweep(image: BinaryImage) -> list[DecodedUnit]:
    """Sweep every section's file bytes (headers are outside sections and are
    never swept). Units never cross section boundaries."""
    units: list[DecodedUnit] = []
    for s in image.sections:
        if s.file_size == 0:
            continue
        data = image.section_bytes(s)
        units.extend(sweep_bytes(data, image.mode, base_va=s.virtual_address,
                                 base_offset=s.file_offset, section=s.name))
    return units
