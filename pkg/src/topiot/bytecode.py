"""Compiler from task programs to device bytecode images (.mtb).

An image is what actually ships to a device: flat tables plus one code
blob of stack-machine blocks.  Each block evaluates to exactly one stack
entry (a value, or a task node for the runtime to adopt) and ends with
RETURN.  Function bodies, main, step-continuation predicates and bodies,
and repeat bodies each get their own block; blocks reference each other
by u16 offset into the blob.

Everything is little-endian.  Reals are stored as f32, matching device
arithmetic.  decode_image rejects anything malformed: bad magic, unknown
opcodes, out-of-range ids, and jump or block offsets that do not land on
an instruction boundary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

from . import lang as L
from .validate import BoardLimits, validate
from .values import (BoolT, IntT, PairT, RealT, UnitT, Val, round_f32,
                     vbool, vint, vpair, vreal, vunit)

MAGIC = b"MT"
VERSION = 1

### opcodes

OP_PUSHLIT = 0x01
OP_PUSHARG = 0x02
OP_ADD = 0x10
OP_SUB = 0x11
OP_MUL = 0x12
OP_DIV = 0x13
OP_EQ = 0x14
OP_NEQ = 0x15
OP_LT = 0x16
OP_GT = 0x17
OP_LE = 0x18
OP_GE = 0x19
OP_AND = 0x1A
OP_OR = 0x1B
OP_NOT = 0x1C
OP_JMP = 0x20
OP_JMPF = 0x21
OP_MKPAIR = 0x22
OP_FST = 0x23
OP_SND = 0x24
OP_CALL = 0x30
OP_TAILCALL = 0x31
OP_RETURN = 0x32
OP_TASKNODE = 0x40

_BINOP_OPCODE = {
    "+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV,
    "==": OP_EQ, "!=": OP_NEQ, "<": OP_LT, ">": OP_GT,
    "<=": OP_LE, ">=": OP_GE, "&": OP_AND, "|": OP_OR,
}

# opcode -> (mnemonic, operand layout); "B" u8, "H" u16le
_PLAIN_OPS = {
    OP_PUSHARG: ("PUSHARG", "B"),
    OP_ADD: ("ADD", ""), OP_SUB: ("SUB", ""), OP_MUL: ("MUL", ""),
    OP_DIV: ("DIV", ""),
    OP_EQ: ("EQ", ""), OP_NEQ: ("NEQ", ""), OP_LT: ("LT", ""),
    OP_GT: ("GT", ""), OP_LE: ("LE", ""), OP_GE: ("GE", ""),
    OP_AND: ("AND", ""), OP_OR: ("OR", ""), OP_NOT: ("NOT", ""),
    OP_JMP: ("JMP", "H"), OP_JMPF: ("JMPF", "H"),
    OP_MKPAIR: ("MKPAIR", ""), OP_FST: ("FST", ""), OP_SND: ("SND", ""),
    OP_CALL: ("CALL", "BB"), OP_TAILCALL: ("TAILCALL", "BB"),
    OP_RETURN: ("RETURN", ""),
}

### task node kinds (TASKNODE operand byte)

N_RTRN = 0
N_RPEAT = 1
N_DELAY = 2
N_AND = 3
N_OR = 4
N_STEP = 5
N_GETSDS = 6
N_SETSDS = 7
N_READA = 8
N_WRITEA = 9
N_READD = 10
N_WRITED = 11
N_DHTTEMP = 12
N_DHTHUM = 13
N_LMDOT = 14
N_LMINTENSITY = 15
N_LMCLEAR = 16
N_LMDISPLAY = 17

# kind -> (name, operand layout after the kind byte)
NODE_KINDS = {
    N_RTRN: ("RTRN", ""),
    N_RPEAT: ("RPEAT", "H"),
    N_DELAY: ("DELAY", ""),
    N_AND: ("AND", ""),
    N_OR: ("OR", ""),
    N_STEP: ("STEP", "HB"),
    N_GETSDS: ("GETSDS", "B"),
    N_SETSDS: ("SETSDS", "B"),
    N_READA: ("READA", "B"),
    N_WRITEA: ("WRITEA", "B"),
    N_READD: ("READD", "B"),
    N_WRITED: ("WRITED", "B"),
    N_DHTTEMP: ("DHTTEMP", "B"),
    N_DHTHUM: ("DHTHUM", "B"),
    N_LMDOT: ("LMDOT", "B"),
    N_LMINTENSITY: ("LMINTENSITY", "B"),
    N_LMCLEAR: ("LMCLEAR", "B"),
    N_LMDISPLAY: ("LMDISPLAY", "B"),
}

_LIT_INT, _LIT_BOOL, _LIT_REAL, _LIT_UNIT = range(4)

GUARD_CODES = (L.GUARD_VALUE, L.GUARD_STABLE, L.GUARD_UNSTABLE,
               L.GUARD_NOVALUE, L.GUARD_ALWAYS)

NO_PRED = 0xFFFF

MAX_CODE = 0xFFFF


class CompileError(Exception):
    pass


class DecodeError(Exception):
    pass


### image model

@dataclass(frozen=True)
class FunEntry:
    entry: int
    arity: int
    pure: bool


@dataclass(frozen=True)
class SdsEntry:
    lifted: bool
    init: Val
    key: str


@dataclass(frozen=True)
class PeriphEntry:
    kind: str          # "dht" | "ledmatrix"
    pins: tuple[int, ...]
    model: str


@dataclass(frozen=True)
class ContEntry:
    guard: str
    pred: Optional[int]  # block offset, None for valueless guards
    body: int


@dataclass(frozen=True)
class Instr:
    off: int
    name: str
    args: tuple

    def __str__(self) -> str:
        if not self.args:
            return self.name
        return self.name + " " + " ".join(_arg_str(a) for a in self.args)


def _arg_str(a) -> str:
    if isinstance(a, Val):
        return f"{type(a.ty).__name__[:-1].lower()} {a.v!r}"
    return str(a)


@dataclass(frozen=True)
class Image:
    version: int
    funs: tuple[FunEntry, ...]
    sdss: tuple[SdsEntry, ...]
    periphs: tuple[PeriphEntry, ...]
    main_entry: int
    conts: tuple[ContEntry, ...]
    code: bytes


### value helpers (image tables store device-precision reals)

def _device_val(v: Val) -> Val:
    if isinstance(v.ty, RealT):
        return vreal(round_f32(v.v))
    if isinstance(v.ty, PairT):
        return vpair(_device_val(v.v[0]), _device_val(v.v[1]))
    return v


def _enc_tval(out: bytearray, v: Val) -> None:
    if isinstance(v.ty, IntT):
        out.append(_LIT_INT)
        out += struct.pack("<i", v.v)
    elif isinstance(v.ty, BoolT):
        out.append(_LIT_BOOL)
        out.append(1 if v.v else 0)
    elif isinstance(v.ty, RealT):
        out.append(_LIT_REAL)
        out += struct.pack("<f", v.v)
    elif isinstance(v.ty, UnitT):
        out.append(_LIT_UNIT)
    else:
        out.append(4)
        _enc_tval(out, v.v[0])
        _enc_tval(out, v.v[1])


### compiler

class _Emit:
    """One code blob under construction, with backpatching."""

    def __init__(self) -> None:
        self.buf = bytearray()

    @property
    def here(self) -> int:
        return len(self.buf)

    def u8(self, b: int) -> None:
        self.buf.append(b)

    def u16(self, v: int) -> None:
        self.buf += struct.pack("<H", v)

    def hole16(self) -> int:
        pos = self.here
        self.buf += b"\xff\xff"
        return pos

    def patch16(self, pos: int, v: int) -> None:
        self.buf[pos:pos + 2] = struct.pack("<H", v)


class _Compiler:
    def __init__(self, prog: L.Program, tail_ids: frozenset):
        self.prog = prog
        self.tail_ids = tail_ids
        self.em = _Emit()
        self.conts: list[list] = []     # [guard, pred_off|None, body_off]
        # deferred blocks: ("rpeat", task, patch_pos) | ("pred", expr, cont_idx)
        #                | ("body", task, cont_idx)
        self.queue: list[tuple] = []

    def compile(self) -> Image:
        funs = []
        for f in self.prog.functions:
            entry = self.em.here
            pure = isinstance(f.body, L.Expr)
            if pure:
                self._expr(f.body)
            else:
                self._task(f.body)
            self.em.u8(OP_RETURN)
            funs.append(FunEntry(entry, len(f.params), pure))
        main_entry = self.em.here
        self._task(self.prog.main)
        self.em.u8(OP_RETURN)
        while self.queue:
            job = self.queue.pop(0)
            off = self.em.here
            if job[0] == "rpeat":
                self._task(job[1])
                self.em.u8(OP_RETURN)
                self.em.patch16(job[2], off)
            elif job[0] == "pred":
                self._expr(job[1])
                self.em.u8(OP_RETURN)
                self.conts[job[2]][1] = off
            else:
                # Only the whole body of a fired continuation may rebind
                # the owning call in place; calls anywhere else nest.
                self._task(job[1], tail_ok=True)
                self.em.u8(OP_RETURN)
                self.conts[job[2]][2] = off
        if self.em.here > MAX_CODE:
            raise CompileError(f"code blob too large ({self.em.here} bytes)")
        sdss = tuple(SdsEntry(s.lifted, _device_val(s.init), s.key)
                     for s in self.prog.sdss)
        periphs = tuple(PeriphEntry(p.kind, p.pins, p.model)
                        for p in self.prog.periphs)
        conts = tuple(ContEntry(g, p, b) for g, p, b in self.conts)
        return Image(VERSION, tuple(funs), sdss, periphs, main_entry,
                     conts, bytes(self.em.buf))

    ### expressions

    def _push_lit(self, v: Val) -> None:
        if isinstance(v.ty, PairT):
            self._push_lit(v.v[0])
            self._push_lit(v.v[1])
            self.em.u8(OP_MKPAIR)
            return
        self.em.u8(OP_PUSHLIT)
        _enc_tval(self.em.buf, _device_val(v))

    def _expr(self, e: L.Expr) -> None:
        em = self.em
        if isinstance(e, L.Lit):
            self._push_lit(e.val)
        elif isinstance(e, L.Arg):
            em.u8(OP_PUSHARG)
            em.u8(e.idx)
        elif isinstance(e, L.BinOp):
            self._expr(e.lhs)
            self._expr(e.rhs)
            em.u8(_BINOP_OPCODE[e.op])
        elif isinstance(e, L.Not):
            self._expr(e.e)
            em.u8(OP_NOT)
        elif isinstance(e, L.If):
            # only the taken branch runs
            self._expr(e.cond)
            em.u8(OP_JMPF)
            to_else = em.hole16()
            self._expr(e.then)
            em.u8(OP_JMP)
            to_end = em.hole16()
            em.patch16(to_else, em.here)
            self._expr(e.other)
            em.patch16(to_end, em.here)
        elif isinstance(e, L.Fst):
            self._expr(e.e)
            em.u8(OP_FST)
        elif isinstance(e, L.Snd):
            self._expr(e.e)
            em.u8(OP_SND)
        elif isinstance(e, L.MkPair):
            self._expr(e.fst)
            self._expr(e.snd)
            em.u8(OP_MKPAIR)
        else:
            raise CompileError(f"cannot compile expression {e!r}")

    ### tasks

    def _node(self, kind: int) -> None:
        self.em.u8(OP_TASKNODE)
        self.em.u8(kind)

    def _pin(self, p: L.PinRef) -> int:
        self._expr(p.expr)
        return 0 if p.bank == "d" else 1

    def _task(self, t: L.TaskExpr, tail_ok: bool = False) -> None:
        em = self.em
        if isinstance(t, L.Rtrn):
            self._expr(t.e)
            self._node(N_RTRN)
        elif isinstance(t, L.Rpeat):
            self._node(N_RPEAT)
            pos = em.hole16()
            self.queue.append(("rpeat", t.body, pos))
        elif isinstance(t, L.Delay):
            self._expr(t.ms)
            self._node(N_DELAY)
        elif isinstance(t, L.TAnd):
            self._task(t.left)
            self._task(t.right)
            self._node(N_AND)
        elif isinstance(t, L.TOr):
            self._task(t.left)
            self._task(t.right)
            self._node(N_OR)
        elif isinstance(t, L.Step):
            self._task(t.left)
            start = len(self.conts)
            for c in t.conts:
                idx = len(self.conts)
                self.conts.append([c.guard, None, 0])
                if c.guard in L.VALUEFUL_GUARDS:
                    self.queue.append(("pred", c.pred, idx))
                self.queue.append(("body", c.body, idx))
            self._node(N_STEP)
            em.u16(start)
            em.u8(len(t.conts))
        elif isinstance(t, L.Call):
            for a in t.args:
                self._expr(a)
            em.u8(OP_TAILCALL if tail_ok and id(t) in self.tail_ids else OP_CALL)
            em.u8(t.fn)
            em.u8(len(t.args))
        elif isinstance(t, L.GetSds):
            self._node(N_GETSDS)
            em.u8(t.sds)
        elif isinstance(t, L.SetSds):
            self._expr(t.e)
            self._node(N_SETSDS)
            em.u8(t.sds)
        elif isinstance(t, L.ReadA):
            bank = self._pin(t.pin)
            self._node(N_READA)
            em.u8(bank)
        elif isinstance(t, L.WriteA):
            bank = self._pin(t.pin)
            self._expr(t.e)
            self._node(N_WRITEA)
            em.u8(bank)
        elif isinstance(t, L.ReadD):
            bank = self._pin(t.pin)
            self._node(N_READD)
            em.u8(bank)
        elif isinstance(t, L.WriteD):
            bank = self._pin(t.pin)
            self._expr(t.e)
            self._node(N_WRITED)
            em.u8(bank)
        elif isinstance(t, L.DhtTemp):
            self._node(N_DHTTEMP)
            em.u8(t.periph)
        elif isinstance(t, L.DhtHumid):
            self._node(N_DHTHUM)
            em.u8(t.periph)
        elif isinstance(t, L.LmDot):
            self._expr(t.x)
            self._expr(t.y)
            self._expr(t.on)
            self._node(N_LMDOT)
            em.u8(t.periph)
        elif isinstance(t, L.LmIntensity):
            self._expr(t.level)
            self._node(N_LMINTENSITY)
            em.u8(t.periph)
        elif isinstance(t, L.LmClear):
            self._node(N_LMCLEAR)
            em.u8(t.periph)
        elif isinstance(t, L.LmDisplay):
            self._node(N_LMDISPLAY)
            em.u8(t.periph)
        else:
            raise CompileError(f"cannot compile task {t!r}")


def compile_program(prog: L.Program,
                    limits: Optional[BoardLimits] = None) -> Image:
    report = validate(prog, limits or BoardLimits())
    if not report.ok:
        raise CompileError("invalid program: " +
                           "; ".join(d.message for d in report.diagnostics))
    if len(prog.functions) > 255 or len(prog.sdss) > 255 or len(prog.periphs) > 255:
        raise CompileError("too many top-level declarations")
    return _Compiler(prog, report.tail_ids).compile()


### binary encoding

def _enc_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 255:
        raise CompileError("string too long")
    out.append(len(raw))
    out += raw


def encode_image(img: Image) -> bytes:
    out = bytearray()
    out += MAGIC
    out.append(img.version)
    out.append(len(img.funs))
    for f in img.funs:
        out += struct.pack("<HBB", f.entry, f.arity, 1 if f.pure else 0)
    out.append(len(img.sdss))
    for s in img.sdss:
        out.append(1 if s.lifted else 0)
        _enc_tval(out, s.init)
        _enc_str(out, s.key)
    out.append(len(img.periphs))
    for p in img.periphs:
        out.append(0 if p.kind == "dht" else 1)
        out.append(len(p.pins))
        for pin in p.pins:
            out.append(pin)
        _enc_str(out, p.model)
    out += struct.pack("<H", img.main_entry)
    out += struct.pack("<H", len(img.conts))
    for c in img.conts:
        out.append(GUARD_CODES.index(c.guard))
        out += struct.pack("<H", NO_PRED if c.pred is None else c.pred)
        out += struct.pack("<H", c.body)
    out += struct.pack("<H", len(img.code))
    out += img.code
    return bytes(out)


### decoding

class _Rd:
    def __init__(self, data: bytes):
        self.d = data
        self.p = 0

    def u8(self) -> int:
        if self.p >= len(self.d):
            raise DecodeError("truncated image")
        b = self.d[self.p]
        self.p += 1
        return b

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def take(self, n: int) -> bytes:
        if self.p + n > len(self.d):
            raise DecodeError("truncated image")
        c = self.d[self.p:self.p + n]
        self.p += n
        return c


def _dec_tval(r: _Rd) -> Val:
    tag = r.u8()
    if tag == _LIT_INT:
        return vint(struct.unpack("<i", r.take(4))[0])
    if tag == _LIT_BOOL:
        return vbool(r.u8() != 0)
    if tag == _LIT_REAL:
        return vreal(struct.unpack("<f", r.take(4))[0])
    if tag == _LIT_UNIT:
        return vunit()
    if tag == 4:
        a = _dec_tval(r)
        b = _dec_tval(r)
        return vpair(a, b)
    raise DecodeError(f"bad value tag {tag}")


def _dec_str(r: _Rd) -> str:
    n = r.u8()
    try:
        return r.take(n).decode("utf-8")
    except UnicodeDecodeError as e:
        raise DecodeError("bad utf-8 string") from e


def scan_code(code: bytes) -> list[Instr]:
    """Decode the whole blob as a contiguous instruction stream."""
    instrs = []
    r = _Rd(code)
    while r.p < len(code):
        off = r.p
        op = r.u8()
        if op == OP_PUSHLIT:
            instrs.append(Instr(off, "PUSHLIT", (_dec_tval(r),)))
        elif op == OP_TASKNODE:
            kind = r.u8()
            if kind not in NODE_KINDS:
                raise DecodeError(f"bad node kind {kind} at {off}")
            name, layout = NODE_KINDS[kind]
            args = tuple(r.u8() if c == "B" else r.u16() for c in layout)
            instrs.append(Instr(off, name, args))
        elif op in _PLAIN_OPS:
            name, layout = _PLAIN_OPS[op]
            args = tuple(r.u8() if c == "B" else r.u16() for c in layout)
            instrs.append(Instr(off, name, args))
        else:
            raise DecodeError(f"bad opcode 0x{op:02x} at {off}")
    return instrs


def decode_image(data: bytes) -> Image:
    r = _Rd(data)
    if r.take(2) != MAGIC:
        raise DecodeError("not a bytecode image")
    ver = r.u8()
    if ver != VERSION:
        raise DecodeError(f"unsupported version {ver}")
    funs = tuple(FunEntry(*struct.unpack("<HB", r.take(3)), r.u8() != 0)
                 for _ in range(r.u8()))
    sdss = []
    for _ in range(r.u8()):
        lifted = r.u8() != 0
        init = _dec_tval(r)
        sdss.append(SdsEntry(lifted, init, _dec_str(r)))
    periphs = []
    for _ in range(r.u8()):
        k = r.u8()
        if k > 1:
            raise DecodeError(f"bad peripheral kind {k}")
        pins = tuple(r.u8() for _ in range(r.u8()))
        periphs.append(PeriphEntry("dht" if k == 0 else "ledmatrix",
                                   pins, _dec_str(r)))
    main_entry = r.u16()
    conts = []
    for _ in range(r.u16()):
        g = r.u8()
        if g >= len(GUARD_CODES):
            raise DecodeError(f"bad guard code {g}")
        guard = GUARD_CODES[g]
        pred = r.u16()
        body = r.u16()
        if guard in L.VALUEFUL_GUARDS:
            if pred == NO_PRED:
                raise DecodeError("valueful guard without predicate block")
        elif pred != NO_PRED:
            raise DecodeError("valueless guard with predicate block")
        conts.append(ContEntry(guard, None if pred == NO_PRED else pred, body))
    ncode = r.u16()
    code = r.take(ncode)
    if r.p != len(data):
        raise DecodeError("trailing bytes after image")

    img = Image(ver, funs, tuple(sdss), tuple(periphs), main_entry,
                tuple(conts), code)
    _check_image(img)
    return img


def _check_image(img: Image) -> None:
    instrs = scan_code(img.code)
    bounds = {i.off for i in instrs}

    def block(off: int, what: str) -> None:
        if off not in bounds:
            raise DecodeError(f"{what} offset {off} is not an instruction")

    for i, f in enumerate(img.funs):
        block(f.entry, f"function {i} entry")
    block(img.main_entry, "main entry")
    for i, c in enumerate(img.conts):
        if c.pred is not None:
            block(c.pred, f"cont {i} predicate")
        block(c.body, f"cont {i} body")
    for ins in instrs:
        if ins.name in ("JMP", "JMPF"):
            block(ins.args[0], f"jump at {ins.off}")
        elif ins.name == "RPEAT":
            block(ins.args[0], f"repeat body at {ins.off}")
        elif ins.name == "STEP":
            start, n = ins.args
            if start + n > len(img.conts):
                raise DecodeError(f"step at {ins.off} references missing conts")
        elif ins.name in ("CALL", "TAILCALL"):
            fn, argc = ins.args
            if fn >= len(img.funs):
                raise DecodeError(f"call at {ins.off} to missing function {fn}")
            if argc != img.funs[fn].arity:
                raise DecodeError(f"call at {ins.off} arity mismatch")
        elif ins.name in ("GETSDS", "SETSDS"):
            if ins.args[0] >= len(img.sdss):
                raise DecodeError(f"share id {ins.args[0]} out of range at {ins.off}")
        elif ins.name in ("DHTTEMP", "DHTHUM", "LMDOT", "LMINTENSITY",
                          "LMCLEAR", "LMDISPLAY"):
            if ins.args[0] >= len(img.periphs):
                raise DecodeError(f"peripheral id {ins.args[0]} out of range at {ins.off}")
        elif ins.name in ("READA", "WRITEA", "READD", "WRITED"):
            if ins.args[0] > 1:
                raise DecodeError(f"bad pin bank at {ins.off}")


### disassembly

def block_at(instrs: list[Instr], off: int) -> list[Instr]:
    """Instructions of the block starting at off, through its RETURN."""
    out = []
    taking = False
    for ins in instrs:
        if ins.off == off:
            taking = True
        if taking:
            out.append(ins)
            if ins.name == "RETURN":
                break
    if not out or out[-1].name != "RETURN":
        raise DecodeError(f"no block at offset {off}")
    return out


def disassemble(img: Image) -> str:
    lines = [f"bytecode v{img.version}: {len(img.funs)} function(s), "
             f"{len(img.sdss)} share(s), {len(img.periphs)} peripheral(s), "
             f"{len(img.code)} code byte(s)"]
    for i, f in enumerate(img.funs):
        kind = "pure" if f.pure else "task"
        lines.append(f"fun f{i}/{f.arity} {kind} entry 0x{f.entry:04x}")
    for i, s in enumerate(img.sdss):
        tag = f" key={s.key!r}" if s.lifted else ""
        lines.append(f"sds s{i}{tag} init {s.init.v!r}")
    for i, p in enumerate(img.periphs):
        pins = ",".join(f"D{n}" for n in p.pins)
        model = f" {p.model}" if p.model else ""
        lines.append(f"periph p{i} {p.kind} {pins}{model}")
    lines.append(f"main entry 0x{img.main_entry:04x}")
    for i, c in enumerate(img.conts):
        pred = "-" if c.pred is None else f"0x{c.pred:04x}"
        lines.append(f"cont c{i} {c.guard} pred {pred} body 0x{c.body:04x}")
    for ins in scan_code(img.code):
        lines.append(f"  {ins.off:04x}  {ins}")
    return "\n".join(lines) + "\n"
