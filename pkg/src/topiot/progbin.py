"""Canonical binary form for task programs (.mtp files).

Tagged depth-first layout, little-endian, no padding.  Encoding is a
pure function of the program tree, so equal programs produce identical
bytes and decode(encode(p)) == p holds structurally.

This format carries the full typed description (the compiler's input);
compiled device images (.mtb) are a separate, lossy format.
"""

from __future__ import annotations

import struct

from . import lang as L
from .values import BOOL, INT, REAL, UNIT, BoolT, IntT, PairT, RealT, Ty, UnitT, Val, vbool, vint, vpair, vreal, vunit

MAGIC = b"MTPR"
VERSION = 1

OPS = ("+", "-", "*", "/", "==", "!=", "<", ">", "<=", ">=", "&", "|")
_OP_CODE = {op: i for i, op in enumerate(OPS)}

GUARDS = (L.GUARD_VALUE, L.GUARD_STABLE, L.GUARD_UNSTABLE, L.GUARD_NOVALUE, L.GUARD_ALWAYS)
_GUARD_CODE = {g: i for i, g in enumerate(GUARDS)}

_TY_INT, _TY_BOOL, _TY_REAL, _TY_UNIT, _TY_PAIR = range(5)

_E_LIT, _E_ARG, _E_BINOP, _E_NOT, _E_IF, _E_FST, _E_SND, _E_PAIR = range(1, 9)

_T_BASE = 0x20
(_T_RTRN, _T_RPEAT, _T_DELAY, _T_AND, _T_OR, _T_STEP, _T_CALL,
 _T_GETSDS, _T_SETSDS, _T_READA, _T_WRITEA, _T_READD, _T_WRITED,
 _T_DHTTEMP, _T_DHTHUM, _T_LMDOT, _T_LMINTENSITY, _T_LMCLEAR,
 _T_LMDISPLAY) = range(_T_BASE, _T_BASE + 19)

_PERIPH_KINDS = ("dht", "ledmatrix")


class FormatError(Exception):
    pass


### encoding

def _enc_ty(out: bytearray, ty: Ty) -> None:
    if isinstance(ty, IntT):
        out.append(_TY_INT)
    elif isinstance(ty, BoolT):
        out.append(_TY_BOOL)
    elif isinstance(ty, RealT):
        out.append(_TY_REAL)
    elif isinstance(ty, UnitT):
        out.append(_TY_UNIT)
    elif isinstance(ty, PairT):
        out.append(_TY_PAIR)
        _enc_ty(out, ty.fst)
        _enc_ty(out, ty.snd)
    else:
        raise FormatError(f"cannot encode type {ty!r}")


def _enc_val(out: bytearray, v: Val) -> None:
    _enc_ty(out, v.ty)
    if isinstance(v.ty, IntT):
        out += struct.pack("<i", v.v)
    elif isinstance(v.ty, BoolT):
        out.append(1 if v.v else 0)
    elif isinstance(v.ty, RealT):
        out += struct.pack("<d", v.v)
    elif isinstance(v.ty, PairT):
        _enc_val(out, v.v[0])
        _enc_val(out, v.v[1])


def _enc_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 255:
        raise FormatError("string too long")
    out.append(len(raw))
    out += raw


def _enc_expr(out: bytearray, e: L.Expr) -> None:
    if isinstance(e, L.Lit):
        out.append(_E_LIT)
        _enc_val(out, e.val)
    elif isinstance(e, L.Arg):
        out.append(_E_ARG)
        out.append(e.idx)
    elif isinstance(e, L.BinOp):
        out.append(_E_BINOP)
        out.append(_OP_CODE[e.op])
        _enc_expr(out, e.lhs)
        _enc_expr(out, e.rhs)
    elif isinstance(e, L.Not):
        out.append(_E_NOT)
        _enc_expr(out, e.e)
    elif isinstance(e, L.If):
        out.append(_E_IF)
        _enc_expr(out, e.cond)
        _enc_expr(out, e.then)
        _enc_expr(out, e.other)
    elif isinstance(e, L.Fst):
        out.append(_E_FST)
        _enc_expr(out, e.e)
    elif isinstance(e, L.Snd):
        out.append(_E_SND)
        _enc_expr(out, e.e)
    elif isinstance(e, L.MkPair):
        out.append(_E_PAIR)
        _enc_expr(out, e.fst)
        _enc_expr(out, e.snd)
    else:
        raise FormatError(f"cannot encode expression {e!r}")


def _enc_pin(out: bytearray, p: L.PinRef) -> None:
    out.append(0 if p.bank == "d" else 1)
    _enc_expr(out, p.expr)


def _enc_task(out: bytearray, t: L.TaskExpr) -> None:
    if isinstance(t, L.Rtrn):
        out.append(_T_RTRN)
        _enc_expr(out, t.e)
    elif isinstance(t, L.Rpeat):
        out.append(_T_RPEAT)
        _enc_task(out, t.body)
    elif isinstance(t, L.Delay):
        out.append(_T_DELAY)
        _enc_expr(out, t.ms)
    elif isinstance(t, L.TAnd):
        out.append(_T_AND)
        _enc_task(out, t.left)
        _enc_task(out, t.right)
    elif isinstance(t, L.TOr):
        out.append(_T_OR)
        _enc_task(out, t.left)
        _enc_task(out, t.right)
    elif isinstance(t, L.Step):
        out.append(_T_STEP)
        _enc_task(out, t.left)
        out.append(len(t.conts))
        for c in t.conts:
            out.append(_GUARD_CODE[c.guard])
            if c.guard in L.VALUEFUL_GUARDS:
                _enc_expr(out, c.pred)
            _enc_task(out, c.body)
    elif isinstance(t, L.Call):
        out.append(_T_CALL)
        out.append(t.fn)
        out.append(len(t.args))
        for a in t.args:
            _enc_expr(out, a)
    elif isinstance(t, L.GetSds):
        out.append(_T_GETSDS)
        out.append(t.sds)
    elif isinstance(t, L.SetSds):
        out.append(_T_SETSDS)
        out.append(t.sds)
        _enc_expr(out, t.e)
    elif isinstance(t, L.ReadA):
        out.append(_T_READA)
        _enc_pin(out, t.pin)
    elif isinstance(t, L.WriteA):
        out.append(_T_WRITEA)
        _enc_pin(out, t.pin)
        _enc_expr(out, t.e)
    elif isinstance(t, L.ReadD):
        out.append(_T_READD)
        _enc_pin(out, t.pin)
    elif isinstance(t, L.WriteD):
        out.append(_T_WRITED)
        _enc_pin(out, t.pin)
        _enc_expr(out, t.e)
    elif isinstance(t, L.DhtTemp):
        out.append(_T_DHTTEMP)
        out.append(t.periph)
    elif isinstance(t, L.DhtHumid):
        out.append(_T_DHTHUM)
        out.append(t.periph)
    elif isinstance(t, L.LmDot):
        out.append(_T_LMDOT)
        out.append(t.periph)
        _enc_expr(out, t.x)
        _enc_expr(out, t.y)
        _enc_expr(out, t.on)
    elif isinstance(t, L.LmIntensity):
        out.append(_T_LMINTENSITY)
        out.append(t.periph)
        _enc_expr(out, t.level)
    elif isinstance(t, L.LmClear):
        out.append(_T_LMCLEAR)
        out.append(t.periph)
    elif isinstance(t, L.LmDisplay):
        out.append(_T_LMDISPLAY)
        out.append(t.periph)
    else:
        raise FormatError(f"cannot encode task {t!r}")


def encode_program(prog: L.Program) -> bytes:
    out = bytearray()
    out += MAGIC
    out.append(VERSION)
    out.append(len(prog.functions))
    for f in prog.functions:
        out.append(len(f.params))
        for ty in f.params:
            _enc_ty(out, ty)
        _enc_ty(out, f.ret)
        if isinstance(f.body, L.TaskExpr):
            out.append(1)
            _enc_task(out, f.body)
        else:
            out.append(0)
            _enc_expr(out, f.body)
    out.append(len(prog.sdss))
    for s in prog.sdss:
        _enc_ty(out, s.ty)
        _enc_val(out, s.init)
        _enc_str(out, s.key)
    out.append(len(prog.periphs))
    for p in prog.periphs:
        out.append(_PERIPH_KINDS.index(p.kind))
        out.append(len(p.pins))
        for pin in p.pins:
            out.append(pin)
        _enc_str(out, p.model)
    _enc_task(out, prog.main)
    return bytes(out)


### decoding

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def u8(self) -> int:
        if self.pos >= len(self.data):
            raise FormatError("truncated input")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated input")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def done(self) -> bool:
        return self.pos == len(self.data)


def _dec_ty(r: _Reader) -> Ty:
    tag = r.u8()
    if tag == _TY_INT:
        return INT
    if tag == _TY_BOOL:
        return BOOL
    if tag == _TY_REAL:
        return REAL
    if tag == _TY_UNIT:
        return UNIT
    if tag == _TY_PAIR:
        return PairT(_dec_ty(r), _dec_ty(r))
    raise FormatError(f"bad type tag {tag}")


def _dec_val(r: _Reader) -> Val:
    ty = _dec_ty(r)
    return _dec_payload(r, ty)


def _dec_payload(r: _Reader, ty: Ty) -> Val:
    if isinstance(ty, IntT):
        return vint(struct.unpack("<i", r.take(4))[0])
    if isinstance(ty, BoolT):
        return vbool(r.u8() != 0)
    if isinstance(ty, RealT):
        return vreal(struct.unpack("<d", r.take(8))[0])
    if isinstance(ty, UnitT):
        return vunit()
    a = _dec_val(r)
    b = _dec_val(r)
    return vpair(a, b)


def _dec_str(r: _Reader) -> str:
    n = r.u8()
    try:
        return r.take(n).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("bad utf-8 string") from e


def _dec_expr(r: _Reader) -> L.Expr:
    tag = r.u8()
    if tag == _E_LIT:
        return L.Lit(_dec_val(r))
    if tag == _E_ARG:
        return L.Arg(r.u8())
    if tag == _E_BINOP:
        op = r.u8()
        if op >= len(OPS):
            raise FormatError(f"bad operator code {op}")
        return L.BinOp(OPS[op], _dec_expr(r), _dec_expr(r))
    if tag == _E_NOT:
        return L.Not(_dec_expr(r))
    if tag == _E_IF:
        return L.If(_dec_expr(r), _dec_expr(r), _dec_expr(r))
    if tag == _E_FST:
        return L.Fst(_dec_expr(r))
    if tag == _E_SND:
        return L.Snd(_dec_expr(r))
    if tag == _E_PAIR:
        return L.MkPair(_dec_expr(r), _dec_expr(r))
    raise FormatError(f"bad expression tag {tag}")


def _dec_pin(r: _Reader) -> L.PinRef:
    bank = r.u8()
    if bank > 1:
        raise FormatError(f"bad pin bank {bank}")
    return L.PinRef("d" if bank == 0 else "a", _dec_expr(r))


def _dec_task(r: _Reader) -> L.TaskExpr:
    tag = r.u8()
    if tag == _T_RTRN:
        return L.Rtrn(_dec_expr(r))
    if tag == _T_RPEAT:
        return L.Rpeat(_dec_task(r))
    if tag == _T_DELAY:
        return L.Delay(_dec_expr(r))
    if tag == _T_AND:
        return L.TAnd(_dec_task(r), _dec_task(r))
    if tag == _T_OR:
        return L.TOr(_dec_task(r), _dec_task(r))
    if tag == _T_STEP:
        left = _dec_task(r)
        n = r.u8()
        conts = []
        for _ in range(n):
            g = r.u8()
            if g >= len(GUARDS):
                raise FormatError(f"bad guard code {g}")
            guard = GUARDS[g]
            pred = _dec_expr(r) if guard in L.VALUEFUL_GUARDS else None
            conts.append(L.StepCont(guard, pred, _dec_task(r), None))
        return L.Step(left, tuple(conts))
    if tag == _T_CALL:
        fn = r.u8()
        argc = r.u8()
        return L.Call(fn, tuple(_dec_expr(r) for _ in range(argc)))
    if tag == _T_GETSDS:
        return L.GetSds(r.u8())
    if tag == _T_SETSDS:
        sid = r.u8()
        return L.SetSds(sid, _dec_expr(r))
    if tag == _T_READA:
        return L.ReadA(_dec_pin(r))
    if tag == _T_WRITEA:
        return L.WriteA(_dec_pin(r), _dec_expr(r))
    if tag == _T_READD:
        return L.ReadD(_dec_pin(r))
    if tag == _T_WRITED:
        return L.WriteD(_dec_pin(r), _dec_expr(r))
    if tag == _T_DHTTEMP:
        return L.DhtTemp(r.u8())
    if tag == _T_DHTHUM:
        return L.DhtHumid(r.u8())
    if tag == _T_LMDOT:
        pid = r.u8()
        return L.LmDot(pid, _dec_expr(r), _dec_expr(r), _dec_expr(r))
    if tag == _T_LMINTENSITY:
        pid = r.u8()
        return L.LmIntensity(pid, _dec_expr(r))
    if tag == _T_LMCLEAR:
        return L.LmClear(r.u8())
    if tag == _T_LMDISPLAY:
        return L.LmDisplay(r.u8())
    raise FormatError(f"bad task tag {tag}")


def decode_program(data: bytes) -> L.Program:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a program file")
    ver = r.u8()
    if ver != VERSION:
        raise FormatError(f"unsupported version {ver}")
    functions = []
    for _ in range(r.u8()):
        params = tuple(_dec_ty(r) for _ in range(r.u8()))
        ret = _dec_ty(r)
        kind = r.u8()
        if kind == 1:
            body = _dec_task(r)
        elif kind == 0:
            body = _dec_expr(r)
        else:
            raise FormatError(f"bad body kind {kind}")
        functions.append(L.FunDef(params, ret, body))
    sdss = []
    for _ in range(r.u8()):
        ty = _dec_ty(r)
        init = _dec_val(r)
        key = _dec_str(r)
        sdss.append(L.SdsDef(ty, init, key))
    periphs = []
    for _ in range(r.u8()):
        k = r.u8()
        if k >= len(_PERIPH_KINDS):
            raise FormatError(f"bad peripheral kind {k}")
        pins = tuple(r.u8() for _ in range(r.u8()))
        model = _dec_str(r)
        periphs.append(L.PeriphDef(_PERIPH_KINDS[k], pins, model))
    main = _dec_task(r)
    if not r.done():
        raise FormatError("trailing bytes after program")
    return L.Program(tuple(functions), tuple(sdss), tuple(periphs), main)
