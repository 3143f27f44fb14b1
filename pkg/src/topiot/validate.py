"""Static validation of task programs.

Checks typing, argument-slot discipline, declaration references, pin
ranges and structural limits, and computes the supporting facts later
stages consume: tail-call positions (for the compiler's constant-space
rebinding) and which functions are pure expressions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from . import lang as L
from .values import BOOL, INT, IntT, BoolT, RealT, UnitT, PairT, REAL, UNIT, Ty


@dataclass(frozen=True)
class BoardLimits:
    """What the target board offers; validation defaults are generous and
    the device re-checks against its own spec at load time."""

    digital_pins: int = 16
    analog_pins: int = 8
    matrix_w: int = 8
    matrix_h: int = 8


DEFAULT_LIMITS = BoardLimits()

MAX_IDS = 256          # function/SDS/peripheral ids fit a u8
MAX_ARITY = 16
MAX_SDS_KEY = 64
DHT_MODELS = ("dht11", "dht21", "dht22")


@dataclass
class Diagnostic:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass
class ValidationReport:
    ok: bool
    diagnostics: list[Diagnostic]
    main_ty: Optional[Ty] = None
    tail_ids: frozenset[int] = frozenset()
    pure_funs: frozenset[int] = frozenset()

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(str(d) for d in self.diagnostics)


class _Ctx:
    def __init__(self, prog: L.Program, limits: BoardLimits):
        self.prog = prog
        self.limits = limits
        self.diags: list[Diagnostic] = []

    def err(self, path: str, msg: str) -> None:
        self.diags.append(Diagnostic(path, msg))


def _scalar(ty: Ty) -> bool:
    return isinstance(ty, (IntT, BoolT, RealT))


def _expr_ty(ctx: _Ctx, e: L.Expr, env: list[Ty], path: str) -> Optional[Ty]:
    if isinstance(e, L.Var):
        ctx.err(path, "unresolved builder variable; build the program via ProgramBuilder")
        return None
    if isinstance(e, L.Lit):
        return e.val.ty
    if isinstance(e, L.Arg):
        if not (0 <= e.idx < len(env)):
            ctx.err(path, f"argument slot {e.idx} out of range (frame has {len(env)})")
            return None
        return env[e.idx]
    if isinstance(e, L.BinOp):
        lt = _expr_ty(ctx, e.lhs, env, path + ".lhs")
        rt = _expr_ty(ctx, e.rhs, env, path + ".rhs")
        if lt is None or rt is None:
            return None
        if e.op in L.ARITH_OPS:
            if lt != rt or not isinstance(lt, (IntT, RealT)):
                ctx.err(path, f"'{e.op}' needs two Ints or two Reals, got {lt!r} and {rt!r}")
                return None
            return lt
        if e.op in ("==", "!="):
            if lt != rt or not _scalar(lt):
                ctx.err(path, f"'{e.op}' compares two equal scalar types, got {lt!r} and {rt!r}")
                return None
            return BOOL
        if e.op in ("<", ">", "<=", ">="):
            if lt != rt or not isinstance(lt, (IntT, RealT)):
                ctx.err(path, f"'{e.op}' orders two Ints or two Reals, got {lt!r} and {rt!r}")
                return None
            return BOOL
        if e.op in L.BOOL_OPS:
            if not isinstance(lt, BoolT) or not isinstance(rt, BoolT):
                ctx.err(path, f"'{e.op}' needs two Bools, got {lt!r} and {rt!r}")
                return None
            return BOOL
        ctx.err(path, f"unknown operator '{e.op}'")
        return None
    if isinstance(e, L.Not):
        t = _expr_ty(ctx, e.e, env, path + ".e")
        if t is not None and not isinstance(t, BoolT):
            ctx.err(path, f"Not needs a Bool, got {t!r}")
            return None
        return BOOL if t is not None else None
    if isinstance(e, L.If):
        ct = _expr_ty(ctx, e.cond, env, path + ".cond")
        tt = _expr_ty(ctx, e.then, env, path + ".then")
        ft = _expr_ty(ctx, e.other, env, path + ".other")
        if ct is not None and not isinstance(ct, BoolT):
            ctx.err(path, f"If condition must be Bool, got {ct!r}")
        if tt is None or ft is None:
            return None
        if tt != ft:
            ctx.err(path, f"If branches disagree: {tt!r} vs {ft!r}")
            return None
        return tt
    if isinstance(e, L.Fst):
        t = _expr_ty(ctx, e.e, env, path + ".e")
        if t is None:
            return None
        if not isinstance(t, PairT):
            ctx.err(path, f"Fst needs a pair, got {t!r}")
            return None
        return t.fst
    if isinstance(e, L.Snd):
        t = _expr_ty(ctx, e.e, env, path + ".e")
        if t is None:
            return None
        if not isinstance(t, PairT):
            ctx.err(path, f"Snd needs a pair, got {t!r}")
            return None
        return t.snd
    if isinstance(e, L.MkPair):
        ft = _expr_ty(ctx, e.fst, env, path + ".fst")
        st = _expr_ty(ctx, e.snd, env, path + ".snd")
        if ft is None or st is None:
            return None
        return PairT(ft, st)
    ctx.err(path, f"unknown expression node {type(e).__name__}")
    return None


def _check_pin(ctx: _Ctx, pin: L.PinRef, env: list[Ty], path: str, analog_only: bool) -> None:
    if pin.bank not in ("a", "d"):
        ctx.err(path, f"unknown pin bank '{pin.bank}'")
        return
    if analog_only and pin.bank != "a":
        ctx.err(path, "analog operation needs an analog pin")
    t = _expr_ty(ctx, pin.expr, env, path + ".pin")
    if t is not None and not isinstance(t, IntT):
        ctx.err(path, f"pin index must be Int, got {t!r}")
    if isinstance(pin.expr, L.Lit) and isinstance(pin.expr.val.ty, IntT):
        idx = pin.expr.val.v
        count = ctx.limits.analog_pins if pin.bank == "a" else ctx.limits.digital_pins
        if not (0 <= idx < count):
            ctx.err(path, f"pin {pin.bank}{idx} outside board range 0..{count - 1}")


def _periph(ctx: _Ctx, idx: int, kind: str, path: str) -> bool:
    if not (0 <= idx < len(ctx.prog.periphs)):
        ctx.err(path, f"peripheral {idx} not declared")
        return False
    p = ctx.prog.periphs[idx]
    if p.kind != kind:
        ctx.err(path, f"peripheral {idx} is a {p.kind}, not a {kind}")
        return False
    return True


def _task_ty(ctx: _Ctx, t: L.TaskExpr, env: list[Ty], path: str) -> Optional[Ty]:
    prog = ctx.prog
    if isinstance(t, L.Rtrn):
        return _expr_ty(ctx, t.e, env, path + ".e")
    if isinstance(t, L.Rpeat):
        _task_ty(ctx, t.body, env, path + ".body")
        # A repeating task never yields a value of its own.
        return UNIT
    if isinstance(t, L.Delay):
        mt = _expr_ty(ctx, t.ms, env, path + ".ms")
        if mt is not None and not isinstance(mt, IntT):
            ctx.err(path, f"delay needs an Int millisecond count, got {mt!r}")
        return INT
    if isinstance(t, L.TAnd):
        lt = _task_ty(ctx, t.left, env, path + ".left")
        rt = _task_ty(ctx, t.right, env, path + ".right")
        if lt is None or rt is None:
            return None
        return PairT(lt, rt)
    if isinstance(t, L.TOr):
        lt = _task_ty(ctx, t.left, env, path + ".left")
        rt = _task_ty(ctx, t.right, env, path + ".right")
        if lt is None or rt is None:
            return None
        if lt != rt:
            ctx.err(path, f"parallel-or sides disagree: {lt!r} vs {rt!r}")
            return None
        return lt
    if isinstance(t, L.Step):
        lt = _task_ty(ctx, t.left, env, path + ".left")
        if not t.conts:
            ctx.err(path, "step needs at least one continuation")
            return None
        result: Optional[Ty] = None
        for i, c in enumerate(t.conts):
            cpath = f"{path}.conts[{i}]"
            if c.guard not in L.ALL_GUARDS:
                ctx.err(cpath, f"unknown guard '{c.guard}'")
                continue
            if c.guard in L.VALUEFUL_GUARDS:
                if lt is None:
                    continue
                inner = env + [lt]
                if c.pred is None:
                    ctx.err(cpath, "value guard needs a predicate")
                else:
                    pt = _expr_ty(ctx, c.pred, inner, cpath + ".pred")
                    if pt is not None and not isinstance(pt, BoolT):
                        ctx.err(cpath, f"guard predicate must be Bool, got {pt!r}")
                bt = _task_ty(ctx, c.body, inner, cpath + ".body")
            else:
                if c.pred is not None:
                    ctx.err(cpath, f"'{c.guard}' guard carries no predicate")
                bt = _task_ty(ctx, c.body, env, cpath + ".body")
            if bt is not None:
                if result is None:
                    result = bt
                elif bt != result:
                    ctx.err(cpath, f"continuation bodies disagree: {bt!r} vs {result!r}")
        return result
    if isinstance(t, L.Call):
        if not (0 <= t.fn < len(prog.functions)):
            ctx.err(path, f"function {t.fn} not declared")
            return None
        f = prog.functions[t.fn]
        if len(t.args) != len(f.params):
            ctx.err(path, f"function {t.fn} takes {len(f.params)} argument(s), got {len(t.args)}")
        for i, (a, pt) in enumerate(zip(t.args, f.params)):
            at = _expr_ty(ctx, a, env, f"{path}.args[{i}]")
            if at is not None and at != pt:
                ctx.err(f"{path}.args[{i}]", f"argument type {at!r} does not match parameter {pt!r}")
        return f.ret
    if isinstance(t, L.GetSds):
        if not (0 <= t.sds < len(prog.sdss)):
            ctx.err(path, f"SDS {t.sds} not declared")
            return None
        return prog.sdss[t.sds].ty
    if isinstance(t, L.SetSds):
        if not (0 <= t.sds < len(prog.sdss)):
            ctx.err(path, f"SDS {t.sds} not declared")
            return None
        et = _expr_ty(ctx, t.e, env, path + ".e")
        want = prog.sdss[t.sds].ty
        if et is not None and et != want:
            ctx.err(path, f"SDS {t.sds} stores {want!r}, cannot write {et!r}")
        return want
    if isinstance(t, L.ReadA):
        _check_pin(ctx, t.pin, env, path, analog_only=True)
        return INT
    if isinstance(t, L.WriteA):
        _check_pin(ctx, t.pin, env, path, analog_only=True)
        et = _expr_ty(ctx, t.e, env, path + ".e")
        if et is not None and not isinstance(et, IntT):
            ctx.err(path, f"analog write needs an Int, got {et!r}")
        return INT
    if isinstance(t, L.ReadD):
        _check_pin(ctx, t.pin, env, path, analog_only=False)
        return BOOL
    if isinstance(t, L.WriteD):
        _check_pin(ctx, t.pin, env, path, analog_only=False)
        et = _expr_ty(ctx, t.e, env, path + ".e")
        if et is not None and not isinstance(et, BoolT):
            ctx.err(path, f"digital write needs a Bool, got {et!r}")
        return BOOL
    if isinstance(t, L.DhtTemp):
        _periph(ctx, t.periph, "dht", path)
        return INT
    if isinstance(t, L.DhtHumid):
        _periph(ctx, t.periph, "dht", path)
        return INT
    if isinstance(t, L.LmDot):
        _periph(ctx, t.periph, "ledmatrix", path)
        for name, e, want in (("x", t.x, IntT), ("y", t.y, IntT), ("on", t.on, BoolT)):
            et = _expr_ty(ctx, e, env, f"{path}.{name}")
            if et is not None and not isinstance(et, want):
                ctx.err(f"{path}.{name}", f"matrix dot {name} has wrong type {et!r}")
        return UNIT
    if isinstance(t, L.LmIntensity):
        _periph(ctx, t.periph, "ledmatrix", path)
        et = _expr_ty(ctx, t.level, env, path + ".level")
        if et is not None and not isinstance(et, IntT):
            ctx.err(path, f"matrix intensity must be Int, got {et!r}")
        return UNIT
    if isinstance(t, L.LmClear):
        _periph(ctx, t.periph, "ledmatrix", path)
        return UNIT
    if isinstance(t, L.LmDisplay):
        _periph(ctx, t.periph, "ledmatrix", path)
        return UNIT
    ctx.err(path, f"unknown task node {type(t).__name__}")
    return None


def validate(prog: L.Program, limits: BoardLimits = DEFAULT_LIMITS) -> ValidationReport:
    ctx = _Ctx(prog, limits)

    if len(prog.functions) > MAX_IDS:
        ctx.err("functions", f"too many functions ({len(prog.functions)} > {MAX_IDS})")
    if len(prog.sdss) > MAX_IDS:
        ctx.err("sdss", f"too many SDSs ({len(prog.sdss)} > {MAX_IDS})")
    if len(prog.periphs) > MAX_IDS:
        ctx.err("periphs", f"too many peripherals ({len(prog.periphs)} > {MAX_IDS})")

    seen_keys: set[str] = set()
    for i, s in enumerate(prog.sdss):
        if s.init.ty != s.ty:
            ctx.err(f"sds[{i}]", f"initial value has type {s.init.ty!r}, declared {s.ty!r}")
        if s.key:
            if len(s.key) > MAX_SDS_KEY or not s.key.isprintable():
                ctx.err(f"sds[{i}]", "lifted key must be short printable text")
            if s.key in seen_keys:
                ctx.err(f"sds[{i}]", f"duplicate lifted key '{s.key}'")
            seen_keys.add(s.key)

    for i, p in enumerate(prog.periphs):
        if p.kind == "dht":
            if len(p.pins) != 1:
                ctx.err(f"periph[{i}]", "dht needs exactly one data pin")
            if p.model not in DHT_MODELS:
                ctx.err(f"periph[{i}]", f"unknown dht model '{p.model}'")
        elif p.kind == "ledmatrix":
            if len(p.pins) != 2:
                ctx.err(f"periph[{i}]", "ledmatrix needs data and clock pins")
        else:
            ctx.err(f"periph[{i}]", f"unknown peripheral kind '{p.kind}'")
        for pin in p.pins:
            if not (0 <= pin < limits.digital_pins):
                ctx.err(f"periph[{i}]", f"pin d{pin} outside board range")

    tails: set[int] = set()
    pure: set[int] = set()
    for i, f in enumerate(prog.functions):
        fpath = f"fun[{i}]"
        if len(f.params) > MAX_ARITY:
            ctx.err(fpath, f"arity {len(f.params)} exceeds limit {MAX_ARITY}")
        env = list(f.params)
        if isinstance(f.body, L.TaskExpr):
            bt = _task_ty(ctx, f.body, env, fpath + ".body")
            tails |= L.tail_call_ids(f.body)
        else:
            bt = _expr_ty(ctx, f.body, env, fpath + ".body")
            pure.add(i)
        if bt is not None and bt != f.ret:
            ctx.err(fpath, f"body has type {bt!r}, declared result {f.ret!r}")

    main_ty = _task_ty(ctx, prog.main, [], "main")

    ok = not ctx.diags
    return ValidationReport(
        ok=ok,
        diagnostics=ctx.diags,
        main_ty=main_ty,
        tail_ids=frozenset(tails),
        pure_funs=frozenset(pure),
    )
