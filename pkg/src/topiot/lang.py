"""Task-language description: expression and task nodes, plus builders.

Programs are closed first-order descriptions: a list of top-level functions,
shared data sources (SDSs) and peripherals, and a main task.  Expressions are
pure and always terminate; tasks rewrite in small steps and may run forever.

Builders use host-level lambdas for binders (function parameters and step
continuations); `ProgramBuilder.build` resolves those placeholder variables
to positional argument slots, producing the canonical, serialisable form.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

from .values import BOOL, INT, REAL, UNIT, Ty, Val, vbool, vint, vpair, vreal, vunit

# --- expression nodes -------------------------------------------------------

ARITH_OPS = ("+", "-", "*", "/")
CMP_OPS = ("==", "!=", "<", ">", "<=", ">=")
BOOL_OPS = ("&", "|")


class Expr:
    """Base class for pure expressions."""

    __slots__ = ()

    # Operators build nodes; Python scalars are lifted to literals.
    def __add__(self, other) -> "Expr":
        return BinOp("+", self, lift(other))

    def __sub__(self, other) -> "Expr":
        return BinOp("-", self, lift(other))

    def __mul__(self, other) -> "Expr":
        return BinOp("*", self, lift(other))

    def __truediv__(self, other) -> "Expr":
        return BinOp("/", self, lift(other))

    def __radd__(self, other) -> "Expr":
        return BinOp("+", lift(other), self)

    def __rsub__(self, other) -> "Expr":
        return BinOp("-", lift(other), self)

    def __rmul__(self, other) -> "Expr":
        return BinOp("*", lift(other), self)

    def __rtruediv__(self, other) -> "Expr":
        return BinOp("/", lift(other), self)

    # Ordering operators too; == stays Python equality (dataclass tests
    # rely on it), use eq()/neq() for comparison nodes.  A reflected
    # comparison flips the operator, which preserves meaning.
    def __lt__(self, other) -> "Expr":
        return BinOp("<", self, lift(other))

    def __gt__(self, other) -> "Expr":
        return BinOp(">", self, lift(other))

    def __le__(self, other) -> "Expr":
        return BinOp("<=", self, lift(other))

    def __ge__(self, other) -> "Expr":
        return BinOp(">=", self, lift(other))


@dataclass(frozen=True)
class Lit(Expr):
    val: Val


@dataclass(frozen=True)
class Arg(Expr):
    """Positional slot in the enclosing argument frame (canonical form)."""

    idx: int


_var_ids = itertools.count()


@dataclass(frozen=True)
class Var(Expr):
    """Builder-only placeholder resolved to an Arg slot by build()."""

    uid: int = field(default_factory=lambda: next(_var_ids))


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class Not(Expr):
    e: Expr


@dataclass(frozen=True)
class If(Expr):
    cond: Expr
    then: Expr
    other: Expr


@dataclass(frozen=True)
class Fst(Expr):
    e: Expr


@dataclass(frozen=True)
class Snd(Expr):
    e: Expr


@dataclass(frozen=True)
class MkPair(Expr):
    fst: Expr
    snd: Expr


def lift(x) -> Expr:
    """Lift a Python scalar (or pass through an Expr) to an expression."""
    if isinstance(x, Expr):
        return x
    if isinstance(x, bool):
        return Lit(vbool(x))
    if isinstance(x, int):
        return Lit(vint(x))
    if isinstance(x, float):
        return Lit(vreal(x))
    if isinstance(x, Val):
        return Lit(x)
    raise TypeError(f"cannot lift {x!r} into an expression")


# Comparison/boolean helpers stay functions: overriding __eq__ would break
# dataclass equality, which serialisation round-trip tests rely on.


def eq(a, b) -> Expr:
    return BinOp("==", lift(a), lift(b))


def neq(a, b) -> Expr:
    return BinOp("!=", lift(a), lift(b))


def lt(a, b) -> Expr:
    return BinOp("<", lift(a), lift(b))


def gt(a, b) -> Expr:
    return BinOp(">", lift(a), lift(b))


def le(a, b) -> Expr:
    return BinOp("<=", lift(a), lift(b))


def ge(a, b) -> Expr:
    return BinOp(">=", lift(a), lift(b))


def band(a, b) -> Expr:
    return BinOp("&", lift(a), lift(b))


def bor(a, b) -> Expr:
    return BinOp("|", lift(a), lift(b))


def bnot(e) -> Expr:
    return Not(lift(e))


def ife(c, t, f) -> Expr:
    return If(lift(c), lift(t), lift(f))


def pair(a, b) -> Expr:
    return MkPair(lift(a), lift(b))


def fst(e) -> Expr:
    return Fst(lift(e))


def snd(e) -> Expr:
    return Snd(lift(e))


# --- pins -------------------------------------------------------------------


@dataclass(frozen=True)
class PinRef:
    """A pin operand: bank 'd' (digital) or 'a' (analog) plus an Int-typed
    index expression.  Static pins are literal indices; passing a pin as a
    task-function argument makes the index dynamic, the bank stays fixed at
    the use site.  Analog pins accept digital reads/writes, not vice versa.
    """

    bank: str
    expr: Expr


def dpin(i) -> PinRef:
    return PinRef("d", lift(i))


def apin(i) -> PinRef:
    return PinRef("a", lift(i))


def _as_pin(p, default_bank: str) -> PinRef:
    if isinstance(p, PinRef):
        return p
    return PinRef(default_bank, lift(p))


# --- task nodes -------------------------------------------------------------

GUARD_VALUE = "value"
GUARD_STABLE = "stable"
GUARD_UNSTABLE = "unstable"
GUARD_NOVALUE = "novalue"
GUARD_ALWAYS = "always"
VALUEFUL_GUARDS = (GUARD_VALUE, GUARD_STABLE, GUARD_UNSTABLE)
ALL_GUARDS = VALUEFUL_GUARDS + (GUARD_NOVALUE, GUARD_ALWAYS)

TRUE_LIT = Lit(vbool(True))


class TaskExpr:
    """Base class for task descriptions."""

    __slots__ = ()

    # Sequential sugar, encoded as Step nodes with constant-true guards.

    def bind(self, f: Callable[[Expr], "TaskExpr"]) -> "Step":
        """Continue with f(value) once this task's value is stable."""
        v = Var()
        return Step(self, (StepCont(GUARD_STABLE, TRUE_LIT, f(v), v),))

    def then(self, t: "TaskExpr") -> "Step":
        """Continue with t once stable, discarding the value."""
        return Step(self, (StepCont(GUARD_STABLE, TRUE_LIT, t, Var()),))

    def on_value(self, f: Callable[[Expr], "TaskExpr"]) -> "Step":
        """Continue with f(value) as soon as any value is reported."""
        v = Var()
        return Step(self, (StepCont(GUARD_VALUE, TRUE_LIT, f(v), v),))

    def on_value_then(self, t: "TaskExpr") -> "Step":
        """Continue with t as soon as any value is reported."""
        return Step(self, (StepCont(GUARD_VALUE, TRUE_LIT, t, Var()),))


@dataclass(frozen=True)
class StepCont:
    """One guarded continuation of a step combinator.

    guard 'value'/'stable'/'unstable' bind the observed payload as an extra
    argument slot visible to pred and body; 'novalue'/'always' bind nothing
    and carry no predicate.  binder is builder-state only and is None in
    canonical programs.
    """

    guard: str
    pred: Optional[Expr]
    body: TaskExpr
    binder: Optional[Var] = None


@dataclass(frozen=True)
class Rtrn(TaskExpr):
    e: Expr


@dataclass(frozen=True)
class Rpeat(TaskExpr):
    body: TaskExpr


@dataclass(frozen=True)
class Delay(TaskExpr):
    ms: Expr


@dataclass(frozen=True)
class TAnd(TaskExpr):
    """Parallel conjunction of two tasks."""

    left: TaskExpr
    right: TaskExpr


@dataclass(frozen=True)
class TOr(TaskExpr):
    """Parallel disjunction of two tasks."""

    left: TaskExpr
    right: TaskExpr


@dataclass(frozen=True)
class Step(TaskExpr):
    left: TaskExpr
    conts: tuple[StepCont, ...]


@dataclass(frozen=True)
class Call(TaskExpr):
    fn: int
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class GetSds(TaskExpr):
    sds: int


@dataclass(frozen=True)
class SetSds(TaskExpr):
    sds: int
    e: Expr


@dataclass(frozen=True)
class ReadA(TaskExpr):
    pin: PinRef


@dataclass(frozen=True)
class WriteA(TaskExpr):
    pin: PinRef
    e: Expr


@dataclass(frozen=True)
class ReadD(TaskExpr):
    pin: PinRef


@dataclass(frozen=True)
class WriteD(TaskExpr):
    pin: PinRef
    e: Expr


@dataclass(frozen=True)
class DhtTemp(TaskExpr):
    periph: int


@dataclass(frozen=True)
class DhtHumid(TaskExpr):
    periph: int


@dataclass(frozen=True)
class LmDot(TaskExpr):
    periph: int
    x: Expr
    y: Expr
    on: Expr


@dataclass(frozen=True)
class LmIntensity(TaskExpr):
    periph: int
    level: Expr


@dataclass(frozen=True)
class LmClear(TaskExpr):
    periph: int


@dataclass(frozen=True)
class LmDisplay(TaskExpr):
    periph: int


# --- top-level declarations -------------------------------------------------


@dataclass(frozen=True)
class FunDef:
    """Top-level function: fixed arity, no currying, body is either a task
    or a pure expression.  Functions may recurse; expression bodies cannot
    contain calls, so only task-level recursion exists."""

    params: tuple[Ty, ...]
    ret: Ty
    body: Union[Expr, TaskExpr]


@dataclass(frozen=True)
class SdsDef:
    """Shared data source declaration with a compile-time initial value.
    A non-empty key lifts the SDS: it is published to / writable by the
    server under that key."""

    ty: Ty
    init: Val
    key: str = ""

    @property
    def lifted(self) -> bool:
        return self.key != ""


@dataclass(frozen=True)
class PeriphDef:
    """Peripheral declaration.  kind 'dht' uses pins=(data,) and a model
    name; kind 'ledmatrix' uses pins=(data, clock)."""

    kind: str
    pins: tuple[int, ...]
    model: str = ""


@dataclass(frozen=True)
class Program:
    functions: tuple[FunDef, ...]
    sdss: tuple[SdsDef, ...]
    periphs: tuple[PeriphDef, ...]
    main: TaskExpr


# --- task builders ----------------------------------------------------------


def rtrn(e) -> Rtrn:
    return Rtrn(lift(e))


def rpeat(t: TaskExpr) -> Rpeat:
    return Rpeat(t)


def delay(ms) -> Delay:
    return Delay(lift(ms))


def tand(l: TaskExpr, r: TaskExpr) -> TAnd:
    return TAnd(l, r)


def tor(l: TaskExpr, r: TaskExpr) -> TOr:
    return TOr(l, r)


def tor_all(first: TaskExpr, *rest: TaskExpr) -> TaskExpr:
    t = first
    for r in rest:
        t = TOr(t, r)
    return t


def step(left: TaskExpr, *conts: StepCont) -> Step:
    return Step(left, tuple(conts))


def if_value(pred: Optional[Callable[[Expr], Expr]], body: Callable[[Expr], TaskExpr]) -> StepCont:
    v = Var()
    p = TRUE_LIT if pred is None else lift(pred(v))
    return StepCont(GUARD_VALUE, p, body(v), v)


def if_stable(pred: Optional[Callable[[Expr], Expr]], body: Callable[[Expr], TaskExpr]) -> StepCont:
    v = Var()
    p = TRUE_LIT if pred is None else lift(pred(v))
    return StepCont(GUARD_STABLE, p, body(v), v)


def if_unstable(pred: Optional[Callable[[Expr], Expr]], body: Callable[[Expr], TaskExpr]) -> StepCont:
    v = Var()
    p = TRUE_LIT if pred is None else lift(pred(v))
    return StepCont(GUARD_UNSTABLE, p, body(v), v)


def if_no_value(body: TaskExpr) -> StepCont:
    return StepCont(GUARD_NOVALUE, None, body, None)


def always(body: TaskExpr) -> StepCont:
    return StepCont(GUARD_ALWAYS, None, body, None)


def get_sds(s: "SdsRef") -> GetSds:
    return GetSds(int(s))


def set_sds(s: "SdsRef", e) -> SetSds:
    return SetSds(int(s), lift(e))


def read_a(p) -> ReadA:
    return ReadA(_as_pin(p, "a"))


def write_a(p, e) -> WriteA:
    return WriteA(_as_pin(p, "a"), lift(e))


def read_d(p) -> ReadD:
    return ReadD(_as_pin(p, "d"))


def write_d(p, e) -> WriteD:
    return WriteD(_as_pin(p, "d"), lift(e))


def temperature(p: "PeriphRef") -> DhtTemp:
    return DhtTemp(int(p))


def humidity(p: "PeriphRef") -> DhtHumid:
    return DhtHumid(int(p))


def lm_dot(p: "PeriphRef", x, y, on) -> LmDot:
    return LmDot(int(p), lift(x), lift(y), lift(on))


def lm_intensity(p: "PeriphRef", level) -> LmIntensity:
    return LmIntensity(int(p), lift(level))


def lm_clear(p: "PeriphRef") -> LmClear:
    return LmClear(int(p))


def lm_display(p: "PeriphRef") -> LmDisplay:
    return LmDisplay(int(p))


def call(f: "FunRef", *args) -> Call:
    return Call(int(f), tuple(lift(a) for a in args))


# --- program assembly -------------------------------------------------------


class FunRef(int):
    pass


class SdsRef(int):
    pass


class PeriphRef(int):
    pass


class BuildError(Exception):
    pass


class ProgramBuilder:
    """Accumulates top-level declarations and resolves binder placeholders.

    Usage: declare functions first (so recursive bodies can reference
    them), then define bodies, set main, and build().
    """

    def __init__(self) -> None:
        self._funs: list[Optional[tuple[tuple[Ty, ...], Ty, Union[Expr, TaskExpr], tuple[Var, ...]]]] = []
        self._params_of: dict[int, tuple[tuple[Ty, ...], Ty]] = {}
        self._sdss: list[SdsDef] = []
        self._periphs: list[PeriphDef] = []
        self._main: Optional[TaskExpr] = None

    def declare_fun(self, params: Sequence[Ty], ret: Ty) -> FunRef:
        self._funs.append(None)
        fref = FunRef(len(self._funs) - 1)
        self._params_of[int(fref)] = (tuple(params), ret)
        return fref

    def define(self, f: FunRef, body_fn: Callable[..., Union[Expr, TaskExpr]]) -> None:
        params, ret = self._params_of[int(f)]
        pvars = tuple(Var() for _ in params)
        body = body_fn(*pvars)
        if not isinstance(body, (Expr, TaskExpr)):
            raise BuildError(f"function {int(f)} body is not an expression or task")
        self._funs[int(f)] = (params, ret, body, pvars)

    def fun(self, params: Sequence[Ty], ret: Ty, body_fn: Callable[..., Union[Expr, TaskExpr]]) -> FunRef:
        """declare_fun + define in one go (for non-recursive helpers)."""
        f = self.declare_fun(params, ret)
        self.define(f, body_fn)
        return f

    def sds(self, ty: Ty, init: Val) -> SdsRef:
        self._sdss.append(SdsDef(ty, init))
        return SdsRef(len(self._sdss) - 1)

    def lift_sds(self, ty: Ty, init: Val, key: str) -> SdsRef:
        if not key:
            raise BuildError("lifted SDS needs a non-empty key")
        self._sdss.append(SdsDef(ty, init, key))
        return SdsRef(len(self._sdss) - 1)

    def dht(self, pin: int, model: str = "dht22") -> PeriphRef:
        self._periphs.append(PeriphDef("dht", (pin,), model))
        return PeriphRef(len(self._periphs) - 1)

    def ledmatrix(self, data_pin: int, clock_pin: int) -> PeriphRef:
        self._periphs.append(PeriphDef("ledmatrix", (data_pin, clock_pin)))
        return PeriphRef(len(self._periphs) - 1)

    def main(self, t: TaskExpr) -> None:
        self._main = t

    def build(self) -> Program:
        if self._main is None:
            raise BuildError("program has no main task")
        funs = []
        for i, f in enumerate(self._funs):
            if f is None:
                raise BuildError(f"function {i} declared but never defined")
            params, ret, body, pvars = f
            funs.append(FunDef(params, ret, _resolve(body, list(pvars))))
        return Program(tuple(funs), tuple(self._sdss), tuple(self._periphs), _resolve(self._main, []))


def _resolve(node, scope: list[Var]):
    """Replace Var placeholders with Arg slots; strip binder bookkeeping."""
    if isinstance(node, Var):
        for idx in range(len(scope) - 1, -1, -1):
            if scope[idx].uid == node.uid:
                return Arg(idx)
        raise BuildError("unbound builder variable (used outside its scope?)")
    if isinstance(node, Lit) or isinstance(node, Arg):
        return node
    if isinstance(node, BinOp):
        return BinOp(node.op, _resolve(node.lhs, scope), _resolve(node.rhs, scope))
    if isinstance(node, Not):
        return Not(_resolve(node.e, scope))
    if isinstance(node, If):
        return If(_resolve(node.cond, scope), _resolve(node.then, scope), _resolve(node.other, scope))
    if isinstance(node, Fst):
        return Fst(_resolve(node.e, scope))
    if isinstance(node, Snd):
        return Snd(_resolve(node.e, scope))
    if isinstance(node, MkPair):
        return MkPair(_resolve(node.fst, scope), _resolve(node.snd, scope))
    if isinstance(node, PinRef):
        return PinRef(node.bank, _resolve(node.expr, scope))
    if isinstance(node, Rtrn):
        return Rtrn(_resolve(node.e, scope))
    if isinstance(node, Rpeat):
        return Rpeat(_resolve(node.body, scope))
    if isinstance(node, Delay):
        return Delay(_resolve(node.ms, scope))
    if isinstance(node, TAnd):
        return TAnd(_resolve(node.left, scope), _resolve(node.right, scope))
    if isinstance(node, TOr):
        return TOr(_resolve(node.left, scope), _resolve(node.right, scope))
    if isinstance(node, Step):
        left = _resolve(node.left, scope)
        conts = []
        for c in node.conts:
            if c.guard in VALUEFUL_GUARDS:
                binder = c.binder if c.binder is not None else Var()
                inner = scope + [binder]
                pred = _resolve(c.pred, inner) if c.pred is not None else None
                conts.append(StepCont(c.guard, pred, _resolve(c.body, inner), None))
            else:
                conts.append(StepCont(c.guard, None, _resolve(c.body, scope), None))
        return Step(left, tuple(conts))
    if isinstance(node, Call):
        return Call(node.fn, tuple(_resolve(a, scope) for a in node.args))
    if isinstance(node, GetSds):
        return node
    if isinstance(node, SetSds):
        return SetSds(node.sds, _resolve(node.e, scope))
    if isinstance(node, ReadA):
        return ReadA(_resolve(node.pin, scope))
    if isinstance(node, WriteA):
        return WriteA(_resolve(node.pin, scope), _resolve(node.e, scope))
    if isinstance(node, ReadD):
        return ReadD(_resolve(node.pin, scope))
    if isinstance(node, WriteD):
        return WriteD(_resolve(node.pin, scope), _resolve(node.e, scope))
    if isinstance(node, (DhtTemp, DhtHumid, LmClear, LmDisplay)):
        return node
    if isinstance(node, LmDot):
        return LmDot(node.periph, _resolve(node.x, scope), _resolve(node.y, scope), _resolve(node.on, scope))
    if isinstance(node, LmIntensity):
        return LmIntensity(node.periph, _resolve(node.level, scope))
    raise BuildError(f"cannot resolve node {node!r}")


# --- structural helpers -----------------------------------------------------


def tail_call_ids(body: Union[Expr, TaskExpr]) -> set[int]:
    """Object ids of Call nodes in tail position of a function body.

    A call is in tail position when it is the entire remaining body: the
    body itself, or the tail of a step continuation body.  Children of
    parallel combinators and rpeat are never tail (the combinator node
    outlives them), and expressions cannot contain calls.
    """
    out: set[int] = set()
    if isinstance(body, Call):
        out.add(id(body))
    elif isinstance(body, Step):
        for c in body.conts:
            out |= tail_call_ids(c.body)
    return out


def walk_task(t: TaskExpr):
    """Yield every task node in t, depth-first, including t."""
    yield t
    if isinstance(t, Rpeat):
        yield from walk_task(t.body)
    elif isinstance(t, (TAnd, TOr)):
        yield from walk_task(t.left)
        yield from walk_task(t.right)
    elif isinstance(t, Step):
        yield from walk_task(t.left)
        for c in t.conts:
            yield from walk_task(c.body)
