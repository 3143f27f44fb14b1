"""One-line textual rendering of task programs.

The layout is stable and deterministic: functions print as f0, f1, ... in
declaration order; binder names a1, a2, ... are assigned in print order by
a single global counter.  Every continuation binder slot consumes a
number even when the compact arrow form hides it, so numbering never
depends on how a step happens to render.

Step rendering:
- single stably-guarded continuation with a constant-true predicate
  prints as ``>>= \\aN.(body)``, or ``>>| (body)`` when the body is a
  call that ignores the binder (the common loop-back tail);
- the value-guard analogues are ``>>~`` and ``>>..``;
- anything else falls back to the explicit continuation list ``>>* [...]``.
"""

from __future__ import annotations

from typing import Union

from . import lang as L
from .values import BoolT, IntT, PairT, RealT, UnitT, Val

# Expression precedence levels, loosest first.
_LVL_OR = 1
_LVL_AND = 2
_LVL_CMP = 3
_LVL_ADD = 4
_LVL_MUL = 5
_LVL_NOT = 6
_LVL_ATOM = 7

_BINOP_LVL = {
    "|": _LVL_OR, "&": _LVL_AND,
    "==": _LVL_CMP, "!=": _LVL_CMP, "<": _LVL_CMP, ">": _LVL_CMP,
    "<=": _LVL_CMP, ">=": _LVL_CMP,
    "+": _LVL_ADD, "-": _LVL_ADD, "*": _LVL_MUL, "/": _LVL_MUL,
}


def _grouped(s: str) -> bool:
    """True when s is one parenthesised group already."""
    if not (s.startswith("(") and s.endswith(")")):
        return False
    depth = 0
    for i, ch in enumerate(s):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                return i == len(s) - 1
    return False


def _uses_arg(node, idx: int) -> bool:
    """Whether the (absolute) frame slot idx is read anywhere below node."""
    if isinstance(node, L.Arg):
        return node.idx == idx
    if isinstance(node, L.Lit):
        return False
    if isinstance(node, L.BinOp):
        return _uses_arg(node.lhs, idx) or _uses_arg(node.rhs, idx)
    if isinstance(node, L.Not):
        return _uses_arg(node.e, idx)
    if isinstance(node, L.If):
        return any(_uses_arg(x, idx) for x in (node.cond, node.then, node.other))
    if isinstance(node, (L.Fst, L.Snd)):
        return _uses_arg(node.e, idx)
    if isinstance(node, L.MkPair):
        return _uses_arg(node.fst, idx) or _uses_arg(node.snd, idx)
    if isinstance(node, L.PinRef):
        return _uses_arg(node.expr, idx)
    if isinstance(node, L.Rtrn):
        return _uses_arg(node.e, idx)
    if isinstance(node, L.Rpeat):
        return _uses_arg(node.body, idx)
    if isinstance(node, L.Delay):
        return _uses_arg(node.ms, idx)
    if isinstance(node, (L.TAnd, L.TOr)):
        return _uses_arg(node.left, idx) or _uses_arg(node.right, idx)
    if isinstance(node, L.Step):
        if _uses_arg(node.left, idx):
            return True
        for c in node.conts:
            if c.pred is not None and _uses_arg(c.pred, idx):
                return True
            if _uses_arg(c.body, idx):
                return True
        return False
    if isinstance(node, L.Call):
        return any(_uses_arg(a, idx) for a in node.args)
    if isinstance(node, L.SetSds):
        return _uses_arg(node.e, idx)
    if isinstance(node, (L.ReadA, L.ReadD)):
        return _uses_arg(node.pin, idx)
    if isinstance(node, (L.WriteA, L.WriteD)):
        return _uses_arg(node.pin, idx) or _uses_arg(node.e, idx)
    if isinstance(node, L.LmDot):
        return any(_uses_arg(x, idx) for x in (node.x, node.y, node.on))
    if isinstance(node, L.LmIntensity):
        return _uses_arg(node.level, idx)
    return False


class _Printer:
    def __init__(self, prog: L.Program):
        self.prog = prog
        self.counter = 0

    def fresh(self) -> str:
        self.counter += 1
        return f"a{self.counter}"

    # -- expressions

    def lit(self, v: Val) -> str:
        if isinstance(v.ty, UnitT):
            return "()"
        if isinstance(v.ty, BoolT):
            return "True" if v.v else "False"
        if isinstance(v.ty, PairT):
            return f"({self.lit(v.v[0])}, {self.lit(v.v[1])})"
        return repr(v.v)

    def expr(self, e: L.Expr, scope: list[str], lvl: int = 0) -> str:
        if isinstance(e, L.Lit):
            return self.lit(e.val)
        if isinstance(e, L.Arg):
            return scope[e.idx]
        if isinstance(e, L.BinOp):
            mine = _BINOP_LVL[e.op]
            s = (f"{self.expr(e.lhs, scope, mine)} {e.op} "
                 f"{self.expr(e.rhs, scope, mine + 1)}")
            return f"({s})" if mine < lvl else s
        if isinstance(e, L.Not):
            s = f"Not {self.expr(e.e, scope, _LVL_ATOM)}"
            return f"({s})" if lvl > _LVL_NOT else s
        if isinstance(e, L.If):
            return (f"(If {self.expr(e.cond, scope, _LVL_ATOM)} "
                    f"{self.expr(e.then, scope, _LVL_ATOM)} "
                    f"{self.expr(e.other, scope, _LVL_ATOM)})")
        if isinstance(e, L.Fst):
            return f"(fst {self.expr(e.e, scope, _LVL_ATOM)})"
        if isinstance(e, L.Snd):
            return f"(snd {self.expr(e.e, scope, _LVL_ATOM)})"
        if isinstance(e, L.MkPair):
            return f"({self.expr(e.fst, scope)}, {self.expr(e.snd, scope)})"
        raise ValueError(f"cannot print expression {e!r}")

    def arg_atom(self, e: L.Expr, scope: list[str]) -> str:
        """A call argument: bare when atomic, parenthesised otherwise."""
        s = self.expr(e, scope, _LVL_ATOM)
        if isinstance(e, (L.Lit, L.Arg)) or s.startswith("("):
            return s
        return f"({s})"

    # -- identifiers

    def pin(self, p: L.PinRef, scope: list[str]) -> str:
        bank = p.bank.upper()
        if isinstance(p.expr, L.Lit):
            return f"{bank}{p.expr.val.v}"
        return f"{bank}[{self.expr(p.expr, scope)}]"

    def sds_name(self, sid: int) -> str:
        d = self.prog.sdss[sid]
        return d.key if d.key else f"s{sid}"

    def periph_name(self, pid: int) -> str:
        return f"p{pid}"

    # -- tasks

    def task(self, t: L.TaskExpr, scope: list[str]) -> str:
        if isinstance(t, L.Rtrn):
            return f"(rtrn {self.expr(t.e, scope, _LVL_ATOM)})"
        if isinstance(t, L.Delay):
            return f"(delay {self.expr(t.ms, scope, _LVL_ATOM)})"
        if isinstance(t, L.Rpeat):
            return f"(rpeat {self.task(t.body, scope)})"
        if isinstance(t, L.TAnd):
            return f"({self.task(t.left, scope)} .&&. {self.task(t.right, scope)})"
        if isinstance(t, L.TOr):
            return f"({self.task(t.left, scope)} .||. {self.task(t.right, scope)})"
        if isinstance(t, L.Step):
            return self.step(t, scope)
        if isinstance(t, L.Call):
            return self.call(t, scope)
        if isinstance(t, L.GetSds):
            return f"getSds({self.sds_name(t.sds)})"
        if isinstance(t, L.SetSds):
            return f"setSds({self.sds_name(t.sds)}, {self.expr(t.e, scope)})"
        if isinstance(t, L.ReadA):
            return f"readA({self.pin(t.pin, scope)})"
        if isinstance(t, L.WriteA):
            return f"writeA({self.pin(t.pin, scope)}, {self.expr(t.e, scope)})"
        if isinstance(t, L.ReadD):
            return f"readD({self.pin(t.pin, scope)})"
        if isinstance(t, L.WriteD):
            return f"writeD({self.pin(t.pin, scope)}, {self.expr(t.e, scope)})"
        if isinstance(t, L.DhtTemp):
            return f"temperature({self.periph_name(t.periph)})"
        if isinstance(t, L.DhtHumid):
            return f"humidity({self.periph_name(t.periph)})"
        if isinstance(t, L.LmDot):
            return (f"LMDot({self.periph_name(t.periph)}, {self.expr(t.x, scope)}, "
                    f"{self.expr(t.y, scope)}, {self.expr(t.on, scope)})")
        if isinstance(t, L.LmIntensity):
            return f"LMIntensity({self.periph_name(t.periph)}, {self.expr(t.level, scope)})"
        if isinstance(t, L.LmClear):
            return f"LMClear({self.periph_name(t.periph)})"
        if isinstance(t, L.LmDisplay):
            return f"LMDisplay({self.periph_name(t.periph)})"
        raise ValueError(f"cannot print task {t!r}")

    def call(self, t: L.Call, scope: list[str]) -> str:
        name = f"f{t.fn}"
        if not t.args:
            return f"({name})"
        if len(t.args) == 1:
            return f"({name} {self.arg_atom(t.args[0], scope)})"
        inner = ", ".join(self.expr(a, scope) for a in t.args)
        return f"({name} ({inner}))"

    def step(self, t: L.Step, scope: list[str]) -> str:
        left = self.task(t.left, scope)
        c = t.conts[0]
        compactable = (
            len(t.conts) == 1
            and c.guard in (L.GUARD_STABLE, L.GUARD_VALUE)
            and c.pred == L.TRUE_LIT
        )
        if compactable:
            name = self.fresh()
            slot = len(scope)
            if isinstance(c.body, L.Call) and not _uses_arg(c.body, slot):
                op = ">>|" if c.guard == L.GUARD_STABLE else ">>.."
                return f"{left} {op} {self.task(c.body, scope + [name])}"
            op = ">>=" if c.guard == L.GUARD_STABLE else ">>~"
            body = self.task(c.body, scope + [name])
            if not _grouped(body):
                body = f"({body})"
            return f"{left} {op} \\{name}.{body}"
        parts = []
        for c in t.conts:
            if c.guard in L.VALUEFUL_GUARDS:
                name = self.fresh()
                inner = scope + [name]
                label = {"value": "IfValue", "stable": "IfStable",
                         "unstable": "IfUnstable"}[c.guard]
                parts.append(f"{label} (\\{name}.{self.expr(c.pred, inner)}) "
                             f"{self._group(self.task(c.body, inner))}")
            elif c.guard == L.GUARD_NOVALUE:
                parts.append(f"IfNoValue {self._group(self.task(c.body, scope))}")
            else:
                parts.append(f"Always {self._group(self.task(c.body, scope))}")
        return f"{left} >>* [{', '.join(parts)}]"

    @staticmethod
    def _group(s: str) -> str:
        return s if _grouped(s) else f"({s})"

    # -- top level

    def render(self) -> str:
        out = []
        for i, p in enumerate(self.prog.periphs):
            pins = " ".join(f"D{n}" for n in p.pins)
            model = f" {p.model}" if p.model else ""
            out.append(f"{p.kind} p{i} {pins}{model} in ")
        for i, s in enumerate(self.prog.sdss):
            out.append(f"sds {self.sds_name(i)} = {self.lit(s.init)} in ")
        for i, f in enumerate(self.prog.functions):
            names = [self.fresh() for _ in f.params]
            if not names:
                header = f"f{i}"
            elif len(names) == 1:
                header = f"f{i} {names[0]}"
            else:
                header = f"f{i} ({', '.join(names)})"
            if isinstance(f.body, L.TaskExpr):
                body = self.task(f.body, names)
            else:
                body = self.expr(f.body, names)
            out.append(f"let {header} = {body} in ")
        out.append(self.task(self.prog.main, []))
        return "".join(out)


def pretty(prog: L.Program) -> str:
    """Render a whole program to its canonical one-line form."""
    return _Printer(prog).render()


def pretty_task(t: L.TaskExpr, scope: Union[list[str], None] = None,
                prog: Union[L.Program, None] = None) -> str:
    """Render a task fragment (scope names positional for Arg slots)."""
    p = prog if prog is not None else L.Program((), (), (), t)
    return _Printer(p).task(t, scope or [])
