"""Reference interpreter: small-step task rewriting over the description tree.

This is the executable semantics.  The device VM must produce the same
per-cycle root value trace for any validated program; tests hold the two
implementations against each other, so nothing here may depend on the
bytecode path.

Cycle discipline (shared with the VM):
- one rewrite pass per cycle; a fired continuation's body is materialised
  and evaluated within the same pass;
- a repeating node re-instantiates at most once per cycle;
- a tail call rebinds its call node at most once per cycle, further
  requests defer to the next cycle;
- stable values latch: once stable, a node reports the identical value
  forever and performs no further effects.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Union

from . import lang as L
from .values import (
    NOVALUE,
    IntT,
    TaskValue,
    TransitionMonitor,
    Val,
    stable,
    trunc_div_i32,
    unstable,
    vbool,
    vint,
    vpair,
    vreal,
    vunit,
)

DEFAULT_CALL_DEPTH = 64


class TaskTrap(Exception):
    """Raised when a task hits a runtime failure (its fourth, terminal
    channel, distinct from the three task-value states)."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


# --- expression evaluation ---------------------------------------------------


def eval_expr(e: L.Expr, env: tuple[Val, ...]) -> Val:
    """Evaluate a pure expression against an argument frame.

    Total except for division by zero, which traps.  Int arithmetic wraps
    at 32 bits; Real arithmetic is double precision here (the VM rounds to
    single precision, which is why equivalence corpora stick to Int/Bool).
    """
    if isinstance(e, L.Lit):
        return e.val
    if isinstance(e, L.Arg):
        return env[e.idx]
    if isinstance(e, L.BinOp):
        a = eval_expr(e.lhs, env)
        b = eval_expr(e.rhs, env)
        op = e.op
        if op in L.ARITH_OPS:
            if isinstance(a.ty, IntT):
                if op == "+":
                    return vint(a.v + b.v)
                if op == "-":
                    return vint(a.v - b.v)
                if op == "*":
                    return vint(a.v * b.v)
                if b.v == 0:
                    raise TaskTrap("div-by-zero")
                return Val(a.ty, trunc_div_i32(a.v, b.v))
            if op == "+":
                return vreal(a.v + b.v)
            if op == "-":
                return vreal(a.v - b.v)
            if op == "*":
                return vreal(a.v * b.v)
            if b.v == 0.0:
                raise TaskTrap("div-by-zero")
            return vreal(a.v / b.v)
        if op == "==":
            return vbool(a.v == b.v)
        if op == "!=":
            return vbool(a.v != b.v)
        if op == "<":
            return vbool(a.v < b.v)
        if op == ">":
            return vbool(a.v > b.v)
        if op == "<=":
            return vbool(a.v <= b.v)
        if op == ">=":
            return vbool(a.v >= b.v)
        if op == "&":
            return vbool(a.v and b.v)
        if op == "|":
            return vbool(a.v or b.v)
        raise TaskTrap(f"bad-op:{op}")
    if isinstance(e, L.Not):
        return vbool(not eval_expr(e.e, env).v)
    if isinstance(e, L.If):
        c = eval_expr(e.cond, env)
        return eval_expr(e.then if c.v else e.other, env)
    if isinstance(e, L.Fst):
        return eval_expr(e.e, env).v[0]
    if isinstance(e, L.Snd):
        return eval_expr(e.e, env).v[1]
    if isinstance(e, L.MkPair):
        return vpair(eval_expr(e.fst, env), eval_expr(e.snd, env))
    raise TaskTrap(f"bad-expr:{type(e).__name__}")


def match_continuation(
    conts: tuple[L.StepCont, ...], tv: TaskValue, env: tuple[Val, ...]
) -> Optional[tuple[L.StepCont, tuple[Val, ...]]]:
    """First continuation whose guard accepts tv; returns it with the frame
    its body must be instantiated under (payload appended for value
    guards).  None when no guard accepts."""
    for c in conts:
        if c.guard == L.GUARD_ALWAYS:
            return c, env
        if c.guard == L.GUARD_NOVALUE:
            if tv.val is None:
                return c, env
            continue
        if tv.val is None:
            continue
        if c.guard == L.GUARD_STABLE and not tv.stable:
            continue
        if c.guard == L.GUARD_UNSTABLE and tv.stable:
            continue
        inner = env + (tv.val,)
        if eval_expr(c.pred, inner).v:
            return c, inner
    return None


# --- world -------------------------------------------------------------------


class ReferenceWorld:
    """Pins, DHT readings, LED matrix and the task-local SDS store.

    Mirrors the virtual board: analog levels are 0..1023, a digital read
    of an analog pin thresholds at 512, DHT readings are integral
    deci-units, the matrix has a framebuffer that LMDisplay copies to the
    visible frame.
    """

    def __init__(self, digital_pins: int = 16, analog_pins: int = 8,
                 matrix_w: int = 8, matrix_h: int = 8):
        self.digital = [False] * digital_pins
        self.analog = [0] * analog_pins
        self.temp_deci = 0
        self.hum_deci = 0
        self.matrix_w = matrix_w
        self.matrix_h = matrix_h
        self.framebuffer = [[False] * matrix_w for _ in range(matrix_h)]
        self.displayed = [[False] * matrix_w for _ in range(matrix_h)]
        self.intensity = 8
        self.sds: dict[int, Val] = {}
        self.write_log: list[tuple[int, str, int, object]] = []
        self.now = 0

    def read_d(self, bank: str, idx: int) -> bool:
        if bank == "a":
            self._check_a(idx)
            return self.analog[idx] >= 512
        self._check_d(idx)
        return self.digital[idx]

    def write_d(self, bank: str, idx: int, val: bool) -> None:
        if bank == "a":
            self._check_a(idx)
            self.analog[idx] = 1023 if val else 0
        else:
            self._check_d(idx)
            self.digital[idx] = val
        self.write_log.append((self.now, bank + "w", idx, val))

    def read_a(self, idx: int) -> int:
        self._check_a(idx)
        return self.analog[idx]

    def write_a(self, idx: int, val: int) -> None:
        self._check_a(idx)
        self.analog[idx] = max(0, min(1023, val))
        self.write_log.append((self.now, "aw", idx, val))

    def lm_dot(self, x: int, y: int, on: bool) -> None:
        if not (0 <= x < self.matrix_w and 0 <= y < self.matrix_h):
            raise TaskTrap("matrix-range")
        self.framebuffer[y][x] = on

    def lm_intensity(self, level: int) -> None:
        if not (0 <= level <= 15):
            raise TaskTrap("intensity-range")
        self.intensity = level

    def lm_clear(self) -> None:
        for row in self.framebuffer:
            for x in range(self.matrix_w):
                row[x] = False

    def lm_display(self) -> None:
        self.displayed = [list(row) for row in self.framebuffer]

    def _check_d(self, idx: int) -> None:
        if not (0 <= idx < len(self.digital)):
            raise TaskTrap("pin-range")

    def _check_a(self, idx: int) -> None:
        if not (0 <= idx < len(self.analog)):
            raise TaskTrap("pin-range")


# --- runtime nodes -----------------------------------------------------------

_serials = itertools.count(1)


@dataclass
class TailSig:
    """Signal from a fired tail call to its owning call node."""

    fn: int
    args: tuple[Val, ...]


class _Node:
    __slots__ = ("serial",)

    def __init__(self) -> None:
        self.serial = next(_serials)

    def step(self, rt: "RefTask") -> tuple[Union["_Node", TailSig], TaskValue]:
        raise NotImplementedError

    def children(self) -> list["_Node"]:
        return []


class _Rtrn(_Node):
    """Operand expressions evaluate at materialisation (the VM computes
    them on its stack before the node exists); world effects wait for the
    first step.  Expressions cannot read the world, so only trap timing
    rides on this, and both routes agree on it."""

    __slots__ = ("value",)

    def __init__(self, expr: L.Expr, env: tuple[Val, ...]):
        super().__init__()
        self.value = eval_expr(expr, env)

    def step(self, rt: "RefTask"):
        return self, stable(self.value)


class _Delay(_Node):
    __slots__ = ("ms", "deadline", "done")

    def __init__(self, ms_expr: L.Expr, env: tuple[Val, ...]):
        super().__init__()
        self.ms = eval_expr(ms_expr, env).v
        self.deadline: Optional[int] = None
        self.done: Optional[Val] = None

    def step(self, rt: "RefTask"):
        if self.done is not None:
            return self, stable(self.done)
        if self.deadline is None:
            # anchored at the first pass that sees the node, not creation
            self.deadline = rt.now + max(0, self.ms)
        if rt.now >= self.deadline:
            self.done = vint(rt.now - self.deadline)
            return self, stable(self.done)
        return self, NOVALUE


class _Rpeat(_Node):
    __slots__ = ("template", "env", "child", "restart_mark", "depth")

    def __init__(self, template: L.TaskExpr, env: tuple[Val, ...], depth: int, rt: "RefTask"):
        super().__init__()
        self.template = template
        self.env = env
        self.depth = depth
        self.child = rt.materialize(template, env, depth)
        self.restart_mark = -1

    def step(self, rt: "RefTask"):
        rep, tv = self.child.step(rt)
        assert not isinstance(rep, TailSig)
        self.child = rep
        rt.observe(self.child, tv)
        if tv.stable and self.restart_mark != rt.cycle_serial:
            self.restart_mark = rt.cycle_serial
            old = self.child
            fresh = rt.materialize(self.template, self.env, self.depth)
            rt.release(old)
            self.child = fresh
            rep, tv2 = self.child.step(rt)
            assert not isinstance(rep, TailSig)
            self.child = rep
            rt.observe(self.child, tv2)
        return self, NOVALUE

    def children(self):
        return [self.child]


class _Par(_Node):
    __slots__ = ("left", "right", "conj", "settled")

    def __init__(self, left: _Node, right: _Node, conj: bool):
        super().__init__()
        self.left: Optional[_Node] = left
        self.right: Optional[_Node] = right
        self.conj = conj
        self.settled: Optional[TaskValue] = None

    def step(self, rt: "RefTask"):
        from .values import combine_and, combine_or

        if self.settled is not None:
            return self, self.settled
        lrep, ltv = self.left.step(rt)
        assert not isinstance(lrep, TailSig)
        self.left = lrep
        rt.observe(self.left, ltv)
        rrep, rtv = self.right.step(rt)
        assert not isinstance(rrep, TailSig)
        self.right = rrep
        rt.observe(self.right, rtv)
        tv = combine_and(ltv, rtv) if self.conj else combine_or(ltv, rtv)
        if tv.stable:
            # A stable combination is final: drop both branches so a late
            # stabilisation on the losing side cannot flip the value.
            rt.release(self.left)
            rt.release(self.right)
            self.left = None
            self.right = None
            self.settled = tv
        return self, tv

    def children(self):
        return [c for c in (self.left, self.right) if c is not None]


class _Step(_Node):
    __slots__ = ("left", "conts", "env", "depth")

    def __init__(self, left: _Node, conts: tuple[L.StepCont, ...], env: tuple[Val, ...], depth: int):
        super().__init__()
        self.left = left
        self.conts = conts
        self.env = env
        self.depth = depth

    def step(self, rt: "RefTask"):
        lrep, ltv = self.left.step(rt)
        assert not isinstance(lrep, TailSig)
        self.left = lrep
        rt.observe(self.left, ltv)
        hit = match_continuation(self.conts, ltv, self.env)
        if hit is None:
            return self, NOVALUE
        cont, inner = hit
        # Fire: this node and the finished left subtree are freed, the
        # continuation body takes their place and runs in the same pass.
        rt.release(self.left)
        rt.release_one(self)
        rep = rt.materialize_body(cont.body, inner, self.depth)
        if isinstance(rep, TailSig):
            return rep, NOVALUE
        return rep.step(rt)

    def children(self):
        return [self.left]


class _Call(_Node):
    __slots__ = ("fn", "env", "child", "depth", "rebind_mark", "pending", "pure_value")

    def __init__(self, fn: int, args: tuple[Val, ...], depth: int, rt: "RefTask"):
        super().__init__()
        if depth > rt.call_depth_limit:
            raise TaskTrap("call-depth-exceeded")
        self.fn = fn
        self.env = args
        self.depth = depth
        self.rebind_mark = -1
        self.pending: Optional[TailSig] = None
        self.pure_value: Optional[Val] = None
        self.child: Optional[_Node] = None
        body = rt.prog.functions[fn].body
        if isinstance(body, L.TaskExpr):
            self.child = rt.materialize(body, args, depth=depth)

    def _rebind(self, rt: "RefTask", sig: TailSig) -> None:
        self.fn = sig.fn
        self.env = sig.args
        self.pure_value = None
        self.rebind_mark = rt.cycle_serial
        body = rt.prog.functions[self.fn].body
        if isinstance(body, L.TaskExpr):
            self.child = rt.materialize(body, self.env, depth=self.depth)
        else:
            self.child = None

    def step(self, rt: "RefTask"):
        if self.pending is not None and self.rebind_mark != rt.cycle_serial:
            sig, self.pending = self.pending, None
            self._rebind(rt, sig)
        if self.pending is not None:
            return self, NOVALUE
        if self.child is None:
            # Pure function body: evaluates once, immediately stable.
            if self.pure_value is None:
                self.pure_value = eval_expr(rt.prog.functions[self.fn].body, self.env)
            return self, stable(self.pure_value)
        rep, tv = self.child.step(rt)
        if isinstance(rep, TailSig):
            # The chain from here to the fired call freed itself on the
            # way up; nothing of the old body remains allocated.
            self.child = None
            if self.rebind_mark != rt.cycle_serial:
                self._rebind(rt, rep)
                if self.child is None:
                    if self.pure_value is None:
                        self.pure_value = eval_expr(rt.prog.functions[self.fn].body, self.env)
                    return self, stable(self.pure_value)
                rep2, tv2 = self.child.step(rt)
                if isinstance(rep2, TailSig):
                    self.child = None
                    self.pending = rep2
                    return self, NOVALUE
                self.child = rep2
                rt.observe(self.child, tv2)
                return self, tv2
            self.pending = rep
            return self, NOVALUE
        self.child = rep
        rt.observe(self.child, tv)
        return self, tv

    def children(self):
        return [self.child] if self.child is not None else []


class _GetSds(_Node):
    __slots__ = ("sid",)

    def __init__(self, sid: int):
        super().__init__()
        self.sid = sid

    def step(self, rt: "RefTask"):
        return self, unstable(rt.world.sds[self.sid])


class _SetSds(_Node):
    __slots__ = ("sid", "val", "written")

    def __init__(self, sid: int, expr: L.Expr, env: tuple[Val, ...]):
        super().__init__()
        self.sid = sid
        self.val = eval_expr(expr, env)
        self.written = False

    def step(self, rt: "RefTask"):
        if not self.written:
            rt.world.sds[self.sid] = self.val
            rt.sds_writes.append((self.sid, self.val))
            self.written = True
        return self, stable(self.val)


class _PinRead(_Node):
    __slots__ = ("bank", "idx", "analog")

    def __init__(self, bank: str, pin_expr: L.Expr, env: tuple[Val, ...], analog: bool):
        super().__init__()
        self.bank = bank
        self.idx = eval_expr(pin_expr, env).v
        self.analog = analog

    def step(self, rt: "RefTask"):
        if self.analog:
            return self, unstable(vint(rt.world.read_a(self.idx)))
        return self, unstable(vbool(rt.world.read_d(self.bank, self.idx)))


class _PinWrite(_Node):
    __slots__ = ("bank", "idx", "val", "analog", "written")

    def __init__(self, bank: str, pin_expr: L.Expr, val_expr: L.Expr,
                 env: tuple[Val, ...], analog: bool):
        super().__init__()
        self.bank = bank
        self.idx = eval_expr(pin_expr, env).v
        self.val = eval_expr(val_expr, env)
        self.analog = analog
        self.written = False

    def step(self, rt: "RefTask"):
        if not self.written:
            if self.analog:
                rt.world.write_a(self.idx, self.val.v)
            else:
                rt.world.write_d(self.bank, self.idx, self.val.v)
            self.written = True
        return self, stable(self.val)


class _DhtRead(_Node):
    __slots__ = ("which",)

    def __init__(self, which: str):
        super().__init__()
        self.which = which

    def step(self, rt: "RefTask"):
        v = rt.world.temp_deci if self.which == "t" else rt.world.hum_deci
        return self, unstable(vint(v))


class _LmOp(_Node):
    __slots__ = ("op", "vals", "done")

    def __init__(self, op: str, exprs: tuple[L.Expr, ...], env: tuple[Val, ...]):
        super().__init__()
        self.op = op
        self.vals = [eval_expr(e, env).v for e in exprs]
        self.done = False

    def step(self, rt: "RefTask"):
        if not self.done:
            if self.op == "dot":
                rt.world.lm_dot(self.vals[0], self.vals[1], self.vals[2])
            elif self.op == "intensity":
                rt.world.lm_intensity(self.vals[0])
            elif self.op == "clear":
                rt.world.lm_clear()
            else:
                rt.world.lm_display()
            self.done = True
        return self, stable(vunit())


# --- task instance -----------------------------------------------------------


class RefTask:
    """One running task instance over a reference world."""

    def __init__(self, prog: L.Program, world: Optional[ReferenceWorld] = None,
                 call_depth_limit: int = DEFAULT_CALL_DEPTH,
                 monitor: Optional[TransitionMonitor] = None):
        self.prog = prog
        self.world = world if world is not None else ReferenceWorld()
        self.call_depth_limit = call_depth_limit
        self.monitor = monitor
        self.tails = set()
        for f in prog.functions:
            self.tails |= L.tail_call_ids(f.body)
        for i, s in enumerate(prog.sdss):
            self.world.sds.setdefault(i, s.init)
        self.cycle_serial = 0
        self.now = 0
        self.live_nodes = 0
        self.peak_nodes = 0
        self.sds_writes: list[tuple[int, Val]] = []
        self.pending_server_writes: list[tuple[int, Val]] = []
        self.failed: Optional[str] = None
        self.root: Optional[_Node] = None
        try:
            self.root = self.materialize(prog.main, ())
        except TaskTrap as t:
            self.failed = t.reason

    # -- allocation bookkeeping (mirrors the VM arena for the conservation
    # and constant-space properties; memory itself is garbage collected).

    def _alloc(self) -> None:
        self.live_nodes += 1
        self.peak_nodes = max(self.peak_nodes, self.live_nodes)

    def release(self, node: Optional[_Node]) -> None:
        if node is None:
            return
        for c in node.children():
            self.release(c)
        self.release_one(node)

    def release_one(self, node: _Node) -> None:
        self.live_nodes -= 1
        self.forget(node)

    def forget(self, node: _Node) -> None:
        if self.monitor is not None:
            self.monitor.forget(node.serial)

    def observe(self, node: _Node, tv: TaskValue) -> None:
        if self.monitor is not None:
            self.monitor.observe(node.serial, tv)

    # -- materialisation

    def materialize(self, t: L.TaskExpr, env: tuple[Val, ...], depth: int = 0) -> _Node:
        node = self._build(t, env, depth)
        return node

    def materialize_body(self, t: L.TaskExpr, env: tuple[Val, ...], depth: int = 0):
        """Materialise a fired continuation body; a marked tail call becomes
        a rebind signal instead of a node."""
        if isinstance(t, L.Call) and id(t) in self.tails:
            args = tuple(eval_expr(a, env) for a in t.args)
            return TailSig(t.fn, args)
        return self._build(t, env, depth)

    def _build(self, t: L.TaskExpr, env: tuple[Val, ...], depth: int) -> _Node:
        self._alloc()
        if isinstance(t, L.Rtrn):
            return _Rtrn(t.e, env)
        if isinstance(t, L.Delay):
            return _Delay(t.ms, env)
        if isinstance(t, L.Rpeat):
            return _Rpeat(t.body, env, depth, self)
        if isinstance(t, L.TAnd):
            return _Par(self._build(t.left, env, depth), self._build(t.right, env, depth), True)
        if isinstance(t, L.TOr):
            return _Par(self._build(t.left, env, depth), self._build(t.right, env, depth), False)
        if isinstance(t, L.Step):
            return _Step(self._build(t.left, env, depth), t.conts, env, depth)
        if isinstance(t, L.Call):
            args = tuple(eval_expr(a, env) for a in t.args)
            return _Call(t.fn, args, depth + 1, self)
        if isinstance(t, L.GetSds):
            return _GetSds(t.sds)
        if isinstance(t, L.SetSds):
            return _SetSds(t.sds, t.e, env)
        if isinstance(t, L.ReadA):
            return _PinRead(t.pin.bank, t.pin.expr, env, analog=True)
        if isinstance(t, L.WriteA):
            return _PinWrite(t.pin.bank, t.pin.expr, t.e, env, analog=True)
        if isinstance(t, L.ReadD):
            return _PinRead(t.pin.bank, t.pin.expr, env, analog=False)
        if isinstance(t, L.WriteD):
            return _PinWrite(t.pin.bank, t.pin.expr, t.e, env, analog=False)
        if isinstance(t, L.DhtTemp):
            return _DhtRead("t")
        if isinstance(t, L.DhtHumid):
            return _DhtRead("h")
        if isinstance(t, L.LmDot):
            return _LmOp("dot", (t.x, t.y, t.on), env)
        if isinstance(t, L.LmIntensity):
            return _LmOp("intensity", (t.level,), env)
        if isinstance(t, L.LmClear):
            return _LmOp("clear", (), env)
        if isinstance(t, L.LmDisplay):
            return _LmOp("display", (), env)
        raise TaskTrap(f"bad-task:{type(t).__name__}")

    # -- cycles

    def push_sds(self, sid: int, val: Val) -> None:
        """Queue a server-side share write; applied at the next cycle start."""
        self.pending_server_writes.append((sid, val))

    def cycle(self, now: int) -> Optional[TaskValue]:
        """Run one rewrite pass at virtual time `now` (ms, monotonic).
        Returns the root task value, or None once the task has failed."""
        if self.failed is not None:
            return None
        assert now >= self.now, "time cannot run backwards"
        self.cycle_serial += 1
        self.now = now
        self.world.now = now
        for sid, val in self.pending_server_writes:
            self.world.sds[sid] = val
        self.pending_server_writes.clear()
        self.sds_writes.clear()
        try:
            rep, tv = self.root.step(self)
            assert not isinstance(rep, TailSig), "tail call outside a call node"
            self.root = rep
        except TaskTrap as t:
            self.failed = t.reason
            self.release(self.root)
            self.root = None
            return None
        self.observe(self.root, tv)
        return tv


def reference_step(task: RefTask, now: int) -> Optional[TaskValue]:
    """One rewrite pass of a reference task (alias for RefTask.cycle)."""
    return task.cycle(now)
