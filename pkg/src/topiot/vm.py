"""Device virtual machine: runs bytecode images in a bounded node arena.

Mirrors the reference interpreter's cycle discipline exactly; the trace
equivalence suite holds the two against each other, so nothing here may
import the reference.  Code blocks run on a small operand stack; task
nodes live in an arena with a fixed node capacity shared by every task
on the device.

Arena policy:
- loading a task that does not fit raises OutOfArena to the caller (the
  protocol layer turns that into a rejection, nothing stays allocated);
- a repeating node that cannot re-instantiate this cycle keeps its old
  body and retries next cycle;
- running out mid-rewrite anywhere else fails the task, which frees all
  of its nodes and leaves it inert.

Cycle notifications, per task in ascending task id: one SdsWritten per
share write in write order (lifted shares only), then TaskValueChanged
when the root value differs from the last one reported, or TaskFailed
once on the cycle the task trapped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

from .board import RangeFault, VirtualBoard
from .bytecode import (Image, OP_ADD, OP_AND, OP_CALL, OP_DIV,
                       OP_EQ, OP_FST, OP_GE, OP_GT, OP_JMP, OP_JMPF, OP_LE,
                       OP_LT, OP_MKPAIR, OP_MUL, OP_NEQ, OP_NOT, OP_OR,
                       OP_PUSHARG, OP_PUSHLIT, OP_RETURN, OP_SND, OP_SUB,
                       OP_TAILCALL, OP_TASKNODE, N_AND, N_DELAY, N_DHTHUM,
                       N_DHTTEMP, N_GETSDS, N_LMCLEAR, N_LMDISPLAY, N_LMDOT,
                       N_LMINTENSITY, N_OR, N_READA, N_READD, N_RPEAT,
                       N_RTRN, N_SETSDS, N_STEP, N_WRITEA, N_WRITED)
from .values import (NOVALUE, IntT, TaskValue, Val, combine_and,
                     combine_or, round_f32, stable, trunc_div_i32, unstable,
                     vbool, vint, vpair, vreal, vunit)

DEFAULT_ARENA_NODES = 128
DEFAULT_CALL_DEPTH = 64

GUARD_VALUE, GUARD_STABLE, GUARD_UNSTABLE = "value", "stable", "unstable"
GUARD_NOVALUE, GUARD_ALWAYS = "novalue", "always"


class VmTrap(Exception):
    """Runtime task failure; the reason string travels in the failure
    notification and over the wire."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class OutOfArena(Exception):
    pass


class VmError(Exception):
    """Host-level misuse (duplicate task id, unknown task id)."""


### notifications

@dataclass(frozen=True)
class SdsWritten:
    task_id: int
    sds_id: int
    val: Val


@dataclass(frozen=True)
class TaskValueChanged:
    task_id: int
    value: TaskValue


@dataclass(frozen=True)
class TaskFailed:
    task_id: int
    reason: str


Notification = Union[SdsWritten, TaskValueChanged, TaskFailed]


class Arena:
    """Node budget shared across every task on a device."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.live = 0
        self.peak = 0

    def alloc(self) -> None:
        if self.live >= self.capacity:
            raise OutOfArena()
        self.live += 1
        if self.live > self.peak:
            self.peak = self.live


### runtime nodes

class VNode:
    __slots__ = ()

    def step(self, tk: "VmTask"):
        raise NotImplementedError

    def children(self) -> list["VNode"]:
        return []


@dataclass
class TailSig:
    fn: int
    args: tuple[Val, ...]


class VRtrn(VNode):
    __slots__ = ("value",)

    def __init__(self, value: Val):
        self.value = value

    def step(self, tk):
        return self, stable(self.value)


class VDelay(VNode):
    __slots__ = ("ms", "deadline", "done")

    def __init__(self, ms: int):
        self.ms = ms
        self.deadline: Optional[int] = None
        self.done: Optional[Val] = None

    def step(self, tk):
        if self.done is not None:
            return self, stable(self.done)
        if self.deadline is None:
            self.deadline = tk.now + max(0, self.ms)
        if tk.now >= self.deadline:
            self.done = vint(tk.now - self.deadline)
            return self, stable(self.done)
        return self, NOVALUE


class VRpeat(VNode):
    __slots__ = ("body_off", "env", "depth", "child", "restart_mark")

    def __init__(self, tk: "VmTask", body_off: int, env: tuple[Val, ...], depth: int):
        self.body_off = body_off
        self.env = env
        self.depth = depth
        self.child = tk.run_task_block(body_off, env, depth)
        self.restart_mark = -1

    def step(self, tk):
        rep, tv = self.child.step(tk)
        self.child = rep
        if tv.stable and self.restart_mark != tk.cycle_serial:
            self.restart_mark = tk.cycle_serial
            try:
                fresh = tk.run_task_block(self.body_off, self.env, self.depth)
            except OutOfArena:
                # keep the finished body one more cycle, retry next pass
                return self, NOVALUE
            tk.free(self.child)
            self.child = fresh
            rep, _ = self.child.step(tk)
            self.child = rep
        return self, NOVALUE

    def children(self):
        return [self.child]


class VPar(VNode):
    __slots__ = ("left", "right", "conj", "settled")

    def __init__(self, left: VNode, right: VNode, conj: bool):
        self.left: Optional[VNode] = left
        self.right: Optional[VNode] = right
        self.conj = conj
        self.settled: Optional[TaskValue] = None

    def step(self, tk):
        if self.settled is not None:
            return self, self.settled
        lrep, ltv = self.left.step(tk)
        self.left = lrep
        rrep, rtv = self.right.step(tk)
        self.right = rrep
        tv = combine_and(ltv, rtv) if self.conj else combine_or(ltv, rtv)
        if tv.stable:
            # final once stable; free both branches, the loser must not run on
            tk.free(self.left)
            tk.free(self.right)
            self.left = None
            self.right = None
            self.settled = tv
        return self, tv

    def children(self):
        return [c for c in (self.left, self.right) if c is not None]


class VStep(VNode):
    __slots__ = ("left", "cont_start", "count", "env", "depth")

    def __init__(self, left: VNode, cont_start: int, count: int,
                 env: tuple[Val, ...], depth: int):
        self.left = left
        self.cont_start = cont_start
        self.count = count
        self.env = env
        self.depth = depth

    def step(self, tk):
        lrep, ltv = self.left.step(tk)
        self.left = lrep
        hit = self._match(tk, ltv)
        if hit is None:
            return self, NOVALUE
        cont, inner = hit
        tk.free(self.left)
        tk.free_one(self)
        rep = tk.run_body_block(cont.body, inner, self.depth)
        if isinstance(rep, TailSig):
            return rep, NOVALUE
        return rep.step(tk)

    def _match(self, tk, tv: TaskValue):
        for ci in range(self.cont_start, self.cont_start + self.count):
            c = tk.image.conts[ci]
            if c.guard == GUARD_ALWAYS:
                return c, self.env
            if c.guard == GUARD_NOVALUE:
                if tv.val is None:
                    return c, self.env
                continue
            if tv.val is None:
                continue
            if c.guard == GUARD_STABLE and not tv.stable:
                continue
            if c.guard == GUARD_UNSTABLE and tv.stable:
                continue
            inner = self.env + (tv.val,)
            if tk.run_expr_block(c.pred, inner).v:
                return c, inner
        return None

    def children(self):
        return [self.left]


class VCall(VNode):
    __slots__ = ("fn", "env", "depth", "child", "rebind_mark", "pending",
                 "pure_value")

    def __init__(self, tk: "VmTask", fn: int, args: tuple[Val, ...], depth: int):
        if depth > tk.call_depth_limit:
            raise VmTrap("call-depth-exceeded")
        self.fn = fn
        self.env = args
        self.depth = depth
        self.rebind_mark = -1
        self.pending: Optional[TailSig] = None
        self.pure_value: Optional[Val] = None
        self.child: Optional[VNode] = None
        entry = tk.image.funs[fn]
        if not entry.pure:
            self.child = tk.run_task_block(entry.entry, args, depth)

    def _rebind(self, tk, sig: TailSig) -> None:
        self.fn = sig.fn
        self.env = sig.args
        self.pure_value = None
        self.rebind_mark = tk.cycle_serial
        entry = tk.image.funs[self.fn]
        if entry.pure:
            self.child = None
        else:
            self.child = tk.run_task_block(entry.entry, self.env, self.depth)

    def step(self, tk):
        if self.pending is not None and self.rebind_mark != tk.cycle_serial:
            sig, self.pending = self.pending, None
            self._rebind(tk, sig)
        if self.pending is not None:
            return self, NOVALUE
        if self.child is None:
            if self.pure_value is None:
                entry = tk.image.funs[self.fn]
                self.pure_value = tk.run_expr_block(entry.entry, self.env)
            return self, stable(self.pure_value)
        rep, tv = self.child.step(tk)
        if isinstance(rep, TailSig):
            # the chain between here and the fired call freed itself
            self.child = None
            if self.rebind_mark != tk.cycle_serial:
                self._rebind(tk, rep)
                if self.child is None:
                    if self.pure_value is None:
                        entry = tk.image.funs[self.fn]
                        self.pure_value = tk.run_expr_block(entry.entry, self.env)
                    return self, stable(self.pure_value)
                rep2, tv2 = self.child.step(tk)
                if isinstance(rep2, TailSig):
                    self.child = None
                    self.pending = rep2
                    return self, NOVALUE
                self.child = rep2
                return self, tv2
            self.pending = rep
            return self, NOVALUE
        self.child = rep
        return self, tv

    def children(self):
        return [self.child] if self.child is not None else []


class VGetSds(VNode):
    __slots__ = ("sid",)

    def __init__(self, sid: int):
        self.sid = sid

    def step(self, tk):
        return self, unstable(tk.sds[self.sid])


class VSetSds(VNode):
    __slots__ = ("sid", "val", "written")

    def __init__(self, sid: int, val: Val):
        self.sid = sid
        self.val = val
        self.written = False

    def step(self, tk):
        if not self.written:
            tk.sds[self.sid] = self.val
            tk.sds_writes.append((self.sid, self.val))
            self.written = True
        return self, stable(self.val)


class VPinRead(VNode):
    __slots__ = ("bank", "idx", "analog")

    def __init__(self, bank: str, idx: int, analog: bool):
        self.bank = bank
        self.idx = idx
        self.analog = analog

    def step(self, tk):
        if self.analog:
            return self, unstable(vint(tk.board.read_analog(self.idx)))
        return self, unstable(vbool(tk.board.read_digital(self.bank, self.idx)))


class VPinWrite(VNode):
    __slots__ = ("bank", "idx", "val", "analog", "written")

    def __init__(self, bank: str, idx: int, val: Val, analog: bool):
        self.bank = bank
        self.idx = idx
        self.val = val
        self.analog = analog
        self.written = False

    def step(self, tk):
        if not self.written:
            if self.analog:
                tk.board.write_analog(self.idx, self.val.v)
            else:
                tk.board.write_digital(self.bank, self.idx, self.val.v)
            self.written = True
        return self, stable(self.val)


class VDht(VNode):
    __slots__ = ("which",)

    def __init__(self, which: str):
        self.which = which

    def step(self, tk):
        v = tk.board.dht_temp() if self.which == "t" else tk.board.dht_humidity()
        return self, unstable(vint(v))


class VLm(VNode):
    __slots__ = ("op", "vals", "done")

    def __init__(self, op: str, vals: tuple):
        self.op = op
        self.vals = vals
        self.done = False

    def step(self, tk):
        if not self.done:
            if self.op == "dot":
                tk.board.dot(self.vals[0], self.vals[1], self.vals[2])
            elif self.op == "intensity":
                tk.board.set_intensity(self.vals[0])
            elif self.op == "clear":
                tk.board.clear()
            else:
                tk.board.show()
            self.done = True
        return self, stable(vunit())


### block execution

_BANKS = ("d", "a")


class VmTask:
    """One loaded task: its image, share store, and root node."""

    def __init__(self, image: Image, board: VirtualBoard, arena: Arena,
                 call_depth_limit: int = DEFAULT_CALL_DEPTH):
        self.image = image
        self.board = board
        self.arena = arena
        self.call_depth_limit = call_depth_limit
        self.sds: dict[int, Val] = {i: s.init for i, s in enumerate(image.sdss)}
        self.sds_writes: list[tuple[int, Val]] = []
        self.pending_server_writes: list[tuple[int, Val]] = []
        self.cycle_serial = 0
        self.now = 0
        self.live_nodes = 0
        self.peak_stack = 0
        self.failed: Optional[str] = None
        self.last_reported: Optional[TaskValue] = None
        self.last_value: Optional[TaskValue] = None  # raw, not deduplicated
        self.root: Optional[VNode] = None
        # instruction index: offset -> (position, instruction)
        instrs = _predecode(image.code)
        self._instrs = instrs
        self._pos_of = {ins.off: i for i, ins in enumerate(instrs)}

    ### allocation bookkeeping

    def alloc(self) -> None:
        self.arena.alloc()
        self.live_nodes += 1

    def free(self, node: Optional[VNode]) -> None:
        if node is None:
            return
        for c in node.children():
            self.free(c)
        self.free_one(node)

    def free_one(self, node: VNode) -> None:
        self.arena.live -= 1
        self.live_nodes -= 1

    def drop_all(self) -> None:
        """Release every node this task still holds (including any that a
        partial materialisation left unlinked)."""
        self.arena.live -= self.live_nodes
        self.live_nodes = 0
        self.root = None

    ### block runner

    def run_expr_block(self, off: int, env: tuple[Val, ...]) -> Val:
        v = self._run(off, env, 0)
        if not isinstance(v, Val):
            raise VmTrap("bad-block-result")
        return v

    def run_task_block(self, off: int, env: tuple[Val, ...], depth: int) -> VNode:
        v = self._run(off, env, depth)
        if not isinstance(v, VNode):
            raise VmTrap("bad-block-result")
        return v

    def run_body_block(self, off: int, env: tuple[Val, ...], depth: int):
        """Fired continuation body: may yield a rebind signal."""
        v = self._run(off, env, depth)
        if isinstance(v, Val):
            raise VmTrap("bad-block-result")
        return v

    def _run(self, off: int, env: tuple[Val, ...], depth: int):
        pos = self._pos_of.get(off)
        if pos is None:
            raise VmTrap("bad-entry")
        stack: list = []
        push = stack.append
        while True:
            ins = self._instrs[pos]
            pos += 1
            op = ins.opcode
            if op == OP_PUSHLIT:
                push(ins.a)
            elif op == OP_PUSHARG:
                if ins.a >= len(env):
                    raise VmTrap("bad-arg")
                push(env[ins.a])
            elif op == OP_RETURN:
                if len(stack) != 1:
                    raise VmTrap("bad-block-result")
                return stack[0]
            elif op == OP_JMP:
                pos = self._pos_of[ins.a]
            elif op == OP_JMPF:
                if not stack.pop().v:
                    pos = self._pos_of[ins.a]
            elif op == OP_CALL:
                args = tuple(stack[len(stack) - ins.b:])
                del stack[len(stack) - ins.b:]
                self.alloc()
                push(VCall(self, ins.a, args, depth + 1))
            elif op == OP_TAILCALL:
                args = tuple(stack[len(stack) - ins.b:])
                del stack[len(stack) - ins.b:]
                push(TailSig(ins.a, args))
            elif op == OP_TASKNODE:
                push(self._make_node(ins, stack, env, depth))
            else:
                b = stack.pop()
                a = stack.pop() if op != OP_NOT and op != OP_FST and op != OP_SND else None
                push(_apply_op(op, a, b))
            if len(stack) > self.peak_stack:
                self.peak_stack = len(stack)

    def _make_node(self, ins, stack: list, env: tuple[Val, ...], depth: int) -> VNode:
        kind = ins.a
        self.alloc()
        if kind == N_RTRN:
            return VRtrn(stack.pop())
        if kind == N_DELAY:
            return VDelay(stack.pop().v)
        if kind == N_RPEAT:
            return VRpeat(self, ins.b, env, depth)
        if kind == N_AND or kind == N_OR:
            right = stack.pop()
            left = stack.pop()
            return VPar(left, right, kind == N_AND)
        if kind == N_STEP:
            return VStep(stack.pop(), ins.b, ins.c, env, depth)
        if kind == N_GETSDS:
            return VGetSds(ins.b)
        if kind == N_SETSDS:
            return VSetSds(ins.b, stack.pop())
        if kind == N_READA:
            return VPinRead(_BANKS[ins.b], stack.pop().v, analog=True)
        if kind == N_WRITEA:
            val = stack.pop()
            return VPinWrite(_BANKS[ins.b], stack.pop().v, val, analog=True)
        if kind == N_READD:
            return VPinRead(_BANKS[ins.b], stack.pop().v, analog=False)
        if kind == N_WRITED:
            val = stack.pop()
            return VPinWrite(_BANKS[ins.b], stack.pop().v, val, analog=False)
        if kind == N_DHTTEMP:
            return VDht("t")
        if kind == N_DHTHUM:
            return VDht("h")
        if kind == N_LMDOT:
            on = stack.pop().v
            y = stack.pop().v
            x = stack.pop().v
            return VLm("dot", (x, y, on))
        if kind == N_LMINTENSITY:
            return VLm("intensity", (stack.pop().v,))
        if kind == N_LMCLEAR:
            return VLm("clear", ())
        return VLm("display", ())

    ### lifecycle

    def materialize_main(self) -> None:
        self.root = self.run_task_block(self.image.main_entry, (), 0)

    def push_sds(self, sid: int, val: Val) -> None:
        self.pending_server_writes.append((sid, val))

    def cycle(self, now: int) -> Optional[TaskValue]:
        if self.failed is not None:
            return None
        self.cycle_serial += 1
        self.now = now
        for sid, val in self.pending_server_writes:
            self.sds[sid] = val
        self.pending_server_writes.clear()
        self.sds_writes.clear()
        try:
            rep, tv = self.root.step(self)
            if isinstance(rep, TailSig):
                raise VmTrap("tail-outside-call")
            self.root = rep
        except VmTrap as t:
            self.failed = t.reason
            self.drop_all()
            self.last_value = None
            return None
        except RangeFault as t:
            self.failed = t.reason
            self.drop_all()
            self.last_value = None
            return None
        except OutOfArena:
            self.failed = "out-of-arena"
            self.drop_all()
            self.last_value = None
            return None
        self.last_value = tv
        return tv


@dataclass(frozen=True)
class _Ins:
    off: int
    opcode: int
    a: object = None
    b: int = 0
    c: int = 0


def _predecode(code: bytes) -> list[_Ins]:
    """Flatten the blob into executable form once, at load."""
    out = []
    p = 0
    n = len(code)
    while p < n:
        off = p
        op = code[p]
        p += 1
        if op == OP_PUSHLIT:
            val, p = _read_lit(code, p)
            out.append(_Ins(off, op, val))
        elif op == OP_PUSHARG:
            out.append(_Ins(off, op, code[p]))
            p += 1
        elif op in (OP_JMP, OP_JMPF):
            out.append(_Ins(off, op, struct.unpack_from("<H", code, p)[0]))
            p += 2
        elif op in (OP_CALL, OP_TAILCALL):
            out.append(_Ins(off, op, code[p], code[p + 1]))
            p += 2
        elif op == OP_TASKNODE:
            kind = code[p]
            p += 1
            if kind == N_RPEAT:
                b = struct.unpack_from("<H", code, p)[0]
                out.append(_Ins(off, op, kind, b))
                p += 2
            elif kind == N_STEP:
                b = struct.unpack_from("<H", code, p)[0]
                c = code[p + 2]
                out.append(_Ins(off, op, kind, b, c))
                p += 3
            elif kind in (N_RTRN, N_DELAY, N_AND, N_OR):
                out.append(_Ins(off, op, kind))
            else:
                out.append(_Ins(off, op, kind, code[p]))
                p += 1
        else:
            out.append(_Ins(off, op))
    return out


def _read_lit(code: bytes, p: int) -> tuple[Val, int]:
    tag = code[p]
    p += 1
    if tag == 0:
        return vint(struct.unpack_from("<i", code, p)[0]), p + 4
    if tag == 1:
        return vbool(code[p] != 0), p + 1
    if tag == 2:
        return vreal(struct.unpack_from("<f", code, p)[0]), p + 4
    return vunit(), p


def _apply_op(op: int, a: Optional[Val], b: Val) -> Val:
    if op == OP_NOT:
        return vbool(not b.v)
    if op == OP_FST:
        return b.v[0]
    if op == OP_SND:
        return b.v[1]
    if op == OP_ADD or op == OP_SUB or op == OP_MUL or op == OP_DIV:
        if isinstance(a.ty, IntT):
            if op == OP_ADD:
                return vint(a.v + b.v)
            if op == OP_SUB:
                return vint(a.v - b.v)
            if op == OP_MUL:
                return vint(a.v * b.v)
            if b.v == 0:
                raise VmTrap("div-by-zero")
            return Val(a.ty, trunc_div_i32(a.v, b.v))
        # device reals are single precision, rounded per operation
        if op == OP_ADD:
            return vreal(round_f32(a.v + b.v))
        if op == OP_SUB:
            return vreal(round_f32(a.v - b.v))
        if op == OP_MUL:
            return vreal(round_f32(a.v * b.v))
        if b.v == 0.0:
            raise VmTrap("div-by-zero")
        return vreal(round_f32(a.v / b.v))
    if op == OP_MKPAIR:
        return vpair(a, b)
    if op == OP_EQ:
        return vbool(a.v == b.v)
    if op == OP_NEQ:
        return vbool(a.v != b.v)
    if op == OP_LT:
        return vbool(a.v < b.v)
    if op == OP_GT:
        return vbool(a.v > b.v)
    if op == OP_LE:
        return vbool(a.v <= b.v)
    if op == OP_GE:
        return vbool(a.v >= b.v)
    if op == OP_AND:
        return vbool(a.v and b.v)
    if op == OP_OR:
        return vbool(a.v or b.v)
    raise VmTrap(f"bad-opcode:{op}")


### device

class DeviceVm:
    """A whole device: shared board, shared arena, many tasks."""

    def __init__(self, arena_nodes: int = DEFAULT_ARENA_NODES,
                 board: Optional[VirtualBoard] = None,
                 call_depth_limit: int = DEFAULT_CALL_DEPTH):
        self.board = board if board is not None else VirtualBoard()
        self.arena = Arena(arena_nodes)
        self.call_depth_limit = call_depth_limit
        self.tasks: dict[int, VmTask] = {}

    def load_task(self, task_id: int, image: Image) -> list[Notification]:
        """Materialise and run the task's first rewrite pass at the current
        board time.  Raises OutOfArena (nothing stays allocated) when the
        task does not fit; runtime traps load the task in failed state."""
        if task_id in self.tasks:
            raise VmError(f"task id {task_id} already loaded")
        t = VmTask(image, self.board, self.arena, self.call_depth_limit)
        t.now = self.board.now
        try:
            t.materialize_main()
        except OutOfArena:
            t.drop_all()
            raise
        except VmTrap as trap:
            t.failed = trap.reason
            t.drop_all()
            self.tasks[task_id] = t
            return [TaskFailed(task_id, trap.reason)]
        self.tasks[task_id] = t
        notes: list[Notification] = []
        self._run_one(task_id, t, self.board.now, notes)
        return notes

    def unload_task(self, task_id: int) -> None:
        t = self.tasks.pop(task_id, None)
        if t is None:
            raise VmError(f"no task {task_id}")
        t.free(t.root)
        t.drop_all()

    def unload_all(self) -> None:
        for tid in sorted(self.tasks):
            t = self.tasks.pop(tid)
            t.free(t.root)
            t.drop_all()

    def push_sds(self, task_id: int, sds_id: int, val: Val) -> None:
        t = self.tasks.get(task_id)
        if t is None:
            raise VmError(f"no task {task_id}")
        t.push_sds(sds_id, val)

    def eval_cycle(self, now: int) -> list[Notification]:
        """One rewrite pass for every task, ascending task id."""
        self.board.now = now
        notes: list[Notification] = []
        for tid in sorted(self.tasks):
            self._run_one(tid, self.tasks[tid], now, notes)
        return notes

    def _run_one(self, tid: int, t: VmTask, now: int,
                 notes: list[Notification]) -> None:
        if t.failed is not None:
            return
        tv = t.cycle(now)
        if t.failed is not None:
            notes.append(TaskFailed(tid, t.failed))
            return
        for sid, val in t.sds_writes:
            if t.image.sdss[sid].lifted:
                notes.append(SdsWritten(tid, sid, val))
        if tv != t.last_reported:
            notes.append(TaskValueChanged(tid, tv))
            t.last_reported = tv
