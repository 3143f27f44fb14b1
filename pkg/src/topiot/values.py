"""Value domain shared by the task language, the device VM and the server.

Scalars are Int (32-bit two's-complement), Bool, Real and Unit; the only
compound shape is the pair.  Task values are three-state: no value yet, an
unstable value that may still change, or a stable value that is final.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Any, Optional

# --- types ------------------------------------------------------------------


class Ty:
    """Base class for static types."""

    __slots__ = ()

    def __repr__(self) -> str:
        return type(self).__name__


@dataclass(frozen=True, repr=False)
class IntT(Ty):
    pass


@dataclass(frozen=True, repr=False)
class BoolT(Ty):
    pass


@dataclass(frozen=True, repr=False)
class RealT(Ty):
    pass


@dataclass(frozen=True, repr=False)
class UnitT(Ty):
    pass


@dataclass(frozen=True)
class PairT(Ty):
    fst: Ty
    snd: Ty

    def __repr__(self) -> str:
        return f"PairT({self.fst!r}, {self.snd!r})"


INT = IntT()
BOOL = BoolT()
REAL = RealT()
UNIT = UnitT()


# --- dynamic values ---------------------------------------------------------

I32_MIN = -(2**31)
I32_MAX = 2**31 - 1


def wrap_i32(n: int) -> int:
    """Reduce an arbitrary Python int to 32-bit two's-complement."""
    n &= 0xFFFFFFFF
    return n - 0x100000000 if n >= 0x80000000 else n


def trunc_div_i32(a: int, b: int) -> int:
    # C-style: quotient truncates toward zero; INT_MIN / -1 wraps.
    q = a // b
    if (a % b != 0) and ((a < 0) != (b < 0)):
        q += 1
    return wrap_i32(q)


def round_f32(x: float) -> float:
    """Round a float to the nearest single-precision value."""
    return struct.unpack("<f", struct.pack("<f", x))[0]


@dataclass(frozen=True)
class Val:
    """A runtime value: the payload `v` interpreted under type `ty`.

    Int -> int, Bool -> bool, Real -> float, Unit -> None,
    Pair -> (Val, Val).
    """

    ty: Ty
    v: Any

    def __repr__(self) -> str:
        if isinstance(self.ty, UnitT):
            return "()"
        if isinstance(self.ty, PairT):
            return f"({self.v[0]!r}, {self.v[1]!r})"
        return repr(self.v)


def vint(n: int) -> Val:
    return Val(INT, wrap_i32(int(n)))


def vbool(b: bool) -> Val:
    return Val(BOOL, bool(b))


def vreal(x: float) -> Val:
    return Val(REAL, float(x))


def vunit() -> Val:
    return Val(UNIT, None)


def vpair(a: Val, b: Val) -> Val:
    return Val(PairT(a.ty, b.ty), (a, b))


def default_val(ty: Ty) -> Val:
    if isinstance(ty, IntT):
        return vint(0)
    if isinstance(ty, BoolT):
        return vbool(False)
    if isinstance(ty, RealT):
        return vreal(0.0)
    if isinstance(ty, UnitT):
        return vunit()
    if isinstance(ty, PairT):
        return vpair(default_val(ty.fst), default_val(ty.snd))
    raise ValueError(f"unknown type {ty!r}")


# --- task values ------------------------------------------------------------


@dataclass(frozen=True)
class TaskValue:
    """Three-state observable task value.

    val is None for the no-value state.  stable can only be True when a
    value is present; a stable value is final and never changes again.
    """

    val: Optional[Val]
    stable: bool = False

    def __post_init__(self) -> None:
        if self.val is None and self.stable:
            raise ValueError("no-value cannot be stable")

    @property
    def has_value(self) -> bool:
        return self.val is not None

    def __repr__(self) -> str:
        if self.val is None:
            return "NoValue"
        kind = "Stable" if self.stable else "Unstable"
        return f"{kind}({self.val!r})"


NOVALUE = TaskValue(None, False)


def unstable(v: Val) -> TaskValue:
    return TaskValue(v, False)


def stable(v: Val) -> TaskValue:
    return TaskValue(v, True)


def combine_and(left: TaskValue, right: TaskValue) -> TaskValue:
    """Parallel conjunction: a pair once both sides have a value, stable
    only when both are stable; otherwise no value."""
    if left.val is not None and right.val is not None:
        return TaskValue(vpair(left.val, right.val), left.stable and right.stable)
    return NOVALUE


def combine_or(left: TaskValue, right: TaskValue) -> TaskValue:
    """Parallel disjunction.  Clause order matters:

    1. a stable left value wins outright;
    2. otherwise a stable right value wins over an unstable left;
    3. otherwise a value-less left yields whatever the right reports;
    4. otherwise the (unstable) left value is reported.
    """
    if left.val is not None and left.stable:
        return TaskValue(left.val, True)
    if left.val is not None and right.val is not None and right.stable:
        return TaskValue(right.val, True)
    if left.val is None:
        return right
    return left


def legal_transition(old: TaskValue, new: TaskValue) -> bool:
    """Whether old -> new is a permitted observable task-value transition.

    No-value and unstable may move freely between each other (and to
    stable); a stable value is terminal: every later observation must be
    the identical stable value.
    """
    if old.stable:
        return new == old
    return True


class TransitionMonitor:
    """Records per-source task-value sequences and counts illegal moves."""

    def __init__(self) -> None:
        self.last: dict[Any, TaskValue] = {}
        self.violations: list[tuple[Any, TaskValue, TaskValue]] = []

    def observe(self, source: Any, tv: TaskValue) -> None:
        prev = self.last.get(source)
        if prev is not None and not legal_transition(prev, tv):
            self.violations.append((source, prev, tv))
        self.last[source] = tv

    def forget(self, source: Any) -> None:
        # A replaced tree node starts a fresh sequence.
        self.last.pop(source, None)


### JSON mapping (control port, HTTP API)

def val_to_json(v: Val):
    """Vals as plain JSON data: ints, bools and reals map to themselves,
    unit to null, pairs to two-element arrays."""
    x = v.v
    if isinstance(x, tuple):
        return [val_to_json(x[0]), val_to_json(x[1])]
    return x


def val_from_json(data) -> Val:
    if data is None:
        return vunit()
    if isinstance(data, bool):
        return vbool(data)
    if isinstance(data, int):
        return vint(data)
    if isinstance(data, float):
        return vreal(data)
    if isinstance(data, list) and len(data) == 2:
        return vpair(val_from_json(data[0]), val_from_json(data[1]))
    raise ValueError(f"no value shape for {data!r}")


def taskvalue_to_json(tv: TaskValue) -> dict:
    if tv.val is None:
        return {"kind": "novalue"}
    kind = "stable" if tv.stable else "unstable"
    return {"kind": kind, "value": val_to_json(tv.val)}
