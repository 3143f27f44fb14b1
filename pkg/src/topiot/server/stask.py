"""Server-side task tree.

Server tasks follow the same observable discipline as device tasks:
every node reports a task value each evaluation round, stability is
terminal, and a step that fires replaces itself with the continuation's
subtree in the same round.  The engine walks the tree lazily: a subtree
whose path nothing has touched since the last round just reports its
cached value.

Nodes are runtime objects, not descriptions; anything that must be
re-creatable (step continuations, forever bodies) is supplied as a
factory function.
"""

from typing import Callable, Optional

from .. import lang as L
from ..values import NOVALUE, TaskValue, Val, combine_and, combine_or
from .sds import ServerSds


def same_shape(a: Val, b: Val) -> bool:
    """Structural compatibility for editor and share writes."""
    x, y = a.v, b.v
    if isinstance(x, tuple) or isinstance(y, tuple):
        return (isinstance(x, tuple) and isinstance(y, tuple)
                and same_shape(x[0], y[0]) and same_shape(x[1], y[1]))
    if isinstance(x, bool) or isinstance(y, bool):
        return isinstance(x, bool) and isinstance(y, bool)
    if x is None or y is None:
        return x is None and y is None
    if isinstance(x, float) or isinstance(y, float):
        return isinstance(x, float) and isinstance(y, float)
    return isinstance(x, int) and isinstance(y, int)


class SNode:
    """Base node: path identity, cached value, dirty-aware tick."""

    kind = "node"

    def __init__(self) -> None:
        self.path = ""
        self.cached: Optional[TaskValue] = None

    ### engine contract

    def mount(self, engine, path: str) -> None:
        self.path = path

    def unmount(self, engine) -> None:
        engine.forget(self)

    def tick(self, engine) -> TaskValue:
        if self.cached is not None and not engine.is_dirty(self.path):
            return self.cached
        return self._report(engine, self.compute(engine))

    def compute(self, engine) -> TaskValue:
        raise NotImplementedError

    def _report(self, engine, tv: TaskValue) -> TaskValue:
        self.cached = tv
        engine.observe(self, tv)
        return tv

    def children(self) -> list:
        return []

    def descriptor(self) -> dict:
        from ..values import taskvalue_to_json
        d = {"path": self.path, "kind": self.kind,
             "value": taskvalue_to_json(self.cached or NOVALUE)}
        d.update(self.extra())
        return d

    def extra(self) -> dict:
        return {}

    def walk(self):
        yield self
        for c in self.children():
            yield from c.walk()


class ConstValue(SNode):
    kind = "const"

    def __init__(self, val: Val, stable: bool = True):
        super().__init__()
        self.tv = TaskValue(val, stable)

    def compute(self, engine) -> TaskValue:
        return self.tv


class Idle(SNode):
    """Reports no value forever; the usual inner for action-only steps."""

    kind = "idle"

    def compute(self, engine) -> TaskValue:
        return NOVALUE


class Editor(SNode):
    """An editable value, either free-standing or backed by a share.

    Editors never stabilise: the user can always edit again.
    """

    kind = "editor"

    def __init__(self, init: Val, sds: Optional[ServerSds] = None,
                 label: str = ""):
        super().__init__()
        self.label = label
        self.sds = sds
        self._value = sds.value if sds is not None else init
        self._cancel = None

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        if self.sds is not None:
            def on_write(val, origin):
                engine.mark_dirty(self.path)
            self._cancel = self.sds.subscribe(on_write)

    def unmount(self, engine) -> None:
        if self._cancel is not None:
            self._cancel()
            self._cancel = None
        super().unmount(engine)

    def current(self) -> Val:
        return self.sds.value if self.sds is not None else self._value

    def set(self, engine, val: Val) -> None:
        if not same_shape(val, self.current()):
            raise ValueError(f"editor {self.path} expects the shape of "
                             f"{self.current()!r}, got {val!r}")
        if self.sds is not None:
            self.sds.write(val, origin=self)
        else:
            self._value = val
        engine.mark_dirty(self.path)

    def compute(self, engine) -> TaskValue:
        return TaskValue(self.current(), False)

    def extra(self) -> dict:
        return {"editable": True, "label": self.label}


class _Par(SNode):
    def __init__(self, left: SNode, right: SNode):
        super().__init__()
        self.left = left
        self.right = right

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        self.left.mount(engine, path + "/0")
        self.right.mount(engine, path + "/1")

    def unmount(self, engine) -> None:
        self.left.unmount(engine)
        self.right.unmount(engine)
        super().unmount(engine)

    def children(self) -> list:
        return [self.left, self.right]


class ParAnd(_Par):
    kind = "and"

    def compute(self, engine) -> TaskValue:
        return combine_and(self.left.tick(engine), self.right.tick(engine))


class ParOr(_Par):
    kind = "or"

    def compute(self, engine) -> TaskValue:
        return combine_or(self.left.tick(engine), self.right.tick(engine))


class ParLeft(_Par):
    """Both sides run; the left side's value is the one reported."""

    kind = "left"

    def compute(self, engine) -> TaskValue:
        tv = self.left.tick(engine)
        self.right.tick(engine)
        return tv


class ParRight(_Par):
    kind = "right"

    def compute(self, engine) -> TaskValue:
        self.left.tick(engine)
        return self.right.tick(engine)


class OnValue:
    def __init__(self, pred: Callable[[Val], bool],
                 fn: Callable[[Val], SNode]):
        self.pred = pred
        self.fn = fn


class OnAction:
    """A labelled button.  needs_value gates it on the inner task."""

    def __init__(self, label: str, fn: Callable[[Optional[Val]], SNode],
                 needs_value: bool = False):
        self.label = label
        self.fn = fn
        self.needs_value = needs_value


class Step(SNode):
    """Run inner; fire the first matching continuation, replacing this
    node's behavior with the continuation's subtree (same round)."""

    kind = "step"

    def __init__(self, inner: SNode, conts: list):
        super().__init__()
        self.inner = inner
        self.conts = conts
        self.fired: Optional[SNode] = None
        self._gen = 0

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        self.inner.mount(engine, path + "/0")

    def unmount(self, engine) -> None:
        if self.fired is not None:
            self.fired.unmount(engine)
        else:
            self.inner.unmount(engine)
        super().unmount(engine)

    def children(self) -> list:
        return [self.fired] if self.fired is not None else [self.inner]

    def compute(self, engine) -> TaskValue:
        if self.fired is not None:
            return self.fired.tick(engine)
        tv = self.inner.tick(engine)
        if tv.val is not None:
            for cont in self.conts:
                if isinstance(cont, OnValue) and cont.pred(tv.val):
                    self._fire(engine, cont.fn(tv.val))
                    return self.fired.tick(engine)
        return NOVALUE

    def _fire(self, engine, node: SNode) -> None:
        self.inner.unmount(engine)
        self._gen += 1
        self.fired = node
        node.mount(engine, f"{self.path}/g{self._gen}")
        engine.mark_dirty(self.path)
        engine.rewrites += 1

    ### actions (engine routes HTTP here by path)

    def actions(self) -> list:
        if self.fired is not None:
            return []
        enabled_ok = self.inner.cached is not None and \
            self.inner.cached.val is not None
        return [{"label": c.label, "enabled": (not c.needs_value) or enabled_ok}
                for c in self.conts if isinstance(c, OnAction)]

    def act(self, engine, label: str) -> None:
        if self.fired is not None:
            raise LookupError(f"step {self.path} already fired")
        tv = self.inner.cached or NOVALUE
        for cont in self.conts:
            if isinstance(cont, OnAction) and cont.label == label:
                if cont.needs_value and tv.val is None:
                    raise ValueError(f"action {label!r} needs a value")
                self._fire(engine, cont.fn(tv.val))
                return
        raise LookupError(f"no action {label!r} at {self.path}")

    def extra(self) -> dict:
        return {"actions": self.actions()}


class Forever(SNode):
    """Restart the body whenever it stabilises."""

    kind = "forever"

    def __init__(self, factory: Callable[[], SNode]):
        super().__init__()
        self.factory = factory
        self.body: Optional[SNode] = None
        self._gen = 0

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        self._spawn(engine)

    def _spawn(self, engine) -> None:
        self._gen += 1
        self.body = self.factory()
        self.body.mount(engine, f"{self.path}/g{self._gen}")

    def unmount(self, engine) -> None:
        if self.body is not None:
            self.body.unmount(engine)
        super().unmount(engine)

    def children(self) -> list:
        return [self.body] if self.body is not None else []

    def compute(self, engine) -> TaskValue:
        tv = self.body.tick(engine)
        if tv.stable:
            self.body.unmount(engine)
            engine.rewrites += 1
            self._spawn(engine)
            self.body.tick(engine)
        return NOVALUE


class MapValue(SNode):
    kind = "map"

    def __init__(self, inner: SNode, fn: Callable[[Val], Val]):
        super().__init__()
        self.inner = inner
        self.fn = fn

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        self.inner.mount(engine, path + "/0")

    def unmount(self, engine) -> None:
        self.inner.unmount(engine)
        super().unmount(engine)

    def children(self) -> list:
        return [self.inner]

    def compute(self, engine) -> TaskValue:
        tv = self.inner.tick(engine)
        if tv.val is None:
            return tv
        return TaskValue(self.fn(tv.val), tv.stable)


class ShareValue(SNode):
    """Mirror the inner task's value into a share (on change)."""

    kind = "share"

    def __init__(self, sds: ServerSds, inner: SNode):
        super().__init__()
        self.sds = sds
        self.inner = inner
        self._last = None

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        self.inner.mount(engine, path + "/0")

    def unmount(self, engine) -> None:
        self.inner.unmount(engine)
        super().unmount(engine)

    def children(self) -> list:
        return [self.inner]

    def compute(self, engine) -> TaskValue:
        tv = self.inner.tick(engine)
        if tv.val is not None and tv.val != self._last:
            self._last = tv.val
            self.sds.write(tv.val, origin=self)
        return tv


class WithShared(SNode):
    """Create (or join) a named share, then build the body around it."""

    kind = "withshared"

    def __init__(self, key: str, init: Val,
                 body_fn: Callable[[ServerSds], SNode]):
        super().__init__()
        self.key = key
        self.init = init
        self.body_fn = body_fn
        self.body: Optional[SNode] = None
        self.sds: Optional[ServerSds] = None

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        self.sds = engine.sdss.ensure(self.key, self.init)
        self.body = self.body_fn(self.sds)
        self.body.mount(engine, path + "/0")

    def unmount(self, engine) -> None:
        if self.body is not None:
            self.body.unmount(engine)
        super().unmount(engine)

    def children(self) -> list:
        return [self.body] if self.body is not None else []

    def compute(self, engine) -> TaskValue:
        return self.body.tick(engine)


class DeviceProxy(SNode):
    """A device task lifted into the server tree.

    The program's lifted shares bind to server shares of the same key:
    device writes flow up into them, server writes flow down, and the
    origin token keeps a device from being echoed its own update.  The
    proxy's task value mirrors what the device last reported.
    """

    kind = "device"

    def __init__(self, program: L.Program, device: Optional[str] = None,
                 label: str = ""):
        super().__init__()
        self.program = program
        self.device_pref = device
        self.label = label
        self.tv = NOVALUE
        self.failure: Optional[str] = None
        self.state = "waiting"      # waiting | sent | running | failed
        self.device_id: Optional[str] = None
        self.task_id: Optional[int] = None
        self.image_bytes: Optional[bytes] = None
        self.bound: dict[int, ServerSds] = {}
        self._cancels: list = []

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        engine.attach_proxy(self)

    def unmount(self, engine) -> None:
        engine.detach_proxy(self)
        for cancel in self._cancels:
            cancel()
        self._cancels.clear()
        super().unmount(engine)

    def compute(self, engine) -> TaskValue:
        return self.tv

    def extra(self) -> dict:
        return {"label": self.label, "state": self.state,
                "device": self.device_id, "taskId": self.task_id,
                "failure": self.failure}
