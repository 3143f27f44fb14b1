"""Ready-made server workflows.

These are the trees `topiot serve` mounts and the integration tests
drive.  Each builder returns an unmounted node; combine them with the
parallel nodes if you want several at once.
"""

import functools
from typing import Callable, Optional

from ..catalog import (DOTS_42, blink_interactive, matrix_42_onboard,
                       matrix_42_stepwise, thermostat)
from ..values import TaskValue, vint, vunit
from .stask import (DeviceProxy, Editor, Idle, OnAction, ParAnd, ParLeft,
                    SNode, Step, Forever, WithShared)


class ServerAct(SNode):
    """Run one engine-side effect, then hold its result stably."""

    kind = "act"

    def __init__(self, fn: Callable):
        super().__init__()
        self.fn = fn
        self._result = None

    def compute(self, engine) -> TaskValue:
        if self._result is None:
            self._result = self.fn(engine) or vunit()
        return TaskValue(self._result, True)


class MatrixModel(SNode):
    """Paint the server's own picture of the matrix frame.

    The wire protocol never reports pixels back, so the dashboard's
    frame is this model, not device telemetry.
    """

    kind = "matrix"

    def __init__(self, dots):
        super().__init__()
        self.dots = tuple(dots)

    def mount(self, engine, path: str) -> None:
        super().mount(engine, path)
        for row in engine.ui_matrix:
            row[:] = [0] * len(row)
        for x, y in self.dots:
            engine.ui_matrix[y][x] = 1

    def compute(self, engine) -> TaskValue:
        return TaskValue(vunit(), True)


def thermostat_workflow(device: Optional[str] = None) -> SNode:
    """Setpoint editor next to the deployed bang-bang controller."""
    return WithShared("target", vint(250), lambda sds: ParAnd(
        Editor(vint(250), sds=sds, label="target"),
        DeviceProxy(thermostat(), device=device, label="thermostat")))


def blink_workflow(device: Optional[str] = None) -> SNode:
    """Blinker with a live period editor."""
    return WithShared("delay", vint(500), lambda sds: ParAnd(
        Editor(vint(500), sds=sds, label="delay"),
        DeviceProxy(blink_interactive(), device=device, label="blink")))


def matrix_workflow(stepwise: bool = False,
                    device: Optional[str] = None) -> SNode:
    """Draw "42": one shipped task, or a fan-out of one task per dot."""
    if stepwise:
        programs = matrix_42_stepwise()
        labels = ["clear"] + [f"dot{i}" for i in range(len(programs) - 1)]
    else:
        programs = [matrix_42_onboard()]
        labels = ["frame"]
    proxies = [DeviceProxy(p, device=device, label=lab)
               for p, lab in zip(programs, labels)]
    fanout = functools.reduce(ParAnd, proxies)
    return ParLeft(MatrixModel(DOTS_42), fanout)


def counter_workflow() -> SNode:
    """Server-only demo: a button that bumps a shared counter."""
    def body(sds):
        def bump(engine):
            sds.write(vint(sds.read().v + 1))

        def one_round():
            return Step(Idle(), [
                OnAction("increment", lambda _v: ServerAct(bump)),
            ])
        return Forever(one_round)
    return WithShared("count", vint(0), body)


def demo_workflow(device: Optional[str] = None) -> SNode:
    """Everything at once; what `serve` mounts by default."""
    return ParAnd(counter_workflow(),
                  ParAnd(thermostat_workflow(device),
                         blink_workflow(device)))


WORKFLOWS = {
    "thermostat": thermostat_workflow,
    "blink": blink_workflow,
    "matrix": matrix_workflow,
    "counter": lambda device=None: counter_workflow(),
    "demo": demo_workflow,
}
