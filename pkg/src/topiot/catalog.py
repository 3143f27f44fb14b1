"""Built-in demo programs.

Each builder returns a validated Program.  These cover every language
construct between them and double as the fixture set for the interpreter,
compiler, VM and end-to-end tests.
"""

from __future__ import annotations

from .lang import (
    Program,
    ProgramBuilder,
    apin,
    band,
    bnot,
    call,
    delay,
    eq,
    fst,
    get_sds,
    gt,
    humidity,
    if_stable,
    if_value,
    ife,
    lm_clear,
    lm_display,
    lm_dot,
    lt,
    neq,
    read_a,
    read_d,
    rpeat,
    rtrn,
    set_sds,
    snd,
    step,
    tand,
    temperature,
    tor,
    tor_all,
    write_d,
)
from .validate import validate
from .values import BOOL, INT, UNIT, PairT, vbool, vint, vpair

BUILTIN_LED = 3
BUTTON_A = 4

# "42" on an 8x8 matrix: a four, a gap column, a two.
DOTS_42 = (
    (0, 5), (0, 4), (0, 3), (0, 2), (1, 2), (2, 2), (2, 3), (2, 1), (2, 0),
    (4, 5), (5, 5), (6, 4), (6, 3), (5, 2), (4, 1), (4, 0), (5, 0), (6, 0),
)


def _built(pb: ProgramBuilder) -> Program:
    prog = pb.build()
    rep = validate(prog)
    if not rep.ok:
        raise AssertionError(f"catalog program failed validation: {rep.diagnostics}")
    return prog


def blink_imperative(pin: int = 2, period: int = 500) -> Program:
    """Endless blinker as one repeating write/wait/write/wait chain."""
    pb = ProgramBuilder()
    pb.main(rpeat(
        write_d(pin, True)
        .then(delay(period))
        .then(write_d(pin, False))
        .then(delay(period))))
    return _built(pb)


def blink_functional(pin: int = 13, period: int = 500) -> Program:
    """Endless blinker as a self-recursive function carrying the level."""
    pb = ProgramBuilder()
    f = pb.declare_fun((BOOL,), UNIT)
    pb.define(f, lambda x: write_d(pin, x)
              .bind(lambda _w: delay(period))
              .then(call(f, bnot(x))))
    pb.main(call(f, True))
    return _built(pb)


def blink_threads() -> Program:
    """Three blinkers with different periods interleaved by the runtime.

    One function parameterised over the pin; the pin index travels as a
    plain Int argument.
    """
    pb = ProgramBuilder()
    f = pb.declare_fun((INT, BOOL, INT), UNIT)
    pb.define(f, lambda p, x, y: delay(y)
              .then(write_d(p, x))
              .bind(lambda w: call(f, p, bnot(w), y)))
    pb.main(tor_all(call(f, 1, True, 500),
                    call(f, 2, True, 300),
                    call(f, 3, True, 800)))
    return _built(pb)


def read_pin_bins() -> Program:
    """Classify an analog level into four bins via guarded continuations."""
    pb = ProgramBuilder()
    pb.main(step(
        read_a(apin(2)),
        if_value(lambda v: lt(v, 64), lambda _v: rtrn(0)),
        if_value(lambda v: lt(v, 128), lambda _v: rtrn(1)),
        if_value(lambda v: lt(v, 192), lambda _v: rtrn(2)),
        if_value(lambda v: lt(v, 256), lambda _v: rtrn(3))))
    return _built(pb)


def blink_interactive(pin: int = 2) -> Program:
    """Blinker whose period lives in a server-visible share.  The pin
    level is published to a pin: share so watchers see the blink live."""
    pb = ProgramBuilder()
    sh = pb.lift_sds(INT, vint(500), "delay")
    level = pb.lift_sds(BOOL, vbool(False), f"pin:d{pin}")
    f = pb.declare_fun((BOOL,), UNIT)
    pb.define(f, lambda x: write_d(pin, x)
              .then(set_sds(level, x))
              .then(get_sds(sh))
              .on_value(lambda d: delay(d))
              .then(call(f, bnot(x))))
    pb.main(call(f, True))
    return _built(pb)


def temp_pair() -> Program:
    """Report temperature and humidity together, forever unstable."""
    pb = ProgramBuilder()
    dht = pb.dht(4)
    pb.main(tand(temperature(dht), humidity(dht)))
    return _built(pb)


def _monitor_fun(pb: ProgramBuilder, dht, sh):
    """Write the temperature to a share only when it changed."""
    f = pb.declare_fun((INT,), UNIT)
    pb.define(f, lambda x: step(
        temperature(dht),
        if_value(lambda t: neq(t, x), lambda t: set_sds(sh, t)))
        .bind(lambda t: call(f, t)))
    return f


def temp_monitor() -> Program:
    pb = ProgramBuilder()
    dht = pb.dht(4)
    sh = pb.lift_sds(INT, vint(0), "temp")
    mon = _monitor_fun(pb, dht, sh)
    pb.main(call(mon, 0))
    return _built(pb)


def thermostat() -> Program:
    """Bang-bang heater control around a server-settable target.

    The heater state travels through the recursion as the value written
    to the pin; on equal readings neither guard fires, so the output
    holds (no chatter at the setpoint).
    """
    pb = ProgramBuilder()
    dht = pb.dht(4)
    s_temp = pb.lift_sds(INT, vint(0), "temp")
    s_target = pb.lift_sds(INT, vint(250), "target")
    s_pin = pb.lift_sds(BOOL, vbool(False), "pin:heater")
    mon = _monitor_fun(pb, dht, s_temp)
    heater = pb.declare_fun((BOOL,), UNIT)
    pb.define(heater, lambda st: step(
        tand(get_sds(s_temp), get_sds(s_target)),
        if_value(lambda p: band(lt(fst(p), snd(p)), bnot(st)),
                 lambda _p: write_d(4, True).then(set_sds(s_pin, True))),
        if_value(lambda p: band(gt(fst(p), snd(p)), st),
                 lambda _p: write_d(4, False).then(set_sds(s_pin, False))))
        .bind(lambda w: call(heater, w)))
    pb.main(tor(call(mon, 0), call(heater, False)))
    return _built(pb)


def matrix_dot(x: int, y: int, on: bool = True) -> Program:
    """Set one matrix pixel and push the frame."""
    pb = ProgramBuilder()
    lm = pb.ledmatrix(5, 7)
    pb.main(lm_dot(lm, x, y, on).then(lm_display(lm)))
    return _built(pb)


def matrix_clear() -> Program:
    pb = ProgramBuilder()
    lm = pb.ledmatrix(5, 7)
    pb.main(lm_clear(lm).then(lm_display(lm)))
    return _built(pb)


def matrix_42_onboard() -> Program:
    """Draw "42" with a single device task: clear, 18 dots, one display."""
    pb = ProgramBuilder()
    lm = pb.ledmatrix(5, 7)
    chain = lm_clear(lm)
    for x, y in DOTS_42:
        chain = chain.then(lm_dot(lm, x, y, True))
    pb.main(chain.then(lm_display(lm)))
    return _built(pb)


def matrix_42_stepwise() -> list[Program]:
    """Draw "42" as 19 single-shot tasks: one clear plus one per dot.

    Same final frame as matrix_42_onboard, at 19x the shipping cost;
    the contrast is what the fan-out test measures.
    """
    return [matrix_clear()] + [matrix_dot(x, y) for x, y in DOTS_42]


def sum_pair() -> Program:
    """Smallest pure-function program: add two literals."""
    pb = ProgramBuilder()
    f = pb.fun((INT, INT), INT, lambda a, b: a + b)
    pb.main(call(f, 1, 2))
    return _built(pb)


def factorial_branching(n: int = 5) -> Program:
    """Factorial with a genuinely nested recursive call.

    The multiply happens after the inner call completes, so call nodes
    stack up n deep; contrast with factorial_accumulator.
    """
    pb = ProgramBuilder()
    fac = pb.declare_fun((INT,), INT)
    pb.define(fac, lambda i: step(
        rtrn(eq(i, 0)),
        if_value(lambda b: b, lambda _b: rtrn(1)),
        if_value(lambda b: bnot(b), lambda _b: step(
            call(fac, i - 1),
            if_stable(None, lambda r: rtrn(i * r))))))
    pb.main(call(fac, n))
    return _built(pb)


def factorial_accumulator(n: int = 10) -> Program:
    """Factorial with an accumulator; the recursive call is a tail call,
    so the runtime rebinds one call node in place of growing a chain."""
    pb = ProgramBuilder()
    fac = pb.declare_fun((INT, INT), INT)
    pb.define(fac, lambda i, acc: step(
        rtrn(eq(i, 0)),
        if_value(lambda b: b, lambda _b: rtrn(acc)),
        if_value(lambda b: bnot(b), lambda _b: call(fac, i - 1, acc * i))))
    pb.main(call(fac, n, 1))
    return _built(pb)


def plotter() -> Program:
    """Temperature strip-chart on the matrix with alarm LED and mute button.

    Four concurrent activities: plot a scaled reading per column, report
    readings to the server share, raise the alarm LED above a settable
    limit, and clear it on a button press.  Scaling helpers are inlined
    at build time, so only drawing and the main loop are functions.
    """
    pb = ProgramBuilder()
    dht = pb.dht(4)
    lm = pb.ledmatrix(5, 7)
    s_limits = pb.lift_sds(PairT(INT, INT), vpair(vint(220), vint(250)), "limits")
    s_delay = pb.lift_sds(INT, vint(1000), "granularity")
    s_temp = pb.lift_sds(INT, vint(0), "temp")
    s_alarm = pb.lift_sds(INT, vint(250), "alarm")

    def emin(x, y):
        return ife(lt(x, y), x, y)

    def calc_row(lo, hi, val):
        return emin(hi, (val - hi) / ((lo - hi) / 7))

    # Walk one column: light the target row, darken the rest, then show.
    pr = pb.declare_fun((INT, INT, INT), UNIT)
    pb.define(pr, lambda ty, cx, cy: step(
        rtrn(eq(cy, 8)),
        if_value(lambda b: b, lambda _b: lm_display(lm)),
        if_value(lambda b: bnot(b), lambda _b: lm_dot(lm, cx, cy, eq(ty, cy))
                 .then(call(pr, ty, cx, cy + 1)))))

    plot = pb.declare_fun((INT,), UNIT)
    pb.define(plot, lambda x: step(
        get_sds(s_limits),
        if_value(None, lambda lims: step(
            temperature(dht),
            if_value(None, lambda y: call(pr, emin(7, calc_row(fst(lims), snd(lims), y)), x, 0)
                     .then(set_sds(s_temp, y))
                     .then(get_sds(s_delay))
                     .on_value(lambda d: delay(d))
                     .then(call(plot, ife(eq(x, 7), 0, x + 1))))))))

    mute = rpeat(step(
        read_d(BUTTON_A),
        if_value(lambda b: b, lambda _b: write_d(BUILTIN_LED, False))))
    alarm = rpeat(step(
        tand(get_sds(s_alarm), get_sds(s_temp)),
        if_value(lambda p: gt(snd(p), fst(p)),
                 lambda _p: write_d(BUILTIN_LED, True))))
    pb.main(tor_all(call(plot, 0), mute, alarm))
    return _built(pb)


CATALOG = {
    "blink": blink_imperative,
    "blink-fun": blink_functional,
    "blink-threads": blink_threads,
    "read-bins": read_pin_bins,
    "blink-interactive": blink_interactive,
    "temp-pair": temp_pair,
    "temp-monitor": temp_monitor,
    "thermostat": thermostat,
    "matrix-42": matrix_42_onboard,
    "matrix-clear": matrix_clear,
    "sum": sum_pair,
    "factorial": factorial_branching,
    "factorial-acc": factorial_accumulator,
    "plotter": plotter,
}
