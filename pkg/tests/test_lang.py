"""Task description layer: builder resolution, sugar, tail marking."""

import pytest

from topiot import catalog
from topiot import lang as L
from topiot.lang import (
    Arg,
    BuildError,
    Call,
    Lit,
    ProgramBuilder,
    Step,
    bnot,
    call,
    delay,
    dpin,
    eq,
    if_stable,
    if_value,
    rtrn,
    step,
    write_d,
)
from topiot.validate import validate
from topiot.values import BOOL, INT, UNIT, vbool, vint


def test_literal_lifting():
    assert L.lift(3) == Lit(vint(3))
    assert L.lift(True) == Lit(vbool(True))
    # bool is a subclass of int; it must lift as Bool, not Int.
    assert L.lift(False).val.ty == vbool(False).ty


def test_operator_overloads_build_binops():
    e = L.lift(1) + 2
    assert isinstance(e, L.BinOp) and e.op == "+"
    e = 10 - L.lift(3)
    assert e.op == "-" and e.lhs == Lit(vint(10))


def test_param_resolution_to_arg_slots():
    pb = ProgramBuilder()
    f = pb.fun((INT, INT), INT, lambda a, b: a - b)
    pb.main(call(f, 7, 3))
    prog = pb.build()
    body = prog.functions[0].body
    assert body == L.BinOp("-", Arg(0), Arg(1))


def test_continuation_binder_extends_frame_by_one():
    pb = ProgramBuilder()
    f = pb.fun((BOOL,), INT, lambda x: step(
        delay(5),
        if_value(None, lambda v: rtrn(v + 1))))
    pb.main(call(f, True))
    prog = pb.build()
    cont = prog.functions[0].body.conts[0]
    # Param occupies slot 0, the step payload slot 1.
    assert cont.body == L.Rtrn(L.BinOp("+", Arg(1), Lit(vint(1))))
    assert cont.binder is None


def test_nested_continuations_keep_extending():
    pb = ProgramBuilder()
    f = pb.fun((INT,), INT, lambda x: step(
        rtrn(x),
        if_value(None, lambda a: step(
            rtrn(a + x),
            if_value(None, lambda b: rtrn(x + a + b))))))
    pb.main(call(f, 1))
    prog = pb.build()
    inner = prog.functions[0].body.conts[0].body.conts[0].body
    got = inner.e
    assert got == L.BinOp("+", L.BinOp("+", Arg(0), Arg(1)), Arg(2))


def test_unused_binder_still_occupies_a_slot():
    pb = ProgramBuilder()
    f = pb.fun((INT,), INT, lambda x: step(
        rtrn(0),
        if_value(None, lambda _ignored: step(
            rtrn(1),
            if_value(None, lambda y: rtrn(x + y))))))
    pb.main(call(f, 1))
    prog = pb.build()
    inner = prog.functions[0].body.conts[0].body.conts[0].body
    # x is slot 0; the ignored payload holds slot 1; y is slot 2.
    assert inner.e == L.BinOp("+", Arg(0), Arg(2))


def test_var_escape_is_an_error():
    pb = ProgramBuilder()
    leaked = []
    pb.fun((INT,), INT, lambda x: leaked.append(x) or (x + 0))
    pb2 = ProgramBuilder()
    pb2.main(rtrn(leaked[0]))
    with pytest.raises(BuildError):
        pb2.build()


def test_sugar_desugars_to_guarded_steps():
    t = delay(1).then(rtrn(2))
    assert isinstance(t, Step) and t.conts[0].guard == L.GUARD_STABLE
    t = delay(1).bind(lambda v: rtrn(v))
    assert t.conts[0].guard == L.GUARD_STABLE
    t = delay(1).on_value(lambda v: rtrn(v))
    assert t.conts[0].guard == L.GUARD_VALUE
    t = delay(1).on_value_then(rtrn(2))
    assert t.conts[0].guard == L.GUARD_VALUE


def test_pin_defaults_and_banks():
    w = write_d(13, True)
    assert w.pin.bank == "d" and w.pin.expr == Lit(vint(13))
    r = L.read_a(5)
    assert r.pin.bank == "a"
    r2 = L.read_d(L.apin(3))
    assert r2.pin.bank == "a"


def test_tail_marking_on_catalog_programs():
    # Accumulator factorial: the recursive call is a tail call.
    prog = catalog.factorial_accumulator()
    rep = validate(prog)
    assert rep.ok
    body = prog.functions[0].body
    rec = body.conts[1].body
    assert isinstance(rec, Call) and id(rec) in rep.tail_ids
    # Branching factorial: the recursive call sits left of a step.
    prog = catalog.factorial_branching()
    rep = validate(prog)
    inner = prog.functions[0].body.conts[1].body
    assert isinstance(inner.left, Call) and id(inner.left) not in rep.tail_ids
    # Top-level calls are never tail-marked.
    prog = catalog.sum_pair()
    rep = validate(prog)
    assert isinstance(prog.main, Call) and id(prog.main) not in rep.tail_ids


def test_tail_marking_under_nested_continuations():
    prog = catalog.plotter()
    rep = validate(prog)
    plot_body = prog.functions[1].body
    chain = plot_body.conts[0].body.conts[0].body
    # The loop-back call is the body of the outermost chained step.
    loop = chain.conts[0].body
    assert isinstance(loop, Call) and id(loop) in rep.tail_ids
    # The column-drawing call feeds a step, so it is not a tail.
    col = chain.left.left.left.left
    assert isinstance(col, Call) and id(col) not in rep.tail_ids


def test_declare_before_define_supports_mutual_recursion():
    pb = ProgramBuilder()
    f = pb.declare_fun((INT,), INT)
    g = pb.declare_fun((INT,), INT)
    pb.define(f, lambda n: step(rtrn(eq(n, 0)),
                                if_value(lambda b: b, lambda _b: rtrn(0)),
                                if_value(lambda b: bnot(b), lambda _b: call(g, n - 1))))
    pb.define(g, lambda n: step(rtrn(eq(n, 0)),
                                if_value(lambda b: b, lambda _b: rtrn(1)),
                                if_value(lambda b: bnot(b), lambda _b: call(f, n - 1))))
    pb.main(call(f, 4))
    prog = pb.build()
    rep = validate(prog)
    assert rep.ok
    assert len(rep.tail_ids) == 2


def test_undefined_function_is_a_build_error():
    pb = ProgramBuilder()
    pb.declare_fun((INT,), INT)
    pb.main(rtrn(1))
    with pytest.raises(BuildError):
        pb.build()


def test_missing_main_is_a_build_error():
    with pytest.raises(BuildError):
        ProgramBuilder().build()


def test_walk_task_visits_all_nodes():
    prog = catalog.blink_imperative()
    kinds = {type(t).__name__ for t in L.walk_task(prog.main)}
    assert kinds == {"Rpeat", "Step", "WriteD", "Delay"}
