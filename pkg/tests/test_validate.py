"""Static checks: typing, guard shapes, identifier and board limits."""

import pytest

from topiot import catalog
from topiot.lang import (
    Arg,
    ProgramBuilder,
    StepCont,
    Step,
    always,
    apin,
    call,
    delay,
    dpin,
    get_sds,
    if_no_value,
    if_value,
    lm_dot,
    read_a,
    read_d,
    rpeat,
    rtrn,
    set_sds,
    step,
    tand,
    tor,
    write_a,
    write_d,
    TRUE_LIT,
)
from topiot.validate import BoardLimits, validate
from topiot.values import BOOL, INT, REAL, UNIT, PairT, vbool, vint, vreal


def _main_only(t):
    pb = ProgramBuilder()
    pb.main(t)
    return pb.build()


def _diags(prog, limits=None):
    rep = validate(prog) if limits is None else validate(prog, limits)
    return rep.ok, " / ".join(d.message for d in rep.diagnostics)


def test_catalog_is_fully_valid():
    for name, build in catalog.CATALOG.items():
        rep = validate(build())
        assert rep.ok, (name, rep.diagnostics)


def test_main_type_is_reported():
    rep = validate(_main_only(tand(rtrn(1), rtrn(True))))
    assert rep.ok and rep.main_ty == PairT(INT, BOOL)


def test_arith_type_mismatch():
    from topiot.lang import lift
    ok, msg = _diags(_main_only(rtrn(lift(1) + 1.0)))
    assert not ok and "two Ints or two Reals" in msg


def test_or_branches_must_agree():
    ok, _ = _diags(_main_only(tor(rtrn(1), rtrn(True))))
    assert not ok
    ok, _ = _diags(_main_only(tor(rtrn(1), rtrn(2))))
    assert ok


def test_delay_needs_int():
    ok, _ = _diags(_main_only(delay(True)))
    assert not ok


def test_step_continuation_bodies_must_agree():
    ok, _ = _diags(_main_only(step(
        rtrn(1),
        if_value(None, lambda v: rtrn(v)),
        if_no_value(rtrn(True)))))
    assert not ok


def test_step_needs_at_least_one_continuation():
    ok, _ = _diags(_main_only(Step(rtrn(1), ())))
    assert not ok


def test_value_guard_pred_must_be_bool():
    ok, _ = _diags(_main_only(step(rtrn(1), if_value(lambda v: v + 1, lambda v: rtrn(v)))))
    assert not ok


def test_valueless_guard_must_not_have_pred():
    # Hand-built canonical form, bypassing builder normalisation.
    from topiot.lang import Program, Rtrn, Lit
    bad = StepCont("always", TRUE_LIT, Rtrn(Lit(vint(1))), None)
    prog = Program((), (), (), Step(Rtrn(Lit(vint(1))), (bad,)))
    ok, _ = _diags(prog)
    assert not ok


def test_valueful_guard_requires_pred():
    bad = StepCont("value", None, rtrn(1), None)
    ok, _ = _diags(_main_only(Step(rtrn(1), (bad,))))
    assert not ok


def test_unknown_guard_rejected():
    bad = StepCont("sometimes", TRUE_LIT, rtrn(1), None)
    ok, _ = _diags(_main_only(Step(rtrn(1), (bad,))))
    assert not ok


def test_arg_out_of_range():
    pb = ProgramBuilder()
    f = pb.fun((INT,), INT, lambda x: x + 0)
    pb.main(call(f, 1))
    prog = pb.build()
    import dataclasses
    from topiot.lang import FunDef
    broken = dataclasses.replace(
        prog, functions=(FunDef((INT,), INT, Arg(1)),))
    ok, msg = _diags(broken)
    assert not ok and "argument" in msg


def test_call_arity_and_types():
    pb = ProgramBuilder()
    f = pb.fun((INT, INT), INT, lambda a, b: a + b)
    pb.main(call(f, 1))
    ok, _ = _diags(pb.build())
    assert not ok
    pb = ProgramBuilder()
    f = pb.fun((INT,), INT, lambda a: a + 1)
    pb.main(call(f, True))
    ok, _ = _diags(pb.build())
    assert not ok


def test_static_pin_bounds():
    ok, _ = _diags(_main_only(write_d(16, True)))
    assert not ok
    ok, _ = _diags(_main_only(read_a(8)))
    assert not ok
    ok, _ = _diags(_main_only(read_a(7)))
    assert ok
    # Tighter board, same program.
    ok, _ = _diags(_main_only(read_a(7)), BoardLimits(analog_pins=4))
    assert not ok


def test_analog_ops_require_analog_bank():
    ok, _ = _diags(_main_only(read_a(dpin(1))))
    assert not ok
    ok, _ = _diags(_main_only(write_a(dpin(1), 10)))
    assert not ok
    # Digital reads of analog pins are allowed (thresholded).
    ok, _ = _diags(_main_only(read_d(apin(1))))
    assert ok


def test_write_value_types():
    ok, _ = _diags(_main_only(write_d(1, 1)))
    assert not ok
    ok, _ = _diags(_main_only(write_a(apin(1), True)))
    assert not ok


def test_sds_typing_and_keys():
    pb = ProgramBuilder()
    s = pb.sds(INT, vint(0))
    pb.main(set_sds(s, True))
    ok, _ = _diags(pb.build())
    assert not ok

    pb = ProgramBuilder()
    s = pb.sds(INT, vbool(True))  # init value disagrees with the type
    pb.main(get_sds(s))
    ok, _ = _diags(pb.build())
    assert not ok

    pb = ProgramBuilder()
    pb.lift_sds(INT, vint(0), "same")
    pb.lift_sds(INT, vint(0), "same")
    pb.main(rtrn(1))
    ok, msg = _diags(pb.build())
    assert not ok and "key" in msg


def test_peripheral_shapes():
    pb = ProgramBuilder()
    d = pb.dht(4, model="dht99")
    pb.main(rtrn(1))
    ok, _ = _diags(pb.build())
    assert not ok

    pb = ProgramBuilder()
    lm = pb.ledmatrix(5, 99)
    pb.main(rtrn(1))
    ok, _ = _diags(pb.build())
    assert not ok


def test_matrix_ops_check_peripheral_kind():
    pb = ProgramBuilder()
    d = pb.dht(4)
    pb.main(lm_dot(d, 0, 0, True))
    ok, _ = _diags(pb.build())
    assert not ok


def test_dht_ops_check_peripheral_index():
    from topiot.lang import DhtTemp
    ok, _ = _diags(_main_only(DhtTemp(0)))
    assert not ok


def test_pure_function_set():
    prog = catalog.sum_pair()
    rep = validate(prog)
    assert rep.pure_funs == frozenset({0})
    prog = catalog.factorial_accumulator()
    rep = validate(prog)
    assert rep.pure_funs == frozenset()


def test_function_body_type_must_match_declaration():
    pb = ProgramBuilder()
    f = pb.fun((INT,), BOOL, lambda x: x + 1)
    pb.main(call(f, 1))
    ok, _ = _diags(pb.build())
    assert not ok


def test_rpeat_child_may_be_any_type():
    ok, _ = _diags(_main_only(rpeat(rtrn(42))))
    assert ok
    rep = validate(_main_only(rpeat(rtrn(42))))
    assert rep.main_ty == UNIT
