"""Value domain: task values, parallel combination, transition legality."""

import random

import pytest
from hypothesis import given, strategies as st

from topiot.values import (
    I32_MAX,
    I32_MIN,
    NOVALUE,
    TaskValue,
    TransitionMonitor,
    combine_and,
    combine_or,
    legal_transition,
    round_f32,
    stable,
    trunc_div_i32,
    unstable,
    vbool,
    vint,
    vpair,
    vreal,
    vunit,
    wrap_i32,
)

RANDOM_SEED = 0xDEADBEEF


def _mk(state, payload):
    if state == "none":
        return NOVALUE
    if state == "unstable":
        return unstable(payload)
    return stable(payload)


# Expected conjunction results for every left/right state combination.
# "pair" means Value((l, r)) with the given stability.
AND_TABLE = [
    ("none", "none", "none", None),
    ("none", "unstable", "none", None),
    ("none", "stable", "none", None),
    ("unstable", "none", "none", None),
    ("unstable", "unstable", "pair", False),
    ("unstable", "stable", "pair", False),
    ("stable", "none", "none", None),
    ("stable", "unstable", "pair", False),
    ("stable", "stable", "pair", True),
]

# Expected disjunction results: which side is reported, and its stability.
OR_TABLE = [
    ("none", "none", "none", None),
    ("none", "unstable", "right", False),
    ("none", "stable", "right", True),
    ("unstable", "none", "left", False),
    ("unstable", "unstable", "left", False),
    ("unstable", "stable", "right", True),
    ("stable", "none", "left", True),
    ("stable", "unstable", "left", True),
    ("stable", "stable", "left", True),
]


@pytest.mark.parametrize("ls,rs,want,wstable", AND_TABLE)
def test_combine_and_table(ls, rs, want, wstable):
    l = _mk(ls, vint(1))
    r = _mk(rs, vint(2))
    got = combine_and(l, r)
    if want == "none":
        assert got == NOVALUE
    else:
        assert got.val == vpair(vint(1), vint(2))
        assert got.stable is wstable


@pytest.mark.parametrize("ls,rs,want,wstable", OR_TABLE)
def test_combine_or_table(ls, rs, want, wstable):
    l = _mk(ls, vint(1))
    r = _mk(rs, vint(2))
    got = combine_or(l, r)
    if want == "none":
        assert got == NOVALUE
    else:
        assert got.val == (vint(1) if want == "left" else vint(2))
        assert got.stable is wstable


def test_combine_or_prefers_stable_left_over_stable_right():
    got = combine_or(stable(vint(1)), stable(vint(2)))
    assert got == stable(vint(1))


def test_randomized_payloads_do_not_change_structure():
    rng = random.Random(RANDOM_SEED)
    for _ in range(200):
        a, b = vint(rng.randint(-1000, 1000)), vint(rng.randint(-1000, 1000))
        for ls, rs, want, wstable in AND_TABLE:
            got = combine_and(_mk(ls, a), _mk(rs, b))
            if want == "none":
                assert got == NOVALUE
            else:
                assert got.val == vpair(a, b) and got.stable is wstable
        for ls, rs, want, wstable in OR_TABLE:
            got = combine_or(_mk(ls, a), _mk(rs, b))
            if want == "none":
                assert got == NOVALUE
            else:
                assert got.val == (a if want == "left" else b)
                assert got.stable is wstable


def test_stable_novalue_is_rejected():
    with pytest.raises(ValueError):
        TaskValue(None, True)


def test_legal_transitions():
    nv, un, stv = NOVALUE, unstable(vint(1)), stable(vint(1))
    assert legal_transition(nv, nv)
    assert legal_transition(nv, un)
    assert legal_transition(nv, stv)
    assert legal_transition(un, nv)
    assert legal_transition(un, unstable(vint(9)))
    assert legal_transition(un, stv)
    assert legal_transition(stv, stv)
    # Stable is frozen: no retreat, no different value.
    assert not legal_transition(stv, nv)
    assert not legal_transition(stv, un)
    assert not legal_transition(stv, stable(vint(2)))


def test_transition_monitor_collects_violations():
    m = TransitionMonitor()
    m.observe("n1", stable(vint(1)))
    m.observe("n1", stable(vint(1)))
    assert not m.violations
    m.observe("n1", unstable(vint(1)))
    assert len(m.violations) == 1
    # A forgotten node starts a fresh sequence.
    m.forget("n1")
    m.observe("n1", NOVALUE)
    assert len(m.violations) == 1


### 32-bit integer semantics

def test_wrap_i32_bounds():
    assert wrap_i32(I32_MAX) == I32_MAX
    assert wrap_i32(I32_MAX + 1) == I32_MIN
    assert wrap_i32(I32_MIN - 1) == I32_MAX
    assert wrap_i32(-(2**31)) == I32_MIN
    assert vint(2**31).v == I32_MIN


def test_trunc_div_toward_zero():
    assert trunc_div_i32(7, 2) == 3
    assert trunc_div_i32(-7, 2) == -3
    assert trunc_div_i32(7, -2) == -3
    assert trunc_div_i32(-7, -2) == 3
    # INT_MIN / -1 overflows and wraps back to INT_MIN.
    assert trunc_div_i32(I32_MIN, -1) == I32_MIN


def test_round_f32_narrowing():
    assert round_f32(0.1) == 0.10000000149011612
    assert round_f32(1.0) == 1.0


### properties

task_values = st.one_of(
    st.just(NOVALUE),
    st.integers(-100, 100).map(lambda n: unstable(vint(n))),
    st.integers(-100, 100).map(lambda n: stable(vint(n))),
)


@given(task_values, task_values)
def test_and_is_stable_only_when_both_are(l, r):
    got = combine_and(l, r)
    if got.val is not None:
        assert got.stable == (l.stable and r.stable)
    else:
        assert l.val is None or r.val is None


@given(task_values, task_values)
def test_or_reports_one_side_verbatim(l, r):
    got = combine_or(l, r)
    assert got in (l, r) or got == NOVALUE
    if got.val is None:
        assert l.val is None and r.val is None
    if l.stable or r.stable:
        assert got.stable


@given(st.integers(), st.integers())
def test_wrap_add_matches_mod_arithmetic(a, b):
    assert vint(a + b).v == ((a + b + 2**31) % 2**32) - 2**31


def test_val_reprs():
    assert repr(vunit()) == "()"
    assert repr(vpair(vint(1), vbool(True))) == "(1, True)"
    assert repr(unstable(vint(3))) == "Unstable(3)"
    assert repr(stable(vreal(1.5))) == "Stable(1.5)"
    assert repr(NOVALUE) == "NoValue"
