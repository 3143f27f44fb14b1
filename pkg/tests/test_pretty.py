"""Printer goldens: the rendering is part of the tool's contract."""

from topiot import catalog
from topiot.lang import ProgramBuilder, rtrn
from topiot.pretty import pretty

# The canonical blink rendering, frozen byte for byte.
BLINK_GOLDEN = (
    "let f0 a1 = writeD(D13, a1) >>= \\a2.(delay 500) >>| (f0 (Not a1)) "
    "in (f0 True)"
)


def test_blink_golden():
    assert pretty(catalog.blink_functional()) == BLINK_GOLDEN


def test_minimal_program():
    pb = ProgramBuilder()
    pb.main(rtrn(1))
    assert pretty(pb.build()) == "(rtrn 1)"


def test_pure_function_with_tuple_params():
    assert pretty(catalog.sum_pair()) == "let f0 (a1, a2) = a1 + a2 in (f0 (1, 2))"


FROZEN = {
    "blink": "(rpeat writeD(D2, True) >>= \\a1.(delay 500) "
             ">>= \\a2.(writeD(D2, False)) >>= \\a3.(delay 500))",
    "read-bins": "readA(A2) >>* [IfValue (\\a1.a1 < 64) (rtrn 0), "
                 "IfValue (\\a2.a2 < 128) (rtrn 1), "
                 "IfValue (\\a3.a3 < 192) (rtrn 2), "
                 "IfValue (\\a4.a4 < 256) (rtrn 3)]",
    "factorial-acc": "let f0 (a1, a2) = (rtrn (a1 == 0)) >>* "
                     "[IfValue (\\a3.a3) (rtrn a2), "
                     "IfValue (\\a4.Not a4) (f0 (a1 - 1, a2 * a1))] "
                     "in (f0 (10, 1))",
    "temp-monitor": "dht p0 D4 dht22 in sds temp = 0 in "
                    "let f0 a1 = temperature(p0) >>* "
                    "[IfValue (\\a2.a2 != a1) (setSds(temp, a2))] "
                    ">>= \\a3.(f0 a3) in (f0 0)",
    "matrix-clear": "ledmatrix p0 D5 D7 in LMClear(p0) >>= \\a1.(LMDisplay(p0))",
    "blink-interactive": "sds delay = 500 in sds pin:d2 = False in "
                         "let f0 a1 = writeD(D2, a1) "
                         ">>= \\a2.(setSds(pin:d2, a1)) "
                         ">>= \\a3.(getSds(delay)) >>~ \\a4.(delay a4) "
                         ">>| (f0 (Not a1)) in (f0 True)",
}


def test_frozen_catalog_renderings():
    for name, want in FROZEN.items():
        assert pretty(catalog.CATALOG[name]()) == want, name


def test_every_catalog_program_renders_one_line():
    for name, build in catalog.CATALOG.items():
        s = pretty(build())
        assert s and "\n" not in s, name


def test_rendering_is_deterministic():
    for name, build in catalog.CATALOG.items():
        assert pretty(build()) == pretty(build()), name


def test_dynamic_pin_rendering():
    s = pretty(catalog.blink_threads())
    assert "writeD(D[a1], a2)" in s


def test_compact_arrow_only_for_binder_ignoring_calls():
    # Loop-back call ignoring the payload: compact.
    assert ">>| (f0 (Not a1))" in pretty(catalog.blink_functional())
    # Call that uses the payload: binder must stay visible.
    assert ">>= \\a3.(f0 a3)" in pretty(catalog.temp_monitor())
