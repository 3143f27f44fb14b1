"""Program file format: golden bytes, round-trips, and rejection of
malformed input."""

import pytest

from topiot import lang as L
from topiot.catalog import CATALOG
from topiot.progbin import FormatError, decode_program, encode_program
from topiot.values import BOOL, INT, vint


def _prog_rtrn_one() -> L.Program:
    b = L.ProgramBuilder()
    b.main(L.rtrn(1))
    return b.build()


def _prog_sum() -> L.Program:
    b = L.ProgramBuilder()
    f = b.fun([INT, INT], INT, lambda x, y: x + y)
    b.main(L.call(f, 1, 2))
    return b.build()


### golden images, derived by hand from the layout

# magic, version 1, no funs, no sds, no periphs, main = rtrn(lit int 1)
GOLDEN_RTRN_ONE = bytes.fromhex(
    "4d545052" "01" "00" "00" "00"
    "20" "01" "00" "01000000"
)

# one function (Int, Int) -> Int with body Arg0 + Arg1, main = call f (1, 2)
GOLDEN_SUM = bytes.fromhex(
    "4d545052" "01"
    "01" "02" "00" "00" "00" "00"      # arity 2, param tys, ret ty, expr body
    "03" "00" "0200" "0201"            # BinOp '+' (Arg 0) (Arg 1)
    "00" "00"                          # no sds, no periphs
    "26" "00" "02"                     # call fun 0 with 2 args
    "01" "00" "01000000"
    "01" "00" "02000000"
)


def test_golden_rtrn_one():
    assert encode_program(_prog_rtrn_one()) == GOLDEN_RTRN_ONE


def test_golden_sum():
    assert encode_program(_prog_sum()) == GOLDEN_SUM


def test_golden_decode_back():
    assert decode_program(GOLDEN_SUM) == _prog_sum()


### round-trips

@pytest.mark.parametrize("name", sorted(CATALOG))
def test_round_trip_catalog(name):
    prog = CATALOG[name]()
    img = encode_program(prog)
    assert decode_program(img) == prog
    # canonical: re-encoding the decoded tree is byte-identical
    assert encode_program(decode_program(img)) == img


def test_encode_deterministic():
    prog = CATALOG["plotter"]()
    assert encode_program(prog) == encode_program(prog)


def test_distinct_programs_distinct_bytes():
    images = {encode_program(CATALOG[name]()) for name in CATALOG}
    assert len(images) == len(CATALOG)


### malformed input

def test_bad_magic():
    with pytest.raises(FormatError):
        decode_program(b"XXXX" + GOLDEN_RTRN_ONE[4:])


def test_bad_version():
    img = bytearray(GOLDEN_RTRN_ONE)
    img[4] = 99
    with pytest.raises(FormatError):
        decode_program(bytes(img))


def test_trailing_bytes():
    with pytest.raises(FormatError):
        decode_program(GOLDEN_RTRN_ONE + b"\x00")


def test_truncation_every_prefix():
    img = encode_program(CATALOG["plotter"]())
    for n in range(len(img)):
        with pytest.raises(FormatError):
            decode_program(img[:n])


def test_bad_task_tag():
    img = bytearray(GOLDEN_RTRN_ONE)
    img[8] = 0xEE
    with pytest.raises(FormatError):
        decode_program(bytes(img))


def test_bad_guard_code():
    b = L.ProgramBuilder()
    b.main(L.step(L.rtrn(True), L.if_value(None, lambda v: L.rtrn(v))))
    img = bytearray(encode_program(b.build()))
    # after the step tag: left subtree (4 bytes), cont count, guard byte
    idx = img.index(0x25) + 1
    assert img[idx + 4] == 0x01 and img[idx + 5] == 0x00
    img[idx + 5] = 9
    with pytest.raises(FormatError):
        decode_program(bytes(img))


def test_decoder_never_crashes_on_noise():
    import random

    rng = random.Random(0xDEADBEEF)
    for _ in range(500):
        blob = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 80)))
        try:
            decode_program(blob)
        except FormatError:
            pass
