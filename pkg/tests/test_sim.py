"""Simulated device: clocks, inputs, control port, and the uplink."""

import json
import socket
import time

import pytest

from topiot import lang as L
from topiot import protocol as P
from topiot.bytecode import compile_program, encode_image
from topiot.catalog import CATALOG
from topiot.sim import SimDevice, WrongClockMode
from topiot.values import INT, vint

BLINK_IMG = encode_image(compile_program(CATALOG["blink"]()))


def sds_writer_image():
    """Counts cycles into a lifted share: uplink traffic every cycle."""
    sdss = (L.SdsDef(INT, vint(0), key="count"),)
    bump = L.Step(L.GetSds(0), (L.StepCont(
        L.GUARD_VALUE, L.TRUE_LIT,
        L.SetSds(0, L.BinOp("+", L.Arg(0), L.Lit(vint(1)))), None),))
    prog = L.Program((), sdss, (), L.Rpeat(bump))
    return encode_image(compile_program(prog))


### clocks and inputs

def test_virtual_clock_advances_cycles():
    with SimDevice(clock="virtual") as sim:
        sim.load(1, BLINK_IMG)
        assert sim.advance(1000) == 1000
        snap = sim.snapshot()
        assert snap["board"]["now"] == 1000
        assert snap["board"]["digital"][2] is True
    # device stopped: safe to read the board directly
    log = sim.vm.board.write_log
    assert [(t, v) for t, _, _, v in log] == [(0, True), (500, False), (1000, True)]


def test_fractional_advance_rounds_up():
    with SimDevice() as sim:
        assert sim.advance(0.25) == 1
        assert sim.advance(2.5) == 4


def test_real_clock_refuses_advance():
    with SimDevice(clock="real") as sim:
        with pytest.raises(WrongClockMode):
            sim.advance(10)


def test_real_clock_chases_wall_time():
    with SimDevice(clock="real") as sim:
        sim.load(1, BLINK_IMG)
        deadline = time.monotonic() + 3.0
        while sim.snapshot()["board"]["now"] < 40:
            assert time.monotonic() < deadline, "clock not moving"
            time.sleep(0.01)


def test_inputs_reach_the_board():
    with SimDevice() as sim:
        sim.set_input("analog", 0, 700)
        sim.set_input("digital", 3, True)
        sim.set_input("buttonA", None, True)
        sim.set_input("buttonB", None, True)
        sim.set_input("temperature", None, 215)
        sim.set_input("humidity", None, 450)
        snap = sim.snapshot()["board"]
        assert snap["analog"][0] == 700
        assert snap["digital"][3] and snap["digital"][4] and snap["digital"][6]
        assert snap["temperature"] == 215 and snap["humidity"] == 450
        with pytest.raises(ValueError):
            sim.set_input("analog", 0, 2000)
        with pytest.raises(ValueError):
            sim.set_input("warp", 0, 1)


### control port

def control_rpc(sock, req):
    sock.sendall(json.dumps(req).encode() + b"\n")
    buf = b""
    while not buf.endswith(b"\n"):
        chunk = sock.recv(4096)
        assert chunk, "control connection closed"
        buf += chunk
    return json.loads(buf)


def test_control_port_roundtrip():
    with SimDevice(control_port=0) as sim:
        sim.load(1, BLINK_IMG)
        with socket.create_connection(sim.control_address, timeout=3) as c:
            c.settimeout(3)
            assert control_rpc(c, {"op": "ping"})["ok"]
            r = control_rpc(c, {"op": "advance", "ms": 600})
            assert r == {"ok": True, "now": 600}
            control_rpc(c, {"op": "set-input", "kind": "analog",
                            "idx": 1, "value": 900})
            snap = control_rpc(c, {"op": "snapshot"})["snapshot"]
            assert snap["board"]["analog"][1] == 900
            assert snap["board"]["digital"][2] is False   # 500ms toggle passed
            assert snap["tasks"]["1"]["failed"] is None
            bad = control_rpc(c, {"op": "set-input", "kind": "analog",
                                  "idx": 0, "value": 5000})
            assert bad["ok"] is False
            assert control_rpc(c, {"op": "warp"})["ok"] is False
            assert control_rpc(c, {"op": "snapshot"})["ok"]  # still alive


def test_control_port_survives_bad_json():
    with SimDevice(control_port=0) as sim:
        with socket.create_connection(sim.control_address, timeout=3) as c:
            c.settimeout(3)
            c.sendall(b"this is not json\n")
            buf = b""
            while not buf.endswith(b"\n"):
                buf += c.recv(4096)
            assert json.loads(buf)["ok"] is False


### uplink

class FakeServer:
    """Test-side listener playing the server role on the link protocol."""

    def __init__(self):
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen(1)
        self.addr = self.listener.getsockname()
        self.sock = None
        self.reader = P.FrameReader()
        self.inbox = []

    def accept(self, timeout=5.0):
        self.listener.settimeout(timeout)
        self.sock, _ = self.listener.accept()
        self.sock.settimeout(0.1)

    def send(self, msg):
        self.sock.sendall(P.encode_message(msg))

    def wait_for(self, pred, timeout=5.0, required=True):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            for i, m in enumerate(self.inbox):
                if pred(m):
                    return self.inbox.pop(i)
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                continue
            if not data:
                break
            self.inbox.extend(self.reader.feed(data))
        if required:
            raise AssertionError(f"no matching message; inbox={self.inbox}")
        return None

    def close(self):
        if self.sock is not None:
            self.sock.close()
        self.listener.close()


def test_uplink_handshake_and_task_lifecycle():
    srv = FakeServer()
    sim = SimDevice(arena_nodes=64, server=srv.addr).start()
    try:
        srv.accept()
        hello = srv.wait_for(lambda m: isinstance(m, P.Hello))
        assert hello.version == P.PROTOCOL_VERSION
        assert hello.arena_nodes == 64
        assert hello.digital_pins == 16 and hello.analog_pins == 8
        assert hello.periphs == (P.PERIPH_DHT | P.PERIPH_LEDMATRIX)

        srv.send(P.AddTask(7, sds_writer_image()))
        srv.wait_for(lambda m: m == P.AckTask(7))
        # the load pass writes 0+1 into the share straight away
        up = srv.wait_for(lambda m: isinstance(m, P.SdsUp))
        assert (up.task_id, up.sds_id, up.val) == (7, 0, vint(1))

        sim.advance(2)
        srv.wait_for(lambda m: isinstance(m, P.SdsUp) and m.val == vint(3))

        srv.send(P.Ping())
        srv.wait_for(lambda m: isinstance(m, P.Pong))

        # server-side push applies at the next cycle; the device's own
        # increment then reads 100, so the first write after it is 101
        srv.send(P.SdsDown(7, 0, vint(100)))
        deadline = time.monotonic() + 5
        got = None
        while got is None:
            assert time.monotonic() < deadline, "push never took effect"
            sim.advance(1)
            got = srv.wait_for(
                lambda m: isinstance(m, P.SdsUp) and m.val.v >= 101,
                timeout=0.2, required=False)
        assert got.val == vint(101)
        # and the push itself was never echoed back
        assert not any(isinstance(m, P.SdsUp) and m.val == vint(100)
                       for m in srv.inbox)

        srv.send(P.DelTask(7))
        deadline = time.monotonic() + 3
        while sim.snapshot()["tasks"]:
            assert time.monotonic() < deadline
            time.sleep(0.01)
        srv.send(P.DelTask(7))          # double delete is harmless
        srv.send(P.Ping())
        srv.wait_for(lambda m: isinstance(m, P.Pong))
    finally:
        sim.stop()
        srv.close()


def test_uplink_rejects_bad_image_and_overflow():
    srv = FakeServer()
    sim = SimDevice(arena_nodes=2, server=srv.addr).start()
    try:
        srv.accept()
        srv.wait_for(lambda m: isinstance(m, P.Hello))

        srv.send(P.AddTask(1, b"\xde\xad\xbe\xef"))
        rej = srv.wait_for(lambda m: isinstance(m, P.RejectTask))
        assert rej.task_id == 1 and "bad-image" in rej.reason

        srv.send(P.AddTask(2, BLINK_IMG))   # blink needs more than 2 nodes
        rej = srv.wait_for(lambda m: isinstance(m, P.RejectTask))
        assert rej.task_id == 2 and rej.reason == "out-of-arena"
        assert sim.snapshot()["arena"]["live"] == 0
    finally:
        sim.stop()
        srv.close()


def test_uplink_loss_unloads_everything():
    srv = FakeServer()
    sim = SimDevice(server=srv.addr).start()
    try:
        srv.accept()
        srv.wait_for(lambda m: isinstance(m, P.Hello))
        srv.send(P.AddTask(3, BLINK_IMG))
        srv.wait_for(lambda m: m == P.AckTask(3))
        assert sim.snapshot()["tasks"]
        srv.sock.close()
        deadline = time.monotonic() + 3
        while sim.snapshot()["tasks"]:
            assert time.monotonic() < deadline
            time.sleep(0.01)
        assert sim.snapshot()["arena"]["live"] == 0
    finally:
        sim.stop()
        srv.close()


def test_uplink_connects_after_server_comes_up():
    placeholder = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    placeholder.bind(("127.0.0.1", 0))
    addr = placeholder.getsockname()
    placeholder.close()     # port free again; device will retry until it binds
    sim = SimDevice(server=addr).start()
    try:
        time.sleep(0.3)
        assert not sim.connected
        srv = FakeServer.__new__(FakeServer)
        srv.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.listener.bind(addr)
        srv.listener.listen(1)
        srv.addr = addr
        srv.sock = None
        srv.reader = P.FrameReader()
        srv.inbox = []
        try:
            srv.accept(timeout=5)
            srv.wait_for(lambda m: isinstance(m, P.Hello))
        finally:
            srv.close()
    finally:
        sim.stop()
