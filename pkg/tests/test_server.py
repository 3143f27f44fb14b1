"""Server engine: tree semantics, device sessions, HTTP/WS front."""

import socket
import time

import pytest
from fastapi.testclient import TestClient

import topiot.lang as L
from topiot import protocol as P
from topiot.catalog import blink_imperative
from topiot.server import (ConstValue, DeviceProxy, Editor, Engine, Idle,
                           MapValue, OnAction, OnValue, ParAnd, ParOr, Step,
                           WithShared, counter_workflow, create_app,
                           matrix_workflow, thermostat_workflow)
from topiot.server.sds import SdsRegistry, ServerSds
from topiot.sim import SimDevice
from topiot.values import vbool, vint


def wait_until(pred, timeout=5.0, step=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        v = pred()
        if v:
            return v
        time.sleep(step)
    raise AssertionError("condition not reached within %.1fs" % timeout)


@pytest.fixture
def engine():
    e = Engine(ping_idle=1.0)
    e.start(port=0)
    yield e
    e.stop()


def proxy_states(engine):
    return [t["state"] for t in engine.read_state()["tasks"]
            if t["kind"] == "device"]


### share registry

class TestSds:
    def test_write_notifies_with_origin(self):
        s = ServerSds("k", vint(0))
        seen = []
        cancel = s.subscribe(lambda v, o: seen.append((v, o)))
        s.write(vint(5), origin="me")
        assert s.value == vint(5) and s.version == 1
        assert seen == [(vint(5), "me")]
        cancel()
        s.write(vint(6))
        assert len(seen) == 1

    def test_ensure_joins_existing(self):
        reg = SdsRegistry()
        a = reg.ensure("temp", vint(0))
        a.write(vint(77))
        b = reg.ensure("temp", vint(123))
        assert b is a and b.value == vint(77)

    def test_anonymous_keys_distinct(self):
        reg = SdsRegistry()
        a = reg.ensure("", vint(1))
        b = reg.ensure("", vint(2))
        assert a is not b and a.key != b.key


### tree semantics (no devices involved)

class TestTree:
    def test_editor_set_moves_task_value(self, engine):
        engine.set_root(Editor(vint(10), label="n"))
        assert engine.read_state()["taskValues"][""] == {
            "kind": "unstable", "value": 10}
        engine.mutate(lambda: engine.editor_at("").set(engine, vint(42)))
        assert engine.read_state()["taskValues"][""] == {
            "kind": "unstable", "value": 42}

    def test_editor_rejects_shape_change(self, engine):
        engine.set_root(Editor(vint(10)))
        with pytest.raises(ValueError):
            engine.mutate(lambda: engine.editor_at("").set(engine, vbool(True)))

    def test_parallel_combination(self, engine):
        engine.set_root(ParAnd(ConstValue(vint(1)), Editor(vint(2))))
        tv = engine.read_state()["taskValues"][""]
        # stable&unstable pair -> unstable
        assert tv == {"kind": "unstable", "value": [1, 2]}
        engine.set_root(ParOr(ConstValue(vint(9)), Editor(vint(2))))
        assert engine.read_state()["taskValues"][""] == {
            "kind": "stable", "value": 9}

    def test_step_action_fires_and_rewrites(self, engine):
        engine.set_root(Step(Idle(), [
            OnAction("go", lambda _v: ConstValue(vint(7))),
        ]))
        s = engine.read_state()
        assert s["tasks"][0]["actions"] == [{"label": "go", "enabled": True}]
        r0 = s["rewrites"]
        engine.mutate(lambda: engine.step_at("").act(engine, "go"))
        s = engine.read_state()
        assert s["taskValues"][""] == {"kind": "stable", "value": 7}
        assert s["rewrites"] == r0 + 1
        assert s["tasks"][0]["actions"] == []

    def test_action_needing_value_gated(self, engine):
        engine.set_root(Step(Idle(), [
            OnAction("use", lambda v: ConstValue(v), needs_value=True),
        ]))
        assert engine.read_state()["tasks"][0]["actions"] == [
            {"label": "use", "enabled": False}]
        with pytest.raises(ValueError):
            engine.mutate(lambda: engine.step_at("").act(engine, "use"))

    def test_step_on_value_fires_from_editor(self, engine):
        engine.set_root(Step(Editor(vint(0)), [
            OnValue(lambda v: v.v > 10, lambda v: ConstValue(v)),
        ]))
        assert engine.read_state()["taskValues"][""] == {"kind": "novalue"}
        engine.mutate(lambda: engine.editor_at("/0").set(engine, vint(5)))
        assert engine.read_state()["taskValues"][""] == {"kind": "novalue"}
        engine.mutate(lambda: engine.editor_at("/0").set(engine, vint(11)))
        assert engine.read_state()["taskValues"][""] == {
            "kind": "stable", "value": 11}

    def test_forever_respawns_on_stable(self, engine):
        engine.set_root(counter_workflow())
        path = lambda: [t["path"] for t in engine.read_state()["tasks"]
                        if t["kind"] == "step"][0]
        p1 = path()
        engine.mutate(lambda: engine.step_at(p1).act(engine, "increment"))
        p2 = path()
        assert p2 != p1             # a fresh round, new identity
        assert engine.read_state()["sdsValues"]["count"] == 1
        engine.mutate(lambda: engine.step_at(p2).act(engine, "increment"))
        assert engine.read_state()["sdsValues"]["count"] == 2

    def test_transitions_stay_legal(self, engine):
        engine.set_root(WithShared("x", vint(0), lambda sds: ParAnd(
            Editor(vint(0), sds=sds),
            Step(MapValue(Editor(vint(0), sds=sds), lambda v: vint(v.v * 2)),
                 [OnValue(lambda v: v.v >= 10, lambda v: ConstValue(v))]))))
        for i in (1, 3, 2, 5, 9):
            engine.mutate(
                lambda i=i: engine.editor_at("/0/0").set(engine, vint(i)))
        assert engine.read_state()["taskValues"]["/0/1"] == {
            "kind": "stable", "value": 10}
        assert engine.violations == []

    def test_clean_subtree_not_recomputed(self, engine):
        class Counting(ConstValue):
            computes = 0

            def compute(self, eng):
                type(self).computes += 1
                return super().compute(eng)

        engine.set_root(ParAnd(Counting(vint(1), stable=False),
                               Editor(vint(0))))
        base = Counting.computes
        for i in range(5):
            engine.mutate(
                lambda i=i: engine.editor_at("/1").set(engine, vint(i)))
        assert Counting.computes == base

    def test_pin_prefixed_shares_surface_as_pins(self, engine):
        engine.mutate(lambda: engine.sdss.ensure("pin:d4", vbool(True)))
        assert engine.read_state()["pinStates"] == {"d4": True}


### proxies against a simulated device

class TestDeviceIntegration:
    def test_deploy_waits_for_device(self, engine):
        engine.set_root(thermostat_workflow())
        assert proxy_states(engine) == ["waiting"]
        with SimDevice(arena_nodes=256, clock="virtual",
                       server=engine.address) as sim:
            wait_until(lambda: proxy_states(engine) == ["running"])
            devs = engine.read_state()["devices"]
            assert [d["id"] for d in devs] == ["dev1"]
            assert devs[0]["periphs"] == ["dht", "ledmatrix"]
            assert devs[0]["tasks"][0]["state"] == "running"
            assert len(sim.snapshot()["tasks"]) == 1

    def test_share_sync_on_ack(self, engine):
        # the server value wins over the program initialiser
        engine.set_root(thermostat_workflow())
        engine.mutate(
            lambda: engine.sdss.get("target").write(vint(300)))
        with SimDevice(arena_nodes=256, clock="virtual",
                       server=engine.address) as sim:
            wait_until(lambda: proxy_states(engine) == ["running"])
            def target_on_device():
                tasks = sim.snapshot()["tasks"]
                if not tasks:
                    return None
                sim.advance(1)
                return tasks["1"]["sds"].get("1") == 300
            wait_until(target_on_device)

    def test_device_write_reaches_server_share(self, engine):
        engine.set_root(thermostat_workflow())
        with SimDevice(arena_nodes=256, clock="virtual",
                       server=engine.address) as sim:
            wait_until(lambda: proxy_states(engine) == ["running"])
            sim.set_input("temperature", 0, 240)
            sim.advance(3)
            wait_until(
                lambda: engine.read_state()["sdsValues"]["temp"] == 240)
            assert engine.violations == []

    def test_editor_write_moves_device_heater(self, engine):
        engine.set_root(thermostat_workflow())
        with SimDevice(arena_nodes=256, clock="virtual",
                       server=engine.address) as sim:
            wait_until(lambda: proxy_states(engine) == ["running"])
            sim.set_input("temperature", 0, 240)
            sim.advance(3)
            wait_until(lambda: sim.snapshot()["board"]["digital"][4])
            engine.mutate(
                lambda: engine.editor_at("/0/0").set(engine, vint(230)))
            def heater_off():
                sim.advance(1)
                return not sim.snapshot()["board"]["digital"][4]
            wait_until(heater_off)

    def test_reject_marks_proxy_failed(self, engine):
        engine.set_root(DeviceProxy(blink_imperative(), label="blink"))
        with SimDevice(arena_nodes=2, clock="virtual",
                       server=engine.address):
            wait_until(lambda: proxy_states(engine) == ["failed"])
            s = engine.read_state()["tasks"][0]
            assert "out-of-arena" in s["failure"]

    def test_task_trap_marks_proxy_failed(self, engine):
        pb = L.ProgramBuilder()
        pb.main(L.rtrn(L.lift(1) / 0))
        prog = pb.build()
        engine.set_root(DeviceProxy(prog, label="trap"))
        with SimDevice(arena_nodes=64, clock="virtual",
                       server=engine.address):
            wait_until(lambda: proxy_states(engine) == ["failed"])
            assert engine.read_state()["tasks"][0]["failure"] == "div-by-zero"

    def test_reconnect_redeploys(self, engine):
        engine.set_root(thermostat_workflow())
        with SimDevice(arena_nodes=256, clock="virtual",
                       server=engine.address):
            wait_until(lambda: proxy_states(engine) == ["running"])
        wait_until(lambda: proxy_states(engine) == ["waiting"])
        assert engine.read_state()["devices"] == []
        with SimDevice(arena_nodes=256, clock="virtual",
                       server=engine.address) as sim2:
            wait_until(lambda: proxy_states(engine) == ["running"])
            assert engine.read_state()["devices"][0]["id"] == "dev2"
            assert len(sim2.snapshot()["tasks"]) == 1
        assert engine.violations == []

    def test_detach_unloads_device_task(self, engine):
        engine.set_root(thermostat_workflow())
        with SimDevice(arena_nodes=256, clock="virtual",
                       server=engine.address) as sim:
            wait_until(lambda: proxy_states(engine) == ["running"])
            engine.set_root(None)
            wait_until(lambda: len(sim.snapshot()["tasks"]) == 0)
            assert sim.snapshot()["arena"]["live"] == 0

    def test_matrix_fanout_converges_to_same_frame(self, engine):
        engine.set_root(matrix_workflow(stepwise=True))
        with SimDevice(arena_nodes=512, clock="virtual",
                       server=engine.address) as sim:
            wait_until(lambda: proxy_states(engine) == ["running"] * 19)
            snap = sim.snapshot()
            assert len(snap["tasks"]) == 19
            frame_stepwise = snap["board"]["matrix"]
        e2 = Engine()
        e2.start(port=0)
        try:
            e2.set_root(matrix_workflow(stepwise=False))
            with SimDevice(arena_nodes=512, clock="virtual",
                           server=e2.address) as sim2:
                wait_until(lambda: proxy_states(e2) == ["running"])
                snap2 = sim2.snapshot()
                assert len(snap2["tasks"]) == 1
                assert snap2["board"]["matrix"] == frame_stepwise
        finally:
            e2.stop()
        assert sum(map(sum, frame_stepwise)) == 18
        assert engine.read_state()["matrixFrame"] == frame_stepwise


### convergence bounds and echo suppression

def writer_program():
    """Counts up in a lifted share, one increment per cycle."""
    pb = L.ProgramBuilder()
    sh = pb.lift_sds(L.INT, vint(0), "count")
    pb.main(L.rpeat(L.step(
        L.get_sds(sh),
        L.if_value(None, lambda v: L.set_sds(sh, v + 1)))))
    return pb.build()


class TestConvergence:
    def test_round_trip_bounds_and_no_echo(self, engine):
        engine.set_root(DeviceProxy(writer_program(), label="counter"))
        sent_down = []
        with SimDevice(arena_nodes=64, clock="virtual",
                       server=engine.address) as sim:
            wait_until(lambda: proxy_states(engine) == ["running"])
            handle = wait_until(lambda: engine.devices.get("dev1"))
            real_send = handle.session.send

            def spy(msg):
                if isinstance(msg, P.SdsDown):
                    sent_down.append(msg)
                real_send(msg)
            handle.session.send = spy

            sim.advance(3)
            wait_until(
                lambda: engine.read_state()["sdsValues"]["count"] >= 3)

            # server -> device: one engine tick to send, applied by the
            # device within the next two cycles
            t0 = engine.read_state()["ticks"]
            engine.mutate(lambda: engine.sdss.get("count").write(vint(500)))
            assert engine.read_state()["ticks"] == t0 + 1
            assert len(sent_down) == 1 and sent_down[0].val == vint(500)
            sim.advance(2)

            # device -> server: the increment lands within two ticks
            t1 = engine.read_state()["ticks"]
            wait_until(
                lambda: engine.read_state()["sdsValues"]["count"] >= 501)
            assert engine.read_state()["ticks"] - t1 <= 2
            # and the device's own write was never echoed back down
            assert len(sent_down) == 1
        assert engine.violations == []


### dial-out: the server can make the connection too

class TestDialOut:
    def test_connect_and_deploy(self, engine):
        engine.set_root(thermostat_workflow())
        with SimDevice(arena_nodes=256, clock="virtual", listen=0) as sim:
            host, port = sim.uplink_address
            dev = engine.connect_device(host, port)
            assert dev == "dev1"
            wait_until(lambda: proxy_states(engine) == ["running"])
            assert len(sim.snapshot()["tasks"]) == 1

    def test_connect_unreachable(self, engine):
        from topiot.server import EngineError
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        with pytest.raises(EngineError, match="connect"):
            engine.connect_device("127.0.0.1", port, timeout=0.5)

    def test_pin_share_streams_to_state(self, engine):
        from topiot.server import blink_workflow
        engine.set_root(blink_workflow())
        with SimDevice(arena_nodes=256, clock="virtual",
                       server=engine.address) as sim:
            wait_until(lambda: proxy_states(engine) == ["running"])
            wait_until(
                lambda: engine.read_state()["pinStates"].get("d2") is True)
            sim.advance(500)
            wait_until(
                lambda: engine.read_state()["pinStates"].get("d2") is False)
        assert engine.violations == []


### liveness policing

class TestPing:
    def _hello(self, sock):
        sock.sendall(P.encode_message(P.Hello(1, 64, 16, 8, 0)))

    def test_silent_device_goes_offline(self):
        e = Engine(ping_idle=0.15, max_missed_pongs=1)
        e.start(port=0)
        try:
            with socket.create_connection(e.address) as sock:
                self._hello(sock)
                wait_until(lambda: e.read_state()["devices"])
                sock.settimeout(5)
                raw = sock.recv(3)
                assert raw == P.encode_message(P.Ping())
                # never answer; the server gives up
                wait_until(lambda: not e.read_state()["devices"], timeout=5)
        finally:
            e.stop()

    def test_answering_pongs_stays_online(self):
        e = Engine(ping_idle=0.15, max_missed_pongs=1)
        e.start(port=0)
        try:
            with socket.create_connection(e.address) as sock:
                self._hello(sock)
                wait_until(lambda: e.read_state()["devices"])
                sock.settimeout(0.5)
                end = time.monotonic() + 1.2
                while time.monotonic() < end:
                    try:
                        if sock.recv(3):
                            sock.sendall(P.encode_message(P.Pong()))
                    except socket.timeout:
                        pass
                assert e.read_state()["devices"]
        finally:
            e.stop()

    def test_no_hello_within_deadline_drops(self):
        # the handshake window is a protocol constant; pinging the
        # listener without a Hello must never yield a device
        e = Engine(ping_idle=0.2)
        e.start(port=0)
        try:
            with socket.create_connection(e.address) as sock:
                sock.sendall(P.encode_message(P.Pong()))
                time.sleep(0.3)
                assert e.read_state()["devices"] == []
        finally:
            e.stop()


### HTTP and WebSocket front

class TestHttp:
    @pytest.fixture
    def client(self, engine):
        engine.set_root(counter_workflow())
        return TestClient(create_app(engine))

    def test_state_shape(self, client):
        s = client.get("/api/state").json()
        for key in ("version", "tasks", "taskValues", "sdsValues",
                    "matrixFrame", "pinStates", "devices", "ticks",
                    "rewrites"):
            assert key in s

    def test_action_round_trip(self, client):
        s = client.get("/api/state").json()
        path = [t["path"] for t in s["tasks"] if t.get("actions")][0]
        r = client.post("/api/action" + path, json={"label": "increment"})
        assert r.status_code == 200
        assert client.get("/api/sds").json()["values"]["count"] == 1

    def test_action_errors(self, client):
        assert client.post("/api/action/zzz",
                           json={"label": "x"}).status_code == 404
        s = client.get("/api/state").json()
        path = [t["path"] for t in s["tasks"] if t.get("actions")][0]
        assert client.post("/api/action" + path,
                           json={"label": "zzz"}).status_code == 404
        assert client.post("/api/action" + path,
                           json={}).status_code == 422

    def test_editor_endpoint(self, engine):
        engine.set_root(Editor(vint(5), label="n"))
        client = TestClient(create_app(engine))
        r = client.post("/api/editor/", json={"value": 9})
        assert r.status_code == 200
        assert client.get("/api/state").json()["taskValues"][""] == {
            "kind": "unstable", "value": 9}
        assert client.post("/api/editor/", json={"value": True}).status_code \
            == 422
        assert client.post("/api/editor/nope",
                           json={"value": 1}).status_code == 404

    def test_sds_endpoints(self, client):
        r = client.post("/api/sds/count", json={"value": 41})
        assert r.status_code == 200
        assert client.get("/api/sds").json()["values"]["count"] == 41
        assert client.post("/api/sds/ghost",
                           json={"value": 1}).status_code == 404

    def test_default_device_validation(self, client):
        assert client.post("/api/devices",
                           json={"default": "dev9"}).status_code == 404
        r = client.get("/api/devices")
        assert r.json() == {"devices": [], "default": None}

    def test_device_connect_endpoint(self, engine):
        engine.set_root(thermostat_workflow())
        client = TestClient(create_app(engine))
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        dead_port = s.getsockname()[1]
        s.close()
        r = client.post("/api/devices",
                        json={"host": "127.0.0.1", "port": dead_port})
        assert r.status_code == 502
        assert client.post("/api/devices",
                           json={"host": 5, "port": "x"}).status_code == 422
        with SimDevice(arena_nodes=256, clock="virtual", listen=0) as sim:
            host, port = sim.uplink_address
            r = client.post("/api/devices", json={"host": host, "port": port})
            assert r.status_code == 200
            assert r.json()["id"] == "dev1"
            wait_until(lambda: proxy_states(engine) == ["running"])

    def test_sim_relay(self, engine):
        client = TestClient(create_app(engine))
        assert client.post("/api/sim/op",
                           json={"op": "ping"}).status_code == 409
        with SimDevice(arena_nodes=64, clock="virtual",
                       control_port=0) as sim:
            host, port = sim.control_address
            r = client.post("/api/sim", json={"host": host, "port": port})
            assert r.json()["ok"]
            assert client.get("/api/sim").json()["control"] == [host, port]
            rep = client.post("/api/sim/op",
                              json={"op": "set-input", "kind": "temperature",
                                    "value": 260}).json()
            assert rep == {"ok": True}
            rep = client.post("/api/sim/op", json={"op": "snapshot"}).json()
            assert rep["ok"]
            assert rep["snapshot"]["board"]["temperature"] == 260
        # with the simulator gone the relay reports a bad gateway
        assert client.post("/api/sim/op",
                           json={"op": "ping"}).status_code == 502

    def test_ws_pushes_on_change(self, client):
        with client.websocket_connect("/ws") as ws:
            first = ws.receive_json()
            assert "sdsValues" in first
            path = [t["path"] for t in first["tasks"]
                    if t.get("actions")][0]
            client.post("/api/action" + path, json={"label": "increment"})
            nxt = ws.receive_json()
            assert nxt["version"] > first["version"]
            assert nxt["sdsValues"]["count"] == 1
