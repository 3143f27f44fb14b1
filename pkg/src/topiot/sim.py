"""Simulated device.

One background thread owns the VM, its board, and every socket; the
public API posts closures to that thread and waits for the result, so
callers never touch VM state concurrently.  The clock is either
virtual (time moves only through advance(), one cycle per millisecond)
or real (cycles chase the wall clock).

The device can hold an uplink to a server, speaking the binary link
protocol: it sends Hello on connect, answers AddTask with Ack or
Reject, streams task values and share writes, and unloads everything
if the connection drops.  The link comes either from dialing a server
(reconnecting with backoff) or from listening for one to dial in.  A
JSON-lines control socket exposes advance, set-input, and snapshot to
external tooling.
"""

import json
import math
import queue
import select
import socket
import threading
import time

from . import protocol as P
from .bytecode import DecodeError, Image, decode_image
from .values import taskvalue_to_json, val_to_json
from .vm import (
    DEFAULT_ARENA_NODES, DeviceVm, OutOfArena, SdsWritten, TaskFailed,
    TaskValueChanged, VmError,
)

RECONNECT_INTERVAL = 0.5
LOOP_TICK = 0.02


class WrongClockMode(Exception):
    """advance() is only meaningful on a virtual clock."""


class _Box:
    __slots__ = ("event", "result", "error")

    def __init__(self):
        self.event = threading.Event()
        self.result = None
        self.error = None


class SimDevice:
    """A complete simulated device: VM, board, clock, uplink, control port."""

    def __init__(self, arena_nodes: int = DEFAULT_ARENA_NODES,
                 clock: str = "virtual", server=None, control_port=None,
                 listen=None):
        if clock not in ("virtual", "real"):
            raise ValueError(f"clock must be 'virtual' or 'real', not {clock!r}")
        if server is not None and listen is not None:
            raise ValueError("server and listen are mutually exclusive")
        self.vm = DeviceVm(arena_nodes=arena_nodes)
        self.clock = clock
        self.server_addr = server
        self.listen_port = listen
        self.uplink_address = None
        self.control_port = control_port
        self.control_address = None
        self._cmds: queue.Queue = queue.Queue()
        self._thread = None
        self._stopping = False
        self._uplink = None
        self._reader = None
        self._next_connect = 0.0
        self._listener = None
        self._ulistener = None
        self._clients: dict[socket.socket, bytearray] = {}
        self._t0 = 0.0

    ### lifecycle

    def start(self) -> "SimDevice":
        if self._thread is not None:
            raise RuntimeError("already started")
        if self.control_port is not None:
            self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._listener.bind(("127.0.0.1", self.control_port))
            self._listener.listen(8)
            self.control_address = self._listener.getsockname()
        if self.listen_port is not None:
            self._ulistener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._ulistener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._ulistener.bind(("127.0.0.1", self.listen_port))
            self._ulistener.listen(1)
            self.uplink_address = self._ulistener.getsockname()
        self._stopping = False
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stopping = True
        self._thread.join(timeout=5)
        self._thread = None
        for s in list(self._clients):
            s.close()
        self._clients.clear()
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        if self._ulistener is not None:
            self._ulistener.close()
            self._ulistener = None
        if self._uplink is not None:
            self._uplink.close()
            self._uplink = None

    def __enter__(self) -> "SimDevice":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    ### public control API (thread-safe)

    @property
    def now(self) -> int:
        return self.vm.board.now

    @property
    def connected(self) -> bool:
        return self._uplink is not None

    def advance(self, ms) -> int:
        """Run ceil(ms) one-millisecond cycles.  Virtual clock only."""
        if self.clock != "virtual":
            raise WrongClockMode("advance() needs a virtual clock")
        steps = int(math.ceil(ms))

        def go():
            for _ in range(steps):
                self._emit(self.vm.eval_cycle(self.vm.board.now + 1))
            return self.vm.board.now
        return self._post(go)

    def set_input(self, kind: str, idx, value) -> None:
        def go():
            b = self.vm.board
            if kind == "digital":
                b.set_digital_input(int(idx), bool(value))
            elif kind == "analog":
                b.set_analog_input(int(idx), int(value))
            elif kind == "temperature":
                b.set_temperature(int(value))
            elif kind == "humidity":
                b.set_humidity(int(value))
            elif kind == "buttonA":
                b.set_digital_input(4, bool(value))
            elif kind == "buttonB":
                b.set_digital_input(6, bool(value))
            else:
                raise ValueError(f"unknown input kind {kind!r}")
        return self._post(go)

    def snapshot(self) -> dict:
        def go():
            tasks = {}
            for tid, t in self.vm.tasks.items():
                tasks[str(tid)] = {
                    "failed": t.failed,
                    "value": None if t.last_value is None
                    else taskvalue_to_json(t.last_value),
                    "sds": {str(i): val_to_json(v) for i, v in t.sds.items()},
                }
            return {
                "board": self.vm.board.snapshot(),
                "tasks": tasks,
                "arena": {"live": self.vm.arena.live,
                          "peak": self.vm.arena.peak,
                          "capacity": self.vm.arena.capacity},
                "connected": self.connected,
            }
        return self._post(go)

    def load(self, task_id: int, image) -> list:
        """Local (uplink-less) task load; raises on reject."""
        img = image if isinstance(image, Image) else decode_image(image)

        def go():
            notes = self.vm.load_task(task_id, img)
            self._emit(notes)
            return notes
        return self._post(go)

    def unload(self, task_id: int) -> None:
        return self._post(lambda: self.vm.unload_task(task_id))

    def push(self, task_id: int, sds_id: int, val) -> None:
        return self._post(lambda: self.vm.push_sds(task_id, sds_id, val))

    ### loop internals (all below runs on the device thread)

    def _post(self, fn):
        if threading.current_thread() is self._thread:
            return fn()
        if self._thread is None:
            raise RuntimeError("device not running")
        box = _Box()
        self._cmds.put((fn, box))
        if not box.event.wait(timeout=10):
            raise RuntimeError("device thread unresponsive")
        if box.error is not None:
            raise box.error
        return box.result

    def _loop(self) -> None:
        self._t0 = time.monotonic()
        while not self._stopping:
            self._drain_cmds()
            self._connect_uplink()
            self._pump_sockets()
            if self.clock == "real":
                target = int((time.monotonic() - self._t0) * 1000)
                if target > self.vm.board.now:
                    self._emit(self.vm.eval_cycle(target))
        if self._uplink is not None:
            self._uplink.close()
            self._uplink = None

    def _drain_cmds(self) -> None:
        while True:
            try:
                fn, box = self._cmds.get_nowait()
            except queue.Empty:
                return
            try:
                box.result = fn()
            except Exception as e:
                box.error = e
            box.event.set()

    def _connect_uplink(self) -> None:
        if self.server_addr is None or self._uplink is not None:
            return
        if time.monotonic() < self._next_connect:
            return
        self._next_connect = time.monotonic() + RECONNECT_INTERVAL
        try:
            sock = socket.create_connection(self.server_addr, timeout=0.5)
        except OSError:
            return
        self._adopt_uplink(sock)

    def _adopt_uplink(self, sock: socket.socket) -> None:
        sock.setblocking(False)
        self._uplink = sock
        self._reader = P.FrameReader()
        b = self.vm.board
        periphs = P.PERIPH_DHT | P.PERIPH_LEDMATRIX
        self._send(P.Hello(P.PROTOCOL_VERSION, self.vm.arena.capacity,
                           len(b.digital), len(b.analog), periphs))

    def _pump_sockets(self) -> None:
        rlist = list(self._clients)
        if self._listener is not None:
            rlist.append(self._listener)
        if self._ulistener is not None:
            rlist.append(self._ulistener)
        if self._uplink is not None:
            rlist.append(self._uplink)
        tick = 0.001 if self.clock == "real" else LOOP_TICK
        if not rlist:
            time.sleep(tick)
            return
        try:
            ready, _, _ = select.select(rlist, [], [], tick)
        except OSError:
            return
        for s in ready:
            if s is self._listener:
                client, _ = self._listener.accept()
                client.setblocking(False)
                self._clients[client] = bytearray()
            elif s is self._ulistener:
                server, _ = self._ulistener.accept()
                if self._uplink is not None:
                    server.close()     # one link per device; busy
                else:
                    self._adopt_uplink(server)
            elif s is self._uplink:
                self._pump_uplink()
            else:
                self._pump_client(s)

    def _pump_uplink(self) -> None:
        try:
            data = self._uplink.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            data = b""
        if not data:
            self._drop_uplink()
            return
        try:
            msgs = self._reader.feed(data)
        except P.ProtocolError:
            self._drop_uplink()
            return
        for msg in msgs:
            self._handle_uplink_msg(msg)

    def _drop_uplink(self) -> None:
        # a lost server connection takes every loaded task with it
        if self._uplink is not None:
            self._uplink.close()
        self._uplink = None
        self._reader = None
        self.vm.unload_all()

    def _handle_uplink_msg(self, msg) -> None:
        if isinstance(msg, P.AddTask):
            try:
                img = decode_image(msg.image_bytes)
            except DecodeError as e:
                self._send(P.RejectTask(msg.task_id, f"bad-image: {e}"))
                return
            try:
                notes = self.vm.load_task(msg.task_id, img)
            except OutOfArena:
                self._send(P.RejectTask(msg.task_id, "out-of-arena"))
                return
            except VmError as e:
                self._send(P.RejectTask(msg.task_id, str(e)))
                return
            self._send(P.AckTask(msg.task_id))
            self._emit(notes)
        elif isinstance(msg, P.DelTask):
            try:
                self.vm.unload_task(msg.task_id)
            except VmError:
                pass    # deletion raced a failure; nothing to do
        elif isinstance(msg, P.SdsDown):
            try:
                self.vm.push_sds(msg.task_id, msg.sds_id, msg.val)
            except VmError:
                pass
        elif isinstance(msg, P.Ping):
            self._send(P.Pong())
        # anything else from the server is ignorable chatter

    def _emit(self, notes) -> None:
        if self._uplink is None:
            return
        for n in notes:
            if isinstance(n, TaskValueChanged):
                self._send(P.TaskValueMsg(n.task_id, n.value))
            elif isinstance(n, SdsWritten):
                self._send(P.SdsUp(n.task_id, n.sds_id, n.val))
            elif isinstance(n, TaskFailed):
                self._send(P.TaskFail(n.task_id, n.reason))

    def _send(self, msg) -> None:
        if self._uplink is None:
            return
        try:
            self._uplink.sendall(P.encode_message(msg))
        except OSError:
            self._drop_uplink()

    ### control clients (JSON lines)

    def _pump_client(self, sock) -> None:
        try:
            data = sock.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            data = b""
        if not data:
            sock.close()
            self._clients.pop(sock, None)
            return
        buf = self._clients[sock]
        buf.extend(data)
        while b"\n" in buf:
            line, _, rest = bytes(buf).partition(b"\n")
            self._clients[sock] = buf = bytearray(rest)
            reply = self._control_line(line)
            try:
                sock.sendall(json.dumps(reply).encode() + b"\n")
            except OSError:
                sock.close()
                self._clients.pop(sock, None)
                return

    def _control_line(self, line: bytes) -> dict:
        try:
            req = json.loads(line)
            op = req.get("op")
            if op == "advance":
                if self.clock != "virtual":
                    raise WrongClockMode("advance() needs a virtual clock")
                for _ in range(int(math.ceil(float(req["ms"])))):
                    self._emit(self.vm.eval_cycle(self.vm.board.now + 1))
                return {"ok": True, "now": self.vm.board.now}
            if op == "set-input":
                self.set_input(req["kind"], req.get("idx"), req["value"])
                return {"ok": True}
            if op == "snapshot":
                return {"ok": True, "snapshot": self.snapshot()}
            if op == "ping":
                return {"ok": True, "now": self.vm.board.now}
            return {"ok": False, "error": f"unknown op {op!r}"}
        except Exception as e:
            return {"ok": False, "error": str(e)}
