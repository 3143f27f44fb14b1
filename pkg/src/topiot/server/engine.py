"""Server task engine.

One thread owns the task tree, the share registry, and every device
handle.  All other threads (HTTP handlers, device reader threads)
talk to it through an event queue; mutating calls get their reply
only after the tree has been re-evaluated, so an HTTP write is
visible to the next read.

Evaluation is demand-driven: events mark tree paths dirty and one
evaluate round re-ticks just the dirty regions, repeating until no new
dirt appears (a share write during a tick can dirty an editor
elsewhere).  The rounds are counted; convergence bounds in the tests
are expressed in these ticks.
"""

import queue
import socket
import threading
import time
from typing import Optional

from .. import protocol as P
from ..bytecode import CompileError, compile_program, encode_image
from ..values import NOVALUE, TransitionMonitor, val_to_json
from .sds import SdsRegistry
from .stask import DeviceProxy, Editor, SNode, Step

SETTLE_LIMIT = 25


class EngineError(Exception):
    pass


class _Box:
    __slots__ = ("event", "result", "error")

    def __init__(self):
        self.event = threading.Event()
        self.result = None
        self.error = None


class DeviceHandle:
    """Engine-side state for one connected device."""

    def __init__(self, dev_id: str, session, hello: P.Hello):
        self.id = dev_id
        self.session = session
        self.hello = hello
        self.connected = True
        self.last_rx = time.monotonic()
        self.last_ping = 0.0
        self.missed_pongs = 0
        self.next_task_id = 1
        self.tasks: dict[int, DeviceProxy] = {}

    def periph_names(self) -> list:
        names = []
        if self.hello.periphs & P.PERIPH_DHT:
            names.append("dht")
        if self.hello.periphs & P.PERIPH_LEDMATRIX:
            names.append("ledmatrix")
        return names


class DeviceSession(threading.Thread):
    """Reader thread for one device socket; all inbound traffic becomes
    engine events."""

    def __init__(self, engine: "Engine", sock: socket.socket, addr):
        super().__init__(daemon=True)
        self.engine = engine
        self.sock = sock
        self.addr = addr
        self.handle: Optional[DeviceHandle] = None
        self.established = threading.Event()
        self._closing = False
        self._wlock = threading.Lock()

    def run(self) -> None:
        reader = P.FrameReader()
        pending = []
        self.sock.settimeout(0.25)
        deadline = time.monotonic() + P.HANDSHAKE_TIMEOUT
        hello = None
        while hello is None and not self._closing:
            if time.monotonic() > deadline:
                self._shutdown()
                return
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                data = b""
            if not data:
                self._shutdown()
                return
            try:
                msgs = reader.feed(data)
            except P.ProtocolError:
                self._shutdown()
                return
            if msgs:
                if not isinstance(msgs[0], P.Hello):
                    self._shutdown()     # anything before Hello is a stranger
                    return
                hello = msgs[0]
                pending = msgs[1:]
        if hello is None:
            return
        self.engine.post(("connect", self, hello))
        self.established.set()
        for m in pending:
            self.engine.post(("msg", self, m))
        while not self._closing:
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                break
            if not data:
                break
            try:
                msgs = reader.feed(data)
            except P.ProtocolError:
                break
            for m in msgs:
                self.engine.post(("msg", self, m))
        self.engine.post(("gone", self))
        self._shutdown()

    def send(self, msg) -> None:
        try:
            with self._wlock:
                self.sock.sendall(P.encode_message(msg))
        except OSError:
            self.close()

    def close(self) -> None:
        self._closing = True

    def _shutdown(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class Engine:
    """The task engine and its device endpoint."""

    def __init__(self, ping_idle: float = P.PING_IDLE,
                 max_missed_pongs: int = P.MAX_MISSED_PONGS):
        self.sdss = SdsRegistry()
        self.monitor = TransitionMonitor()
        self.root: Optional[SNode] = None
        self.devices: dict[str, DeviceHandle] = {}
        self.default_device: Optional[str] = None
        self.ticks = 0
        self.rewrites = 0
        self.ui_matrix = [[0] * 8 for _ in range(8)]
        self.state: dict = {"version": 0}
        self.ping_idle = ping_idle
        self.max_missed_pongs = max_missed_pongs
        self._proxies: list[DeviceProxy] = []
        self._dirty: set[str] = set()
        self._dirt: set[str] = set()
        self._q: queue.Queue = queue.Queue()
        self._thread: Optional[threading.Thread] = None
        self._listener: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._sessions: list[DeviceSession] = []
        self._dev_counter = 0
        self._stopped = threading.Event()
        self._rebuild_state()

    ### lifecycle

    def start(self, host: str = "127.0.0.1", port: int = 0):
        if self._thread is not None:
            raise EngineError("engine already started")
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(16)
        self._listener.settimeout(0.25)
        self.address = self._listener.getsockname()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()
        return self.address

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stopped.set()
        for s in list(self._sessions):
            s.close()
        self.post(("stop",))
        self._thread.join(timeout=5)
        self._thread = None
        if self._listener is not None:
            self._listener.close()
            self._listener = None

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                sock, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            session = DeviceSession(self, sock, addr)
            self._sessions.append(session)
            session.start()

    def connect_device(self, host: str, port: int, timeout: float = 3.0) -> str:
        """Dial a device that is listening for a server, wait for its
        greeting, and return the new device id."""
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise EngineError(f"connect: {e}")
        session = DeviceSession(self, sock, sock.getpeername())
        self._sessions.append(session)
        session.start()
        if not session.established.wait(timeout=P.HANDSHAKE_TIMEOUT + 1):
            session.close()
            raise EngineError("connect: no greeting from device")
        # the greeting event precedes this call in the queue, so the
        # handle already has its id when we read it
        return self.call(lambda: session.handle.id)

    ### cross-thread interface

    def post(self, ev) -> None:
        self._q.put(ev)

    def call(self, fn, mutating: bool = False):
        """Run fn on the engine thread; with mutating=True the reply
        waits for the re-evaluation that follows."""
        box = _Box()
        self.post(("call", fn, box, mutating))
        if not box.event.wait(timeout=10):
            raise EngineError("engine unresponsive")
        if box.error is not None:
            raise box.error
        return box.result

    def mutate(self, fn):
        return self.call(fn, mutating=True)

    def read_state(self) -> dict:
        return self.state

    ### engine thread: main loop

    def _loop(self) -> None:
        hk = max(0.05, self.ping_idle / 4)
        running = True
        while running:
            try:
                batch = [self._q.get(timeout=hk)]
            except queue.Empty:
                self._housekeeping()
                continue
            while True:
                try:
                    batch.append(self._q.get_nowait())
                except queue.Empty:
                    break
            mutated = False
            held_boxes = []
            for ev in batch:
                kind = ev[0]
                if kind == "stop":
                    running = False
                elif kind == "call":
                    _, fn, box, mutating = ev
                    try:
                        box.result = fn()
                    except Exception as e:
                        box.error = e
                    if mutating:
                        mutated = True
                        held_boxes.append(box)
                    else:
                        box.event.set()
                elif kind == "connect":
                    self._on_connect(ev[1], ev[2])
                    mutated = True
                elif kind == "msg":
                    self._on_msg(ev[1], ev[2])
                    mutated = True
                elif kind == "gone":
                    self._on_gone(ev[1])
                    mutated = True
            if mutated:
                self.evaluate()
                self._rebuild_state()
            for box in held_boxes:
                box.event.set()

    def _housekeeping(self) -> None:
        now = time.monotonic()
        for handle in list(self.devices.values()):
            if not handle.connected:
                continue
            silence = now - handle.last_rx
            if silence <= self.ping_idle:
                continue
            if now - handle.last_ping < self.ping_idle:
                continue
            if handle.missed_pongs >= self.max_missed_pongs:
                handle.session.close()      # reader thread posts "gone"
                continue
            handle.session.send(P.Ping())
            handle.last_ping = now
            handle.missed_pongs += 1

    ### engine thread: tree evaluation

    def set_root(self, node: Optional[SNode]):
        def go():
            if self.root is not None:
                self.root.unmount(self)
            self.root = node
            if node is not None:
                node.mount(self, "")
            self._dirty.add("")
        return self.mutate(go)

    def evaluate(self) -> None:
        self.ticks += 1
        if self.root is None:
            self._dirty.clear()
            return
        for _ in range(SETTLE_LIMIT):
            if not self._dirty:
                break
            self._dirt, self._dirty = self._dirty, set()
            self.root.tick(self)
            self._dirt = set()
        else:
            raise EngineError("task tree did not settle")

    def is_dirty(self, path: str) -> bool:
        for d in self._dirt:
            if d == path or d.startswith(path + "/") or \
                    path.startswith(d + "/") or d == "":
                return True
        return False

    def mark_dirty(self, path: str) -> None:
        self._dirty.add(path)

    def observe(self, node: SNode, tv) -> None:
        self.monitor.observe(id(node), tv)

    def forget(self, node: SNode) -> None:
        self.monitor.forget(id(node))

    @property
    def violations(self):
        return self.monitor.violations

    ### engine thread: proxies

    def attach_proxy(self, proxy: DeviceProxy) -> None:
        try:
            proxy.image_bytes = encode_image(compile_program(proxy.program))
        except CompileError as e:
            proxy.state = "failed"
            proxy.failure = f"compile: {e}"
            return
        for i, s in enumerate(proxy.program.sdss):
            if not s.lifted:
                continue
            sds = self.sdss.ensure(s.key, s.init)
            proxy.bound[i] = sds
            proxy._cancels.append(sds.subscribe(self._downlink(proxy, i)))
        self._proxies.append(proxy)
        self._try_deploy(proxy)

    def _downlink(self, proxy: DeviceProxy, sid: int):
        def push(val, origin):
            if origin is proxy:
                return      # the device's own write must not bounce back
            if proxy.state in ("sent", "running"):
                handle = self.devices.get(proxy.device_id)
                if handle is not None and handle.connected:
                    handle.session.send(P.SdsDown(proxy.task_id, sid, val))
        return push

    def detach_proxy(self, proxy: DeviceProxy) -> None:
        if proxy in self._proxies:
            self._proxies.remove(proxy)
        handle = self.devices.get(proxy.device_id)
        if handle is not None and proxy.task_id is not None:
            handle.tasks.pop(proxy.task_id, None)
            if handle.connected and proxy.state in ("sent", "running"):
                handle.session.send(P.DelTask(proxy.task_id))
        proxy.state = "waiting"
        proxy.task_id = None
        proxy.device_id = None

    def _pick_device(self, proxy: DeviceProxy) -> Optional[DeviceHandle]:
        if proxy.device_pref is not None:
            h = self.devices.get(proxy.device_pref)
            return h if h is not None and h.connected else None
        if self.default_device is not None:
            h = self.devices.get(self.default_device)
            if h is not None and h.connected:
                return h
        for h in self.devices.values():
            if h.connected:
                return h
        return None

    def _try_deploy(self, proxy: DeviceProxy) -> None:
        if proxy.state != "waiting" or proxy.image_bytes is None:
            return
        handle = self._pick_device(proxy)
        if handle is None:
            return
        tid = handle.next_task_id
        handle.next_task_id += 1
        proxy.task_id = tid
        proxy.device_id = handle.id
        proxy.state = "sent"
        handle.tasks[tid] = proxy
        handle.session.send(P.AddTask(tid, proxy.image_bytes))
        self.mark_dirty(proxy.path)

    ### engine thread: device events

    def _on_connect(self, session: DeviceSession, hello: P.Hello) -> None:
        self._dev_counter += 1
        dev_id = f"dev{self._dev_counter}"
        handle = DeviceHandle(dev_id, session, hello)
        session.handle = handle
        self.devices[dev_id] = handle
        for proxy in list(self._proxies):
            self._try_deploy(proxy)

    def _on_gone(self, session: DeviceSession) -> None:
        handle = session.handle
        if handle is None or not handle.connected:
            return
        handle.connected = False
        self.devices.pop(handle.id, None)
        if session in self._sessions:
            self._sessions.remove(session)
        for proxy in list(handle.tasks.values()):
            # a stable task had finished; anything else starts over on
            # the next device as an observably fresh run
            if proxy.tv.stable:
                proxy.state = "done"
            else:
                proxy.state = "waiting"
                proxy.tv = NOVALUE
                self.forget(proxy)
            proxy.task_id = None
            proxy.device_id = None
            self.mark_dirty(proxy.path)
        handle.tasks.clear()
        for proxy in list(self._proxies):
            self._try_deploy(proxy)

    def _on_msg(self, session: DeviceSession, msg) -> None:
        handle = session.handle
        if handle is None:
            return
        handle.last_rx = time.monotonic()
        handle.missed_pongs = 0
        if isinstance(msg, P.Pong):
            return
        if isinstance(msg, P.Ping):
            session.send(P.Pong())
            return
        if isinstance(msg, (P.AckTask, P.RejectTask, P.TaskValueMsg,
                            P.SdsUp, P.TaskFail)):
            proxy = handle.tasks.get(msg.task_id)
            if proxy is None:
                return      # raced a DelTask; stale traffic is fine
            if isinstance(msg, P.AckTask):
                proxy.state = "running"
                # bring the device in line with current server values
                for sid, sds in sorted(proxy.bound.items()):
                    session.send(P.SdsDown(msg.task_id, sid, sds.value))
                self.mark_dirty(proxy.path)
            elif isinstance(msg, P.RejectTask):
                handle.tasks.pop(msg.task_id, None)
                proxy.state = "failed"
                proxy.failure = msg.reason
                self.mark_dirty(proxy.path)
            elif isinstance(msg, P.TaskValueMsg):
                proxy.tv = msg.value
                self.mark_dirty(proxy.path)
            elif isinstance(msg, P.SdsUp):
                sds = proxy.bound.get(msg.sds_id)
                if sds is not None:
                    sds.write(msg.val, origin=proxy)
                self.mark_dirty(proxy.path)
            else:   # TaskFail
                handle.tasks.pop(msg.task_id, None)
                proxy.state = "failed"
                proxy.failure = msg.reason
                self.mark_dirty(proxy.path)

    ### engine thread: state snapshot for HTTP/WS readers

    def _rebuild_state(self) -> None:
        nodes = list(self.root.walk()) if self.root is not None else []
        tasks = [n.descriptor() for n in nodes]
        pin_states = {}
        for key, sds in self.sdss.items():
            if key.startswith("pin:"):
                pin_states[key[4:]] = val_to_json(sds.value)
        self.state = {
            "version": self.state.get("version", 0) + 1,
            "ticks": self.ticks,
            "rewrites": self.rewrites,
            "tasks": tasks,
            "taskValues": {d["path"]: d["value"] for d in tasks},
            "sdsValues": {key: val_to_json(s.value)
                          for key, s in self.sdss.items()},
            "sdsVersions": {key: s.version for key, s in self.sdss.items()},
            "matrixFrame": [row[:] for row in self.ui_matrix],
            "pinStates": pin_states,
            "devices": [self._device_json(h) for h in self.devices.values()],
        }

    def _device_json(self, h: DeviceHandle) -> dict:
        return {
            "id": h.id,
            "connected": h.connected,
            "arenaNodes": h.hello.arena_nodes,
            "digitalPins": h.hello.digital_pins,
            "analogPins": h.hello.analog_pins,
            "periphs": h.periph_names(),
            "tasks": [{"taskId": tid, "path": p.path, "state": p.state}
                      for tid, p in sorted(h.tasks.items())],
        }

    ### tree lookup helpers (engine thread)

    def node_at(self, path: str) -> SNode:
        for n in (self.root.walk() if self.root is not None else []):
            if n.path == path:
                return n
        raise LookupError(f"no task at {path!r}")

    def editor_at(self, path: str) -> Editor:
        n = self.node_at(path)
        if not isinstance(n, Editor):
            raise LookupError(f"{path!r} is not an editor")
        return n

    def step_at(self, path: str) -> Step:
        n = self.node_at(path)
        if not isinstance(n, Step):
            raise LookupError(f"{path!r} has no actions")
        return n
