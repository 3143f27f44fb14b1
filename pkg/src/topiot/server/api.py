"""HTTP and WebSocket front for the engine.

Thin by design: every handler either reads the engine's last published
state snapshot or posts one mutating closure and returns once the tree
has settled.  The WebSocket pushes the snapshot whenever its version
moves.
"""

import asyncio
import json
import socket

from fastapi import Body, FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from ..values import val_from_json
from .engine import Engine, EngineError

WS_POLL = 0.05
SIM_RELAY_TIMEOUT = 3.0


def _node_path(raw: str) -> str:
    return "/" + raw if raw else ""


def _relay_sim_op(addr, op: dict) -> dict:
    """One request/reply exchange on a simulator control port."""
    with socket.create_connection(addr, timeout=SIM_RELAY_TIMEOUT) as sock:
        sock.settimeout(SIM_RELAY_TIMEOUT)
        sock.sendall(json.dumps(op).encode() + b"\n")
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(65536)
            if not chunk:
                raise OSError("control port closed mid-reply")
            buf += chunk
    return json.loads(buf)


def create_app(engine: Engine, ui_dir=None) -> FastAPI:
    app = FastAPI(title="topiot", docs_url=None, redoc_url=None)
    sim_control = {"addr": None}

    @app.get("/api/state")
    def get_state():
        return engine.read_state()

    @app.get("/api/devices")
    def get_devices():
        state = engine.read_state()
        return {"devices": state.get("devices", []),
                "default": engine.default_device}

    @app.post("/api/devices")
    def post_devices(payload: dict = Body(...)):
        # {"host", "port"}: dial a listening device and add it.
        # {"default": id-or-null}: choose where new proxies deploy.
        if "host" in payload or "port" in payload:
            host, port = payload.get("host"), payload.get("port")
            if not isinstance(host, str) or not isinstance(port, int):
                raise HTTPException(422, "need host (string) and port (int)")
            try:
                dev = engine.connect_device(host, port)
            except EngineError as e:
                raise HTTPException(502, str(e))
            return {"ok": True, "id": dev}

        dev = payload.get("default")

        def go():
            if dev is not None and dev not in engine.devices:
                raise LookupError(f"no device {dev!r}")
            engine.default_device = dev
        try:
            engine.mutate(go)
        except LookupError as e:
            raise HTTPException(404, str(e))
        return {"ok": True, "default": dev}

    @app.get("/api/tasks")
    def get_tasks():
        return {"tasks": engine.read_state().get("tasks", [])}

    @app.post("/api/editor/{path:path}")
    def set_editor(path: str, payload: dict = Body(...)):
        node_path = _node_path(path)

        def go():
            val = val_from_json(payload.get("value"))
            engine.editor_at(node_path).set(engine, val)
        try:
            engine.mutate(go)
        except LookupError as e:
            raise HTTPException(404, str(e))
        except ValueError as e:
            raise HTTPException(422, str(e))
        return {"ok": True, "version": engine.read_state().get("version")}

    @app.post("/api/action/{path:path}")
    def fire_action(path: str, payload: dict = Body(...)):
        node_path = _node_path(path)
        label = payload.get("label")
        if not isinstance(label, str):
            raise HTTPException(422, "missing action label")

        def go():
            engine.step_at(node_path).act(engine, label)
        try:
            engine.mutate(go)
        except LookupError as e:
            raise HTTPException(404, str(e))
        except ValueError as e:
            raise HTTPException(422, str(e))
        return {"ok": True, "version": engine.read_state().get("version")}

    @app.get("/api/sds")
    def get_sds():
        state = engine.read_state()
        return {"values": state.get("sdsValues", {}),
                "versions": state.get("sdsVersions", {})}

    @app.post("/api/sds/{key}")
    def set_sds(key: str, payload: dict = Body(...)):
        def go():
            sds = engine.sdss.get(key)
            if sds is None:
                raise LookupError(f"no share {key!r}")
            val = val_from_json(payload.get("value"))
            sds.write(val)
        try:
            engine.mutate(go)
        except LookupError as e:
            raise HTTPException(404, str(e))
        except ValueError as e:
            raise HTTPException(422, str(e))
        return {"ok": True, "version": engine.read_state().get("version")}

    @app.get("/api/sim")
    def get_sim():
        addr = sim_control["addr"]
        return {"control": None if addr is None else list(addr)}

    @app.post("/api/sim")
    def register_sim(payload: dict = Body(...)):
        # Point the relay at a simulator's control port (or clear it).
        host, port = payload.get("host"), payload.get("port")
        if host is None and port is None:
            sim_control["addr"] = None
            return {"ok": True, "control": None}
        if not isinstance(host, str) or not isinstance(port, int):
            raise HTTPException(422, "need host (string) and port (int)")
        sim_control["addr"] = (host, port)
        return {"ok": True, "control": [host, port]}

    @app.post("/api/sim/op")
    def relay_sim_op(payload: dict = Body(...)):
        # Virtual knobs (set-input, advance, snapshot) live on the
        # simulator's control port; browsers cannot speak raw TCP, so
        # the server forwards one op per request.
        addr = sim_control["addr"]
        if addr is None:
            raise HTTPException(409, "no simulator control port registered")
        try:
            return _relay_sim_op(addr, payload)
        except (OSError, ValueError) as e:
            raise HTTPException(502, f"relay: {e}")

    @app.websocket("/ws")
    async def ws_state(sock: WebSocket):
        await sock.accept()
        last = -1
        try:
            while True:
                state = engine.read_state()
                version = state.get("version", 0)
                if version != last:
                    last = version
                    await sock.send_json(state)
                try:
                    # inbound traffic is ignored; this doubles as the
                    # disconnect detector between pushes
                    await asyncio.wait_for(sock.receive_text(),
                                           timeout=WS_POLL)
                except asyncio.TimeoutError:
                    pass
        except WebSocketDisconnect:
            pass
        except RuntimeError:
            pass    # receive after disconnect during shutdown

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        # mounted last so /api/* and /ws win the route match
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve_http(engine: Engine, host: str = "127.0.0.1", port: int = 8080,
               log_level: str = "warning", ui_dir=None) -> None:
    """Run the HTTP front until interrupted (blocking)."""
    import uvicorn

    config = uvicorn.Config(create_app(engine, ui_dir=ui_dir), host=host,
                            port=port, log_level=log_level)
    uvicorn.Server(config).run()
