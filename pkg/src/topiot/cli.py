"""Command line front.

    topiot show [NAME]          print a built-in program (or list them)
    topiot compile NAME         compile to a task image
    topiot disasm TARGET        disassemble an image file or built-in
    topiot run NAME             run under the reference interpreter
    topiot simulate             run a simulated device
    topiot serve                run the server engine with HTTP/WS front

Defaults can come from the TOPIOT_CONFIG environment variable, a
comma-separated key=value list (e.g. "arena=128,clock=virtual").
Exit codes: 0 success, 1 runtime failure, 2 bad usage.
"""

import argparse
import json
import logging
import os
import signal
import sys
import time

from .bytecode import (CompileError, DecodeError, compile_program,
                       decode_image, disassemble, encode_image)
from .catalog import CATALOG
from .pretty import pretty
from .reference import RefTask
from .values import taskvalue_to_json, val_to_json

log = logging.getLogger("topiot")


def load_config() -> dict:
    cfg = {}
    raw = os.environ.get("TOPIOT_CONFIG", "")
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"TOPIOT_CONFIG entry {part!r} is not key=value")
        k, v = part.split("=", 1)
        cfg[k.strip()] = v.strip()
    return cfg


def setup_logging(as_json: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if as_json:
        class JsonFmt(logging.Formatter):
            def format(self, record):
                return json.dumps({
                    "ts": round(record.created, 3),
                    "level": record.levelname.lower(),
                    "logger": record.name,
                    "msg": record.getMessage(),
                })
        handler.setFormatter(JsonFmt())
    else:
        handler.setFormatter(
            logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=logging.INFO, handlers=[handler])


class UsageError(Exception):
    pass


def _program(name: str):
    try:
        return CATALOG[name]()
    except KeyError:
        raise UsageError(
            f"unknown program {name!r}; try: {', '.join(sorted(CATALOG))}")


def _hostport(s: str, default_host: str = "127.0.0.1") -> tuple:
    if ":" in s:
        host, _, port = s.rpartition(":")
        return host or default_host, int(port)
    return default_host, int(s)


### subcommands

def cmd_show(args) -> int:
    if args.name is None:
        for name in sorted(CATALOG):
            print(name)
        return 0
    text = pretty(_program(args.name))
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return 0


def cmd_compile(args) -> int:
    prog = _program(args.name)
    try:
        blob = encode_image(compile_program(prog))
    except CompileError as e:
        print(f"compile error: {e}", file=sys.stderr)
        return 1
    if args.output:
        with open(args.output, "wb") as f:
            f.write(blob)
        print(f"{args.name}: {len(blob)} bytes -> {args.output}")
    else:
        print(blob.hex())
    return 0


def cmd_disasm(args) -> int:
    if args.target in CATALOG:
        blob = encode_image(compile_program(CATALOG[args.target]()))
    else:
        try:
            with open(args.target, "rb") as f:
                blob = f.read()
        except OSError as e:
            print(f"cannot read {args.target}: {e}", file=sys.stderr)
            return 1
    try:
        print(disassemble(decode_image(blob)), end="")
    except DecodeError as e:
        print(f"bad image: {e}", file=sys.stderr)
        return 1
    return 0


def cmd_run(args) -> int:
    prog = _program(args.name)
    task = RefTask(prog)
    last = None
    for c in range(args.cycles + 1):
        tv = task.cycle(c * args.step_ms)
        if task.failed is not None:
            print(f"[{c * args.step_ms}ms] task failed: {task.failed}")
            return 1
        shown = taskvalue_to_json(tv)
        if shown != last:
            last = shown
            print(f"[{c * args.step_ms}ms] value {json.dumps(shown)}")
        for sid, val in task.sds_writes:
            print(f"[{c * args.step_ms}ms] sds {sid} <- "
                  f"{json.dumps(val_to_json(val))}")
        if tv is not None and tv.stable:
            break
    if not args.quiet:
        for entry in task.world.write_log:
            now, kind, idx, val = entry
            print(f"[{now}ms] {kind}{idx} <- {val}")
    return 0


def cmd_simulate(args) -> int:
    from .sim import SimDevice

    server = _hostport(args.server) if args.server else None
    if server is not None and args.listen is not None:
        raise UsageError("--server and --listen are mutually exclusive")
    sim = SimDevice(arena_nodes=args.arena, clock=args.clock,
                    server=server, control_port=args.control_port,
                    listen=args.listen)
    sim.start()
    for i, name in enumerate(args.load or [], start=1):
        blob = encode_image(compile_program(_program(name)))
        sim.load(i, blob)
        log.info("loaded %s as task %d", name, i)
    # announce the control port only once the preloads are resident, so
    # a client that connects immediately sees them
    if sim.control_address is not None:
        print(f"control port on {sim.control_address[0]}:"
              f"{sim.control_address[1]}", flush=True)
    if sim.uplink_address is not None:
        print(f"uplink listen on {sim.uplink_address[0]}:"
              f"{sim.uplink_address[1]}", flush=True)
    stop = {"flag": False}

    def on_signal(_sig, _frm):
        stop["flag"] = True
    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    try:
        if args.duration is not None and args.clock == "virtual":
            sim.advance(args.duration)
        else:
            deadline = (time.monotonic() + args.duration / 1000
                        if args.duration is not None else None)
            while not stop["flag"]:
                if deadline is not None and time.monotonic() >= deadline:
                    break
                time.sleep(0.05)
    finally:
        sim.stop()
    return 0


def cmd_serve(args) -> int:
    from .server import WORKFLOWS, Engine, serve_http

    engine = Engine(ping_idle=args.ping_idle)
    host, port = engine.start(port=args.device_port)
    print(f"device port on {host}:{port}", flush=True)
    try:
        builder = WORKFLOWS[args.workflow]
    except KeyError:
        engine.stop()
        raise UsageError(f"unknown workflow {args.workflow!r}; "
                         f"try: {', '.join(sorted(WORKFLOWS))}")
    engine.set_root(builder(device=args.device))
    ui_dir = args.ui
    if ui_dir is not None and not os.path.isdir(ui_dir):
        engine.stop()
        raise UsageError(f"--ui: no directory {ui_dir!r}")
    http_host, http_port = _hostport(args.http)
    print(f"http on http://{http_host}:{http_port}", flush=True)
    try:
        serve_http(engine, host=http_host, port=http_port, ui_dir=ui_dir)
    finally:
        engine.stop()
    return 0


def main(argv=None) -> int:
    try:
        cfg = load_config()
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 2
    ap = argparse.ArgumentParser(
        prog="topiot",
        description="task-oriented programming for tiny IoT devices")
    ap.add_argument("--log-json", action="store_true",
                    help="emit log lines as JSON")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("show", help="print a built-in program")
    p.add_argument("name", nargs="?")
    p.set_defaults(fn=cmd_show)

    p = sub.add_parser("compile", help="compile a built-in program")
    p.add_argument("name")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("disasm", help="disassemble an image")
    p.add_argument("target", help="image file or built-in name")
    p.set_defaults(fn=cmd_disasm)

    p = sub.add_parser("run", help="run under the reference interpreter")
    p.add_argument("name")
    p.add_argument("--cycles", type=int, default=int(cfg.get("cycles", 2000)))
    p.add_argument("--step-ms", type=int, default=1)
    p.add_argument("--quiet", action="store_true",
                   help="skip the pin write log")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("simulate", help="run a simulated device")
    p.add_argument("--server", default=cfg.get("server"),
                   help="HOST:PORT of the engine's device port")
    p.add_argument("--arena", type=int, default=int(cfg.get("arena", 128)))
    p.add_argument("--clock", choices=("real", "virtual"),
                   default=cfg.get("clock", "real"))
    p.add_argument("--control-port", type=int,
                   default=int(cfg["control_port"])
                   if "control_port" in cfg else None)
    p.add_argument("--listen", type=int,
                   help="wait for a server to dial in on this port")
    p.add_argument("--load", action="append",
                   help="preload a built-in program (repeatable)")
    p.add_argument("--duration", type=int,
                   help="stop after this many milliseconds")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("serve", help="run the server engine")
    p.add_argument("--http", default=cfg.get("http", "127.0.0.1:8080"))
    p.add_argument("--device-port", type=int,
                   default=int(cfg.get("device_port", 0)))
    p.add_argument("--workflow", default=cfg.get("workflow", "demo"))
    p.add_argument("--device", default=None,
                   help="pin proxies to one device id")
    p.add_argument("--ping-idle", type=float,
                   default=float(cfg.get("ping_idle", 10.0)))
    p.add_argument("--ui", default=cfg.get("ui"),
                   help="serve this directory of built dashboard assets at /")
    p.set_defaults(fn=cmd_serve)

    args = ap.parse_args(argv)
    setup_logging(args.log_json)
    try:
        return args.fn(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
