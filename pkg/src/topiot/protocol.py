"""Device link protocol: framing and message codec.

Every frame is a big-endian u16 length followed by that many bytes,
the first of which is the message tag.  The length therefore includes
the tag but not itself, so the smallest legal frame (a ping) is the
three bytes 00 01 09.  Values travel tagged: int i32, bool u8, real
f64, unit, and pairs recursively.  Task images ride inside AddTask
exactly as encoded on disk, byte for byte.

Framing errors are connection-fatal by policy; the codec signals them
all as ProtocolError and never reads past a frame boundary.
"""

import struct
from dataclasses import dataclass

from .values import TaskValue, Val, vbool, vint, vpair, vreal, vunit

PROTOCOL_VERSION = 1
MAX_FRAME = 0xFFFF

### session policy
HANDSHAKE_TIMEOUT = 5.0     # seconds for the Hello after connect
PING_IDLE = 10.0            # seconds of silence before a ping
MAX_MISSED_PONGS = 2

TAG_HELLO = 0x01
TAG_ADD_TASK = 0x02
TAG_ACK_TASK = 0x03
TAG_REJECT_TASK = 0x04
TAG_DEL_TASK = 0x05
TAG_TASK_VALUE = 0x06
TAG_SDS_UP = 0x07
TAG_SDS_DOWN = 0x08
TAG_PING = 0x09
TAG_PONG = 0x0A
TAG_TASK_FAIL = 0x0B

### peripheral presence bits in Hello
PERIPH_DHT = 0x01
PERIPH_LEDMATRIX = 0x02


class ProtocolError(Exception):
    pass


### messages

@dataclass(frozen=True)
class Hello:
    """Device self-description, sent once immediately after connect."""

    version: int
    arena_nodes: int
    digital_pins: int
    analog_pins: int
    periphs: int        # PERIPH_* bitmask


@dataclass(frozen=True)
class AddTask:
    task_id: int
    image_bytes: bytes


@dataclass(frozen=True)
class AckTask:
    task_id: int


@dataclass(frozen=True)
class RejectTask:
    task_id: int
    reason: str


@dataclass(frozen=True)
class DelTask:
    task_id: int


@dataclass(frozen=True)
class TaskValueMsg:
    task_id: int
    value: TaskValue


@dataclass(frozen=True)
class SdsUp:
    """Device-side SDS write going up to the server."""

    task_id: int
    sds_id: int
    val: Val


@dataclass(frozen=True)
class SdsDown:
    """Server-side SDS write going down to a device task."""

    task_id: int
    sds_id: int
    val: Val


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Pong:
    pass


@dataclass(frozen=True)
class TaskFail:
    task_id: int
    reason: str


Message = (Hello, AddTask, AckTask, RejectTask, DelTask, TaskValueMsg,
           SdsUp, SdsDown, Ping, Pong, TaskFail)


### value codec

def _enc_val(v: Val) -> bytes:
    x = v.v
    if isinstance(x, tuple):
        return b"\x04" + _enc_val(x[0]) + _enc_val(x[1])
    if x is None:
        return b"\x03"
    if isinstance(x, bool):
        return b"\x01" + (b"\x01" if x else b"\x00")
    if isinstance(x, int):
        return b"\x00" + struct.pack(">i", x)
    return b"\x02" + struct.pack(">d", x)


def _dec_val(rd: "_Rd") -> Val:
    tag = rd.u8()
    if tag == 0:
        return vint(struct.unpack(">i", rd.take(4))[0])
    if tag == 1:
        b = rd.u8()
        if b > 1:
            raise ProtocolError(f"bad bool byte {b}")
        return vbool(bool(b))
    if tag == 2:
        return vreal(struct.unpack(">d", rd.take(8))[0])
    if tag == 3:
        return vunit()
    if tag == 4:
        fst = _dec_val(rd)
        return vpair(fst, _dec_val(rd))
    raise ProtocolError(f"bad value tag {tag}")


def _enc_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 255:
        raw = raw[:255]
    return bytes([len(raw)]) + raw


class _Rd:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated frame")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def rest(self) -> bytes:
        out = self.data[self.pos:]
        self.pos = len(self.data)
        return out

    def string(self) -> str:
        n = self.u8()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError("bad utf-8 in string") from e

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError("trailing bytes in frame")


### frame codec

def encode_message(msg) -> bytes:
    """Whole frame for one message, length prefix included."""
    if isinstance(msg, Hello):
        body = bytes([TAG_HELLO, msg.version]) + \
            struct.pack(">H", msg.arena_nodes) + \
            bytes([msg.digital_pins, msg.analog_pins, msg.periphs])
    elif isinstance(msg, AddTask):
        body = bytes([TAG_ADD_TASK]) + struct.pack(">H", msg.task_id) + \
            msg.image_bytes
    elif isinstance(msg, AckTask):
        body = bytes([TAG_ACK_TASK]) + struct.pack(">H", msg.task_id)
    elif isinstance(msg, RejectTask):
        body = bytes([TAG_REJECT_TASK]) + struct.pack(">H", msg.task_id) + \
            _enc_str(msg.reason)
    elif isinstance(msg, DelTask):
        body = bytes([TAG_DEL_TASK]) + struct.pack(">H", msg.task_id)
    elif isinstance(msg, TaskValueMsg):
        tv = msg.value
        if tv.val is None:
            tail = b"\x00"
        elif tv.stable:
            tail = b"\x02" + _enc_val(tv.val)
        else:
            tail = b"\x01" + _enc_val(tv.val)
        body = bytes([TAG_TASK_VALUE]) + struct.pack(">H", msg.task_id) + tail
    elif isinstance(msg, SdsUp):
        body = bytes([TAG_SDS_UP]) + struct.pack(">H", msg.task_id) + \
            bytes([msg.sds_id]) + _enc_val(msg.val)
    elif isinstance(msg, SdsDown):
        body = bytes([TAG_SDS_DOWN]) + struct.pack(">H", msg.task_id) + \
            bytes([msg.sds_id]) + _enc_val(msg.val)
    elif isinstance(msg, Ping):
        body = bytes([TAG_PING])
    elif isinstance(msg, Pong):
        body = bytes([TAG_PONG])
    elif isinstance(msg, TaskFail):
        body = bytes([TAG_TASK_FAIL]) + struct.pack(">H", msg.task_id) + \
            _enc_str(msg.reason)
    else:
        raise ProtocolError(f"not a protocol message: {msg!r}")
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame too large ({len(body)} bytes)")
    return struct.pack(">H", len(body)) + body


def decode_body(body: bytes):
    """One frame body (tag + payload) back into a message."""
    if not body:
        raise ProtocolError("empty frame")
    rd = _Rd(body)
    tag = rd.u8()
    if tag == TAG_HELLO:
        msg = Hello(rd.u8(), rd.u16(), rd.u8(), rd.u8(), rd.u8())
    elif tag == TAG_ADD_TASK:
        msg = AddTask(rd.u16(), rd.rest())
    elif tag == TAG_ACK_TASK:
        msg = AckTask(rd.u16())
    elif tag == TAG_REJECT_TASK:
        msg = RejectTask(rd.u16(), rd.string())
    elif tag == TAG_DEL_TASK:
        msg = DelTask(rd.u16())
    elif tag == TAG_TASK_VALUE:
        tid = rd.u16()
        kind = rd.u8()
        if kind == 0:
            msg = TaskValueMsg(tid, TaskValue(None, False))
        elif kind in (1, 2):
            msg = TaskValueMsg(tid, TaskValue(_dec_val(rd), kind == 2))
        else:
            raise ProtocolError(f"bad task value kind {kind}")
    elif tag == TAG_SDS_UP:
        msg = SdsUp(rd.u16(), rd.u8(), _dec_val(rd))
    elif tag == TAG_SDS_DOWN:
        msg = SdsDown(rd.u16(), rd.u8(), _dec_val(rd))
    elif tag == TAG_PING:
        msg = Ping()
    elif tag == TAG_PONG:
        msg = Pong()
    elif tag == TAG_TASK_FAIL:
        msg = TaskFail(rd.u16(), rd.string())
    else:
        raise ProtocolError(f"unknown tag 0x{tag:02x}")
    rd.done()
    return msg


class FrameReader:
    """Incremental stream reassembly.  Feed arbitrary chunks, get whole
    messages back; a malformed frame poisons the reader for good, the
    way it kills a connection."""

    def __init__(self) -> None:
        self.buf = bytearray()
        self.dead = False

    def feed(self, chunk: bytes) -> list:
        if self.dead:
            raise ProtocolError("reader is dead")
        self.buf.extend(chunk)
        out = []
        while True:
            if len(self.buf) < 2:
                return out
            need = struct.unpack(">H", self.buf[:2])[0]
            if need == 0:
                self.dead = True
                raise ProtocolError("zero-length frame")
            if len(self.buf) < 2 + need:
                return out
            body = bytes(self.buf[2:2 + need])
            del self.buf[:2 + need]
            try:
                out.append(decode_body(body))
            except ProtocolError:
                self.dead = True
                raise
