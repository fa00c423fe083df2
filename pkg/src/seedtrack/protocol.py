"""Framed binary wire protocol for the capture service.

Every frame on the wire is::

    magic 0x484F4C41 ("HOLA", 4 bytes, network order)
    version byte 0x01
    type byte
    payload length, unsigned 32-bit little-endian
    payload

Control payloads:

    HELLO  session id, UTF-8
    START  seed_x, seed_y as two signed 32-bit LE ints; (-1,-1) means
           "use the frame center"
    STOP   empty
    ACK    empty
    ERROR  detail string, UTF-8

Stream frame payloads carry a 21-byte header (index u64 LE, timestamp_us
u64 LE, channel byte, width u16 LE, height u16 LE) followed by channel
data: PV is width*height*3 bytes RGB, DEPTH is width*height*2 bytes of
u16 LE millimeters, POSE is 16 float64 LE values (width = height = 0).

``decode_message(encode_message(m)) == m`` for every valid message; any
malformed input raises :class:`FramingError` and nothing else.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

from .errors import FramingError

MAGIC = b"HOLA"
VERSION = 1
HEADER_LEN = 10
DEFAULT_MAX_PAYLOAD = 32 * 1024 * 1024

KIND_HELLO = "HELLO"
KIND_START = "START"
KIND_STOP = "STOP"
KIND_ACK = "ACK"
KIND_ERROR = "ERROR"

CHANNEL_PV = "PV"
CHANNEL_DEPTH = "DEPTH"
CHANNEL_POSE = "POSE"

CENTER_SENTINEL = (-1, -1)

_TYPE_HELLO = 0x01
_TYPE_START = 0x02
_TYPE_STOP = 0x03
_TYPE_ACK = 0x04
_TYPE_ERROR = 0x05
_TYPE_FRAME = 0x10

_KIND_TO_TYPE = {
    KIND_HELLO: _TYPE_HELLO,
    KIND_START: _TYPE_START,
    KIND_STOP: _TYPE_STOP,
    KIND_ACK: _TYPE_ACK,
    KIND_ERROR: _TYPE_ERROR,
}
_TYPE_TO_KIND = {v: k for k, v in _KIND_TO_TYPE.items()}

_CHANNEL_TO_BYTE = {CHANNEL_PV: 1, CHANNEL_DEPTH: 2, CHANNEL_POSE: 3}
_BYTE_TO_CHANNEL = {v: k for k, v in _CHANNEL_TO_BYTE.items()}

POSE_PAYLOAD_LEN = 16 * 8

_U64_MAX = 2**64 - 1
_U16_MAX = 2**16 - 1


@dataclass(frozen=True)
class ControlMessage:
    """HELLO/START/STOP/ACK/ERROR control exchange."""

    kind: str
    session_id: str | None = None
    seed_x: int | None = None
    seed_y: int | None = None
    detail: str | None = None


@dataclass(frozen=True)
class StreamFrameMessage:
    """One sensor sample on one channel."""

    index: int
    timestamp_us: int
    channel: str
    width: int
    height: int
    payload: bytes


Message = Union[ControlMessage, StreamFrameMessage]


def hello(session_id: str) -> ControlMessage:
    return ControlMessage(KIND_HELLO, session_id=session_id)


def start(seed_x: int, seed_y: int) -> ControlMessage:
    return ControlMessage(KIND_START, seed_x=seed_x, seed_y=seed_y)


def stop() -> ControlMessage:
    return ControlMessage(KIND_STOP)


def ack() -> ControlMessage:
    return ControlMessage(KIND_ACK)


def error(detail: str) -> ControlMessage:
    return ControlMessage(KIND_ERROR, detail=detail)


def _expected_body_len(channel: str, width: int, height: int) -> int:
    if channel == CHANNEL_PV:
        return width * height * 3
    if channel == CHANNEL_DEPTH:
        return width * height * 2
    return POSE_PAYLOAD_LEN


def _encode_control_payload(msg: ControlMessage) -> bytes:
    if msg.kind == KIND_HELLO:
        if not msg.session_id:
            raise ValueError("HELLO requires a session id")
        return msg.session_id.encode("utf-8")
    if msg.kind == KIND_START:
        if msg.seed_x is None or msg.seed_y is None:
            raise ValueError("START requires seed coordinates")
        seeds = (int(msg.seed_x), int(msg.seed_y))
        if any(v < 0 for v in seeds) and seeds != CENTER_SENTINEL:
            raise ValueError(f"START seed {seeds} is neither in-bounds nor the sentinel")
        return struct.pack("<ii", *seeds)
    if msg.kind in (KIND_STOP, KIND_ACK):
        return b""
    if msg.kind == KIND_ERROR:
        return (msg.detail or "").encode("utf-8")
    raise ValueError(f"unknown control kind {msg.kind!r}")


def encode_message(msg: Message, *, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    """Serialize a message to one wire frame."""
    if isinstance(msg, ControlMessage):
        type_byte = _KIND_TO_TYPE.get(msg.kind)
        if type_byte is None:
            raise ValueError(f"unknown control kind {msg.kind!r}")
        payload = _encode_control_payload(msg)
    elif isinstance(msg, StreamFrameMessage):
        channel_byte = _CHANNEL_TO_BYTE.get(msg.channel)
        if channel_byte is None:
            raise ValueError(f"unknown channel {msg.channel!r}")
        if not (0 <= msg.index <= _U64_MAX and 0 <= msg.timestamp_us <= _U64_MAX):
            raise ValueError("index/timestamp outside u64 range")
        if not (0 <= msg.width <= _U16_MAX and 0 <= msg.height <= _U16_MAX):
            raise ValueError("width/height outside u16 range")
        if msg.channel == CHANNEL_POSE and (msg.width, msg.height) != (0, 0):
            raise ValueError("POSE frames carry width = height = 0")
        expected = _expected_body_len(msg.channel, msg.width, msg.height)
        if msg.channel != CHANNEL_POSE and expected == 0:
            raise ValueError("bitmap frames need positive dimensions")
        if len(msg.payload) != expected:
            raise ValueError(
                f"{msg.channel} payload must be {expected} bytes, got {len(msg.payload)}"
            )
        type_byte = _TYPE_FRAME
        payload = (
            struct.pack(
                "<QQBHH", msg.index, msg.timestamp_us, channel_byte, msg.width, msg.height
            )
            + msg.payload
        )
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    if len(payload) > max_payload:
        raise ValueError(f"payload of {len(payload)} bytes exceeds cap {max_payload}")
    return MAGIC + bytes([VERSION, type_byte]) + struct.pack("<I", len(payload)) + payload


def _parse_header(header: bytes, *, max_payload: int) -> tuple[int, int]:
    if len(header) != HEADER_LEN:
        raise FramingError(f"header is {len(header)} bytes, need {HEADER_LEN}")
    if header[:4] != MAGIC:
        raise FramingError(f"bad magic {header[:4]!r}")
    if header[4] != VERSION:
        raise FramingError(f"unsupported protocol version {header[4]}")
    type_byte = header[5]
    (length,) = struct.unpack("<I", header[6:10])
    if length > max_payload:
        raise FramingError(f"payload length {length} exceeds cap {max_payload}")
    return type_byte, length


def _decode_payload(type_byte: int, payload: bytes) -> Message:
    if type_byte == _TYPE_FRAME:
        if len(payload) < 21:
            raise FramingError(f"frame payload of {len(payload)} bytes is too short")
        index, timestamp_us, channel_byte, width, height = struct.unpack(
            "<QQBHH", payload[:21]
        )
        channel = _BYTE_TO_CHANNEL.get(channel_byte)
        if channel is None:
            raise FramingError(f"unknown channel byte {channel_byte}")
        if channel == CHANNEL_POSE and (width, height) != (0, 0):
            raise FramingError("POSE frames must carry width = height = 0")
        body = payload[21:]
        expected = _expected_body_len(channel, width, height)
        if channel != CHANNEL_POSE and expected == 0:
            raise FramingError("bitmap frame with zero dimensions")
        if len(body) != expected:
            raise FramingError(
                f"{channel} body must be {expected} bytes, got {len(body)}"
            )
        return StreamFrameMessage(
            index=index,
            timestamp_us=timestamp_us,
            channel=channel,
            width=width,
            height=height,
            payload=body,
        )
    kind = _TYPE_TO_KIND.get(type_byte)
    if kind is None:
        raise FramingError(f"unknown message type 0x{type_byte:02x}")
    if kind == KIND_HELLO:
        try:
            session_id = payload.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FramingError(f"HELLO payload is not UTF-8: {exc}") from exc
        if not session_id:
            raise FramingError("HELLO with empty session id")
        return ControlMessage(KIND_HELLO, session_id=session_id)
    if kind == KIND_START:
        if len(payload) != 8:
            raise FramingError(f"START payload must be 8 bytes, got {len(payload)}")
        seed_x, seed_y = struct.unpack("<ii", payload)
        if (seed_x < 0 or seed_y < 0) and (seed_x, seed_y) != CENTER_SENTINEL:
            raise FramingError(f"START seed ({seed_x},{seed_y}) is invalid")
        return ControlMessage(KIND_START, seed_x=seed_x, seed_y=seed_y)
    if kind in (KIND_STOP, KIND_ACK):
        if payload:
            raise FramingError(f"{kind} must carry an empty payload")
        return ControlMessage(kind)
    try:
        detail = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FramingError(f"ERROR payload is not UTF-8: {exc}") from exc
    return ControlMessage(KIND_ERROR, detail=detail)


def decode_message(data: bytes, *, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Message:
    """Parse exactly one wire frame; raises FramingError on any defect."""
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise FramingError(f"expected bytes, got {type(data).__name__}")
    data = bytes(data)
    type_byte, length = _parse_header(data[:HEADER_LEN], max_payload=max_payload)
    payload = data[HEADER_LEN:]
    if len(payload) != length:
        raise FramingError(
            f"declared payload of {length} bytes, found {len(payload)}"
        )
    return _decode_payload(type_byte, payload)


def read_message(
    stream: BinaryIO, *, max_payload: int = DEFAULT_MAX_PAYLOAD
) -> Message | None:
    """Read one frame from a buffered stream; None on clean EOF."""
    header = stream.read(HEADER_LEN)
    if not header:
        return None
    if len(header) < HEADER_LEN:
        raise FramingError("connection closed mid-header")
    type_byte, length = _parse_header(header, max_payload=max_payload)
    payload = stream.read(length) if length else b""
    if len(payload) != length:
        raise FramingError("connection closed mid-payload")
    return _decode_payload(type_byte, payload)
