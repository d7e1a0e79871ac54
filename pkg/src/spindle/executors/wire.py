"""Length-prefixed frames exchanged with subprocess workers.

Layout, all integers little-endian::

    u32 length      byte count of everything after this field (1 + 8 + len(payload))
    u8  opcode      0=call 1=result 2=error 3=shutdown
    u64 task_id
    ... payload

A call payload is ``u16 name_len | name (utf-8) | argument bytes``.  An error
payload is a utf-8 message.  Task id 0 is reserved for the worker handshake,
a result frame whose payload is a JSON object with ``protocol``, ``digest``
and ``pid`` keys.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import BinaryIO

PROTOCOL_VERSION = 1

_PREFIX = struct.Struct("<I")
_BODY_HEAD = struct.Struct("<BQ")
_NAME_LEN = struct.Struct("<H")
HEADER_SIZE = _PREFIX.size + _BODY_HEAD.size
MAX_BODY = 0xFFFFFFFF


class Opcode(enum.IntEnum):
    CALL = 0
    RESULT = 1
    ERROR = 2
    SHUTDOWN = 3


class ProtocolError(Exception):
    """Malformed or unexpected frame."""


@dataclass(frozen=True)
class WireFrame:
    opcode: Opcode
    task_id: int
    payload: bytes = b""


def encode_frame(frame: WireFrame) -> bytes:
    body_len = _BODY_HEAD.size + len(frame.payload)
    if body_len > MAX_BODY:
        raise ProtocolError(f"payload of {len(frame.payload)} bytes does not fit a frame")
    if not 0 <= frame.task_id < 1 << 64:
        raise ProtocolError(f"task id {frame.task_id} out of range")
    return b"".join(
        (_PREFIX.pack(body_len), _BODY_HEAD.pack(int(frame.opcode), frame.task_id), frame.payload)
    )


def _decode_body(body: bytes | memoryview) -> WireFrame:
    if len(body) < _BODY_HEAD.size:
        raise ProtocolError(f"frame body of {len(body)} bytes is shorter than its header")
    op, task_id = _BODY_HEAD.unpack_from(body)
    try:
        opcode = Opcode(op)
    except ValueError:
        raise ProtocolError(f"unknown opcode {op}") from None
    return WireFrame(opcode, task_id, bytes(body[_BODY_HEAD.size :]))


def decode_frame(data: bytes) -> WireFrame:
    """Decode exactly one frame occupying all of ``data``."""
    if len(data) < _PREFIX.size:
        raise ProtocolError("truncated length prefix")
    (length,) = _PREFIX.unpack_from(data)
    if len(data) - _PREFIX.size != length:
        raise ProtocolError(f"length prefix says {length} bytes, got {len(data) - _PREFIX.size}")
    return _decode_body(memoryview(data)[_PREFIX.size :])


def _read_exact(stream: BinaryIO, n: int) -> bytes | None:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            if remaining == n:
                return None
            raise ProtocolError(f"stream ended {remaining} bytes short of a frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return chunks[0] if len(chunks) == 1 else b"".join(chunks)


def read_frame(stream: BinaryIO) -> WireFrame | None:
    """Read one frame; ``None`` on a clean end of stream between frames."""
    prefix = _read_exact(stream, _PREFIX.size)
    if prefix is None:
        return None
    (length,) = _PREFIX.unpack(prefix)
    body = _read_exact(stream, length)
    if body is None:
        raise ProtocolError("stream ended after a length prefix")
    return _decode_body(body)


def write_frame(stream: BinaryIO, frame: WireFrame) -> None:
    stream.write(encode_frame(frame))
    stream.flush()


def pack_call(name: str, argument: bytes) -> bytes:
    raw = name.encode()
    return b"".join((_NAME_LEN.pack(len(raw)), raw, argument))


def unpack_call(payload: bytes) -> tuple[str, bytes]:
    if len(payload) < _NAME_LEN.size:
        raise ProtocolError("call payload too short")
    (n,) = _NAME_LEN.unpack_from(payload)
    end = _NAME_LEN.size + n
    if len(payload) < end:
        raise ProtocolError("call payload truncated inside function name")
    return payload[_NAME_LEN.size : end].decode(), payload[end:]
