"""Bundle wire format.

Every frame starts with a one-byte type; all integers are big-endian.

    DATA         01 channel:u32 seq:u64 sent_at_us:u64 len:u16 payload
    ACK          02 cum_seq:u64 echo_ts_us:u64 hold_delay_us:u32
    OPEN         03 channel:u32 len:u16 target (UTF-8 "host:port")
    OPEN_RESULT  04 channel:u32 code:u8
    WINDOW       05 channel:u32 increment:u32
    CLOSE        06 channel:u32
    HELLO        07 token:16 bytes link_id:u16
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

from ..reliability import Ack
from ..scheduler import CHUNK_SIZE

MAX_PAYLOAD = CHUNK_SIZE
MAX_TARGET = 1024
TOKEN_SIZE = 16


class CodecError(Exception):
    pass


class FrameType(enum.IntEnum):
    DATA = 0x01
    ACK = 0x02
    OPEN = 0x03
    OPEN_RESULT = 0x04
    WINDOW = 0x05
    CLOSE = 0x06
    HELLO = 0x07


class OpenCode(enum.IntEnum):
    OK = 0
    REFUSED = 1
    UNREACHABLE = 2


@dataclass(frozen=True)
class Data:
    channel: int
    seq: int
    sent_at_us: int
    payload: bytes


@dataclass(frozen=True)
class Open:
    channel: int
    target: str


@dataclass(frozen=True)
class OpenResult:
    channel: int
    code: OpenCode


@dataclass(frozen=True)
class Window:
    channel: int
    increment: int


@dataclass(frozen=True)
class Close:
    channel: int


@dataclass(frozen=True)
class Hello:
    token: bytes
    link_id: int


Frame = Union[Data, Ack, Open, OpenResult, Window, Close, Hello]

_DATA = struct.Struct(">BIQQH")
_ACK = struct.Struct(">BQQI")
_OPEN = struct.Struct(">BIH")
_OPEN_RESULT = struct.Struct(">BIB")
_WINDOW = struct.Struct(">BII")
_CLOSE = struct.Struct(">BI")
_HELLO = struct.Struct(">B16sH")

MAX_FRAME_SIZE = _DATA.size + MAX_PAYLOAD


def encode(frame: Frame) -> bytes:
    try:
        if type(frame) is Data:
            if len(frame.payload) > MAX_PAYLOAD:
                raise CodecError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
            return _DATA.pack(FrameType.DATA, frame.channel, frame.seq, frame.sent_at_us, len(frame.payload)) + frame.payload
        if type(frame) is Ack:
            return _ACK.pack(FrameType.ACK, frame.cum_seq, frame.echo_ts_us, frame.hold_delay_us)
        if type(frame) is Open:
            target = frame.target.encode("utf-8")
            if len(target) > MAX_TARGET:
                raise CodecError(f"target of {len(target)} bytes exceeds {MAX_TARGET}")
            return _OPEN.pack(FrameType.OPEN, frame.channel, len(target)) + target
        if type(frame) is OpenResult:
            return _OPEN_RESULT.pack(FrameType.OPEN_RESULT, frame.channel, frame.code)
        if type(frame) is Window:
            return _WINDOW.pack(FrameType.WINDOW, frame.channel, frame.increment)
        if type(frame) is Close:
            return _CLOSE.pack(FrameType.CLOSE, frame.channel)
        if type(frame) is Hello:
            if len(frame.token) != TOKEN_SIZE:
                raise CodecError("bundle token must be 16 bytes")
            return _HELLO.pack(FrameType.HELLO, frame.token, frame.link_id)
    except struct.error as exc:
        raise CodecError(str(exc)) from exc
    raise CodecError(f"cannot encode {type(frame).__name__}")


def decode(buf: Union[bytes, bytearray, memoryview], offset: int = 0) -> Optional[Tuple[Frame, int]]:
    """Decode one frame starting at ``offset``.

    Returns ``(frame, consumed)``, or None when ``buf`` holds only a prefix
    of a frame. Raises :class:`CodecError` on malformed input.
    """
    avail = len(buf) - offset
    if avail < 1:
        return None
    kind = buf[offset]
    if kind == FrameType.DATA:
        if avail < _DATA.size:
            return None
        _, channel, seq, sent_at, length = _DATA.unpack_from(buf, offset)
        if length > MAX_PAYLOAD:
            raise CodecError(f"DATA length {length} exceeds {MAX_PAYLOAD}")
        end = _DATA.size + length
        if avail < end:
            return None
        start = offset + _DATA.size
        return Data(channel, seq, sent_at, bytes(buf[start : start + length])), end
    if kind == FrameType.ACK:
        if avail < _ACK.size:
            return None
        _, cum, echo, hold = _ACK.unpack_from(buf, offset)
        return Ack(cum, echo, hold), _ACK.size
    if kind == FrameType.OPEN:
        if avail < _OPEN.size:
            return None
        _, channel, length = _OPEN.unpack_from(buf, offset)
        if length > MAX_TARGET:
            raise CodecError(f"OPEN target length {length} exceeds {MAX_TARGET}")
        end = _OPEN.size + length
        if avail < end:
            return None
        start = offset + _OPEN.size
        try:
            target = bytes(buf[start : start + length]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError("OPEN target is not UTF-8") from exc
        return Open(channel, target), end
    if kind == FrameType.OPEN_RESULT:
        if avail < _OPEN_RESULT.size:
            return None
        _, channel, code = _OPEN_RESULT.unpack_from(buf, offset)
        try:
            return OpenResult(channel, OpenCode(code)), _OPEN_RESULT.size
        except ValueError as exc:
            raise CodecError(f"unknown OPEN_RESULT code {code}") from exc
    if kind == FrameType.WINDOW:
        if avail < _WINDOW.size:
            return None
        _, channel, increment = _WINDOW.unpack_from(buf, offset)
        return Window(channel, increment), _WINDOW.size
    if kind == FrameType.CLOSE:
        if avail < _CLOSE.size:
            return None
        _, channel = _CLOSE.unpack_from(buf, offset)
        return Close(channel), _CLOSE.size
    if kind == FrameType.HELLO:
        if avail < _HELLO.size:
            return None
        _, token, link_id = _HELLO.unpack_from(buf, offset)
        return Hello(token, link_id), _HELLO.size
    raise CodecError(f"unknown frame type 0x{kind:02x}")


class Decoder:
    """Incremental decoder for one link's byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._pos = 0

    def feed(self, data: bytes) -> List[Frame]:
        self._buf += data
        frames = []
        buf = self._buf
        pos = self._pos
        while True:
            result = decode(buf, pos)
            if result is None:
                break
            frame, used = result
            frames.append(frame)
            pos += used
        if pos == len(buf):
            buf.clear()
            pos = 0
        elif pos > 65536:
            del buf[:pos]
            pos = 0
        self._pos = pos
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf) - self._pos
