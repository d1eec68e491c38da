"""Length-prefixed binary frames for the gateway <-> engine hop.

Frame layout (all integers little-endian)::

    u32  payload length (bytes after this 5-byte header)
    u8   frame type
    ...  payload

Strings are ``u32 length`` + UTF-8 bytes.  See docs/protocol.md for the
per-type payload tables.
"""

from __future__ import annotations

import asyncio
import struct
from dataclasses import dataclass
from typing import Union

HEADER = struct.Struct("<IB")
MAX_PAYLOAD = 16 * 1024 * 1024

T_SUBMIT = 0x01
T_TOKEN = 0x02
T_DONE = 0x03
T_ERROR = 0x04
T_PING = 0x05
T_PONG = 0x06

# ERROR codes
E_OVERLOADED = 1
E_TOO_LARGE = 2
E_BAD_FRAME = 3
E_INTERNAL = 4
E_SHUTDOWN = 5

_U32 = struct.Struct("<I")
_SUBMIT_TAIL = struct.Struct("<IIddQ")
_TOKEN_SEQ = struct.Struct("<I")
_DONE_TAIL = struct.Struct("<Iqqq")
_ERROR_CODE = struct.Struct("<H")
_NONCE = struct.Struct("<Q")


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class Submit:
    request_id: str
    prompt: str
    prompt_tokens: int
    max_tokens: int
    temperature: float = 0.5
    top_p: float = 0.7
    seed: int = 0


@dataclass(frozen=True)
class Token:
    request_id: str
    seq_no: int
    text: str


@dataclass(frozen=True)
class Done:
    """End of stream.  The engine-side instants are a reconciliation trailer."""

    request_id: str
    total_tokens: int
    t_start: int = 0
    t_first: int = 0
    t_last: int = 0


@dataclass(frozen=True)
class Error:
    request_id: str
    code: int
    message: str


@dataclass(frozen=True)
class Ping:
    nonce: int


@dataclass(frozen=True)
class Pong:
    nonce: int


Frame = Union[Submit, Token, Done, Error, Ping, Pong]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    if off + 4 > len(buf):
        raise ProtocolError("truncated string length")
    (n,) = _U32.unpack_from(buf, off)
    off += 4
    if off + n > len(buf):
        raise ProtocolError("truncated string body")
    try:
        return buf[off:off + n].decode("utf-8"), off + n
    except UnicodeDecodeError as e:
        raise ProtocolError(f"invalid utf-8: {e}") from None


def encode(frame: Frame) -> bytes:
    if isinstance(frame, Token):
        ftype = T_TOKEN
        payload = _pack_str(frame.request_id) + _TOKEN_SEQ.pack(frame.seq_no) + _pack_str(frame.text)
    elif isinstance(frame, Submit):
        ftype = T_SUBMIT
        payload = (
            _pack_str(frame.request_id)
            + _pack_str(frame.prompt)
            + _SUBMIT_TAIL.pack(frame.prompt_tokens, frame.max_tokens, frame.temperature, frame.top_p, frame.seed)
        )
    elif isinstance(frame, Done):
        ftype = T_DONE
        payload = _pack_str(frame.request_id) + _DONE_TAIL.pack(
            frame.total_tokens, frame.t_start, frame.t_first, frame.t_last
        )
    elif isinstance(frame, Error):
        ftype = T_ERROR
        payload = _pack_str(frame.request_id) + _ERROR_CODE.pack(frame.code) + _pack_str(frame.message)
    elif isinstance(frame, Ping):
        ftype, payload = T_PING, _NONCE.pack(frame.nonce)
    elif isinstance(frame, Pong):
        ftype, payload = T_PONG, _NONCE.pack(frame.nonce)
    else:
        raise TypeError(f"not a frame: {frame!r}")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload too large: {len(payload)}")
    return HEADER.pack(len(payload), ftype) + payload


def _expect_end(buf: bytes, off: int, what: str) -> None:
    if off != len(buf):
        raise ProtocolError(f"{what}: {len(buf) - off} trailing bytes")


def decode(ftype: int, payload: bytes) -> Frame:
    try:
        if ftype == T_TOKEN:
            rid, off = _unpack_str(payload, 0)
            (seq,) = _TOKEN_SEQ.unpack_from(payload, off)
            text, off = _unpack_str(payload, off + 4)
            _expect_end(payload, off, "TOKEN")
            return Token(rid, seq, text)
        if ftype == T_SUBMIT:
            rid, off = _unpack_str(payload, 0)
            prompt, off = _unpack_str(payload, off)
            pt, mt, temp, top_p, seed = _SUBMIT_TAIL.unpack_from(payload, off)
            _expect_end(payload, off + _SUBMIT_TAIL.size, "SUBMIT")
            return Submit(rid, prompt, pt, mt, temp, top_p, seed)
        if ftype == T_DONE:
            rid, off = _unpack_str(payload, 0)
            total, t_start, t_first, t_last = _DONE_TAIL.unpack_from(payload, off)
            _expect_end(payload, off + _DONE_TAIL.size, "DONE")
            return Done(rid, total, t_start, t_first, t_last)
        if ftype == T_ERROR:
            rid, off = _unpack_str(payload, 0)
            (code,) = _ERROR_CODE.unpack_from(payload, off)
            msg, off = _unpack_str(payload, off + 2)
            _expect_end(payload, off, "ERROR")
            return Error(rid, code, msg)
        if ftype in (T_PING, T_PONG):
            (nonce,) = _NONCE.unpack_from(payload, 0)
            _expect_end(payload, 8, "PING/PONG")
            return Ping(nonce) if ftype == T_PING else Pong(nonce)
    except struct.error as e:
        raise ProtocolError(f"truncated frame type {ftype:#x}: {e}") from None
    raise ProtocolError(f"unknown frame type {ftype:#x}")


class FrameDecoder:
    """Incremental decoder: feed arbitrary byte chunks, collect whole frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            length, ftype = HEADER.unpack_from(self._buf, 0)
            if length > MAX_PAYLOAD:
                raise ProtocolError(f"payload too large: {length}")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(decode(ftype, bytes(self._buf[HEADER.size:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


async def read_frame(reader: asyncio.StreamReader) -> Frame:
    """Read one frame; raises ``asyncio.IncompleteReadError`` on EOF."""
    header = await reader.readexactly(HEADER.size)
    length, ftype = HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload too large: {length}")
    payload = await reader.readexactly(length) if length else b""
    return decode(ftype, payload)


def write_frame(writer: asyncio.StreamWriter, frame: Frame) -> None:
    writer.write(encode(frame))
