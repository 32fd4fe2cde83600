"""Binary request/response framing.

Fixed 14-byte little-endian headers carrying opcode (or status), sizes
and item counts, so a complete message parses in a single pass with no
text scanning.  The byte layout is normative and documented in
protocol.md at the repository root.

Decoding is incremental: callers feed a growing buffer and receive
either a complete frame plus its consumed length, or NeedMore with the
exact number of missing bytes (at most two rounds: header, then body).
Nothing proportional to a declared body length is allocated before the
bytes actually arrive, and bodies above a configurable cap are rejected.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import NamedTuple

REQUEST_MAGIC = 0xC5
RESPONSE_MAGIC = 0xC6
VERSION = 0x01
HEADER_LEN = 14
DEFAULT_MAX_BODY = 16 * 1024 * 1024

# magic u8, version u8, opcode/status u8, flags u8, request_id u32,
# count u16, body_len u32
_HEADER = struct.Struct("<BBBBIHI")
assert _HEADER.size == HEADER_LEN

FLAG_REPLACED = 0x01  # PUT response: an existing record was overwritten


class Opcode(enum.IntEnum):
    NOOP = 0x00
    GET = 0x01
    PUT = 0x02
    DELETE = 0x03
    MGET = 0x04
    TAG_QUERY = 0x05
    TAG_EXPIRE = 0x06
    STATS = 0x07
    QUIT = 0x08


class Status(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1
    TOO_LARGE = 2
    BAD_REQUEST = 3
    SERVER_BUSY = 4


CMP_EQ = 0
CMP_LT = 1
CMP_GT = 2


class ProtocolError(Exception):
    """Unrecoverable framing error; the connection must be closed."""


class NeedMore(NamedTuple):
    """Incomplete frame: exactly `missing` more bytes are required."""

    missing: int


@dataclass(frozen=True)
class Request:
    opcode: int
    request_id: int
    flags: int = 0
    key: bytes | None = None
    value: bytes | None = None
    tags: tuple[tuple[int, int], ...] = ()
    keys: tuple[bytes, ...] = ()
    ttype: int | None = None
    cmp: int | None = None
    tvalue: int | None = None


@dataclass(frozen=True)
class Response:
    # The opcode is client-side context selecting the body layout; it is
    # not serialized (responses are matched to requests by request_id).
    opcode: int
    status: int
    request_id: int
    flags: int = 0
    value: bytes | None = None
    items: tuple[tuple[int, bytes], ...] = ()
    keys: tuple[bytes, ...] = ()
    deleted: int | None = None
    stats: tuple[int, int, int, int] | None = None


def _check_key(key: bytes | None) -> bytes:
    if key is None or not 1 <= len(key) <= 0xFFFF:
        raise ValueError("key must be 1..65535 bytes")
    return bytes(key)


def encode_request(req: Request) -> bytes:
    """Serialize a request frame. Raises ValueError on oversize fields."""
    op = req.opcode
    body = b""
    count = 0
    if op in (Opcode.NOOP, Opcode.STATS, Opcode.QUIT):
        pass
    elif op in (Opcode.GET, Opcode.DELETE):
        key = _check_key(req.key)
        body = struct.pack("<H", len(key)) + key
    elif op == Opcode.PUT:
        key = _check_key(req.key)
        value = req.value if req.value is not None else b""
        if len(value) > 0xFFFFFFFF:
            raise ValueError("value exceeds the 32-bit length field")
        if len(req.tags) > 0xFFFF:
            raise ValueError("too many tags for the 16-bit count field")
        parts = [struct.pack("<H", len(key)), key,
                 struct.pack("<I", len(value)), bytes(value)]
        for ttype, tvalue in req.tags:
            parts.append(struct.pack("<qq", ttype, tvalue))
        body = b"".join(parts)
        count = len(req.tags)
    elif op == Opcode.MGET:
        if not 1 <= len(req.keys) <= 0xFFFF:
            raise ValueError("MGET takes between 1 and 65535 keys")
        parts = []
        for key in req.keys:
            key = _check_key(key)
            parts.append(struct.pack("<H", len(key)))
            parts.append(key)
        body = b"".join(parts)
        count = len(req.keys)
    elif op in (Opcode.TAG_QUERY, Opcode.TAG_EXPIRE):
        body = struct.pack("<qBq", req.ttype, req.cmp, req.tvalue)
    else:
        raise ValueError(f"cannot encode unknown opcode {op:#x}")
    header = _HEADER.pack(REQUEST_MAGIC, VERSION, op, req.flags,
                          req.request_id, count, len(body))
    return header + body


def encode_response(resp: Response) -> bytes:
    """Serialize a response frame; non-OK statuses always carry no body."""
    body = b""
    count = 0
    if resp.status == Status.OK:
        op = resp.opcode
        if op == Opcode.GET:
            value = resp.value if resp.value is not None else b""
            if len(value) > 0xFFFFFFFF:
                raise ValueError("value exceeds the 32-bit length field")
            body = struct.pack("<I", len(value)) + bytes(value)
        elif op == Opcode.MGET:
            if len(resp.items) > 0xFFFF:
                raise ValueError("too many MGET items for the count field")
            parts = []
            for status, value in resp.items:
                parts.append(struct.pack("<BI", status, len(value)))
                parts.append(bytes(value))
            body = b"".join(parts)
            count = len(resp.items)
        elif op == Opcode.TAG_QUERY:
            if len(resp.keys) > 0xFFFF:
                raise ValueError("too many keys for the 16-bit count field")
            parts = []
            for key in resp.keys:
                key = _check_key(key)
                parts.append(struct.pack("<H", len(key)))
                parts.append(key)
            body = b"".join(parts)
            count = len(resp.keys)
        elif op == Opcode.TAG_EXPIRE:
            body = struct.pack("<I", resp.deleted or 0)
        elif op == Opcode.STATS:
            records, used_bytes, evictions, buckets = resp.stats or (0, 0, 0, 0)
            body = struct.pack("<QQQI", records, used_bytes, evictions, buckets)
        # NOOP, PUT, DELETE, QUIT: empty body
    header = _HEADER.pack(RESPONSE_MAGIC, VERSION, resp.status, resp.flags,
                          resp.request_id, count, len(body))
    return header + body


class _Cursor:
    """Strict sequential reader over a frame body."""

    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf, start: int, end: int) -> None:
        self.buf = buf
        self.pos = start
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ProtocolError("frame body shorter than its internal length fields")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def done(self) -> None:
        if self.pos != self.end:
            raise ProtocolError("frame body longer than its internal length fields")


def _decode_header(buf, magic: int, max_body: int):
    n = len(buf)
    if n == 0:
        return NeedMore(HEADER_LEN)
    if buf[0] != magic:
        raise ProtocolError(f"bad magic byte {buf[0]:#04x}")
    if n >= 2 and buf[1] != VERSION:
        raise ProtocolError(f"unsupported protocol version {buf[1]}")
    if n < HEADER_LEN:
        return NeedMore(HEADER_LEN - n)
    _magic, _ver, code, flags, request_id, count, body_len = \
        _HEADER.unpack_from(buf, 0)
    if body_len > max_body:
        raise ProtocolError(f"declared body of {body_len} bytes exceeds the "
                            f"{max_body}-byte limit")
    if n < HEADER_LEN + body_len:
        return NeedMore(HEADER_LEN + body_len - n)
    return code, flags, request_id, count, body_len


def decode_request(buf, max_body: int = DEFAULT_MAX_BODY):
    """Decode one request from the start of buf.

    Returns (Request, consumed_bytes) for a complete frame, NeedMore for
    an incomplete one, and raises ProtocolError for an unrecoverable
    framing fault.  Unknown opcodes decode structurally (header honored,
    body skipped) so the server can answer BAD_REQUEST without dropping
    the connection.
    """
    head = _decode_header(buf, REQUEST_MAGIC, max_body)
    if isinstance(head, NeedMore):
        return head
    opcode, flags, request_id, count, body_len = head
    consumed = HEADER_LEN + body_len
    cur = _Cursor(buf, HEADER_LEN, consumed)
    req: Request
    if opcode in (Opcode.NOOP, Opcode.STATS, Opcode.QUIT):
        cur.done()
        req = Request(opcode, request_id, flags)
    elif opcode in (Opcode.GET, Opcode.DELETE):
        key = cur.take(cur.u16())
        cur.done()
        req = Request(opcode, request_id, flags, key=key)
    elif opcode == Opcode.PUT:
        key = cur.take(cur.u16())
        value = cur.take(cur.u32())
        tags = tuple((cur.i64(), cur.i64()) for _ in range(count))
        cur.done()
        req = Request(opcode, request_id, flags, key=key, value=value, tags=tags)
    elif opcode == Opcode.MGET:
        if count < 1:
            raise ProtocolError("MGET requires at least one key")
        keys = tuple(cur.take(cur.u16()) for _ in range(count))
        cur.done()
        req = Request(opcode, request_id, flags, keys=keys)
    elif opcode in (Opcode.TAG_QUERY, Opcode.TAG_EXPIRE):
        ttype = cur.i64()
        cmp = cur.u8()
        tvalue = cur.i64()
        cur.done()
        req = Request(opcode, request_id, flags, ttype=ttype, cmp=cmp,
                      tvalue=tvalue)
    else:
        # Unknown opcode: structurally sound, semantically rejected later.
        req = Request(opcode, request_id, flags)
    return req, consumed


def decode_response(buf, opcode: int, max_body: int = DEFAULT_MAX_BODY):
    """Decode one response from the start of buf.

    The opcode of the originating request selects the body layout; it is
    supplied by the caller because it is not carried on the wire.
    """
    head = _decode_header(buf, RESPONSE_MAGIC, max_body)
    if isinstance(head, NeedMore):
        return head
    status, flags, request_id, count, body_len = head
    consumed = HEADER_LEN + body_len
    if status != Status.OK:
        if body_len != 0:
            raise ProtocolError("non-OK response with a body")
        return Response(opcode, status, request_id, flags), consumed
    cur = _Cursor(buf, HEADER_LEN, consumed)
    resp: Response
    if opcode == Opcode.GET:
        value = cur.take(cur.u32())
        cur.done()
        resp = Response(opcode, status, request_id, flags, value=value)
    elif opcode == Opcode.MGET:
        items = []
        for _ in range(count):
            item_status = cur.u8()
            items.append((item_status, cur.take(cur.u32())))
        cur.done()
        resp = Response(opcode, status, request_id, flags, items=tuple(items))
    elif opcode == Opcode.TAG_QUERY:
        keys = tuple(cur.take(cur.u16()) for _ in range(count))
        cur.done()
        resp = Response(opcode, status, request_id, flags, keys=keys)
    elif opcode == Opcode.TAG_EXPIRE:
        deleted = cur.u32()
        cur.done()
        resp = Response(opcode, status, request_id, flags, deleted=deleted)
    elif opcode == Opcode.STATS:
        stats = struct.unpack("<QQQI", cur.take(28))
        cur.done()
        resp = Response(opcode, status, request_id, flags, stats=stats)
    else:
        # NOOP, PUT, DELETE, QUIT and unknown opcodes: empty body
        cur.done()
        resp = Response(opcode, status, request_id, flags)
    return resp, consumed
