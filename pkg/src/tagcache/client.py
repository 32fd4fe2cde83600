"""Client for the binary cache protocol.

One Client wraps one blocking connection (TCP or local socket) and maps
protocol opcodes to typed methods.  Responses arrive in request order,
so pipelined use (`run_pipelined`) just keeps a FIFO of in-flight
request ids and matches them as frames come back.

Endpoints are written "tcp:HOST:PORT" or "unix:PATH".
"""
from __future__ import annotations

import itertools
import socket
from typing import Iterable, Sequence

from . import wire
from .tagindex import CmpOp
from .wire import Opcode, ProtocolError, Request, Response, Status

_CMP_TO_WIRE = {CmpOp.EQ: wire.CMP_EQ, CmpOp.LT: wire.CMP_LT,
                CmpOp.GT: wire.CMP_GT}


class ServerError(Exception):
    """A non-OK, non-NOT_FOUND status from the server."""

    def __init__(self, status: int, opcode: int) -> None:
        self.status = Status(status)
        self.opcode = opcode
        super().__init__(f"{self.status.name} answering opcode {opcode:#04x}")


def parse_endpoint(text: str):
    """'tcp:HOST:PORT' or 'unix:PATH' -> (family, address)."""
    kind, _, rest = text.partition(":")
    if kind == "tcp":
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"expected tcp:HOST:PORT, got {text!r}")
        return socket.AF_INET, (host, int(port))
    if kind == "unix":
        if not rest:
            raise ValueError(f"expected unix:PATH, got {text!r}")
        return socket.AF_UNIX, rest
    raise ValueError(f"unknown endpoint scheme in {text!r}")


class Client:
    def __init__(self, endpoint: str, timeout: float | None = 30.0,
                 max_body: int = wire.DEFAULT_MAX_BODY) -> None:
        family, address = parse_endpoint(endpoint)
        self._sock = socket.socket(family, socket.SOCK_STREAM)
        self._sock.settimeout(timeout)
        self._sock.connect(address)
        if family == socket.AF_INET:
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = bytearray()
        self._rid = itertools.count(1)
        self._max_body = max_body

    # -- lifecycle --

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- typed operations --

    def noop(self) -> None:
        self._call(Request(Opcode.NOOP, self._next_rid()))

    def get(self, key: bytes) -> bytes | None:
        resp = self._call(Request(Opcode.GET, self._next_rid(), key=key),
                          allow_not_found=True)
        return resp.value if resp.status == Status.OK else None

    def put(self, key: bytes, value: bytes,
            tags: Iterable[tuple[int, int]] = ()) -> bool:
        """Store a record; returns True when an existing one was replaced."""
        resp = self._call(Request(Opcode.PUT, self._next_rid(), key=key,
                                  value=value, tags=tuple(tags)))
        return bool(resp.flags & wire.FLAG_REPLACED)

    def delete(self, key: bytes) -> bool:
        resp = self._call(Request(Opcode.DELETE, self._next_rid(), key=key),
                          allow_not_found=True)
        return resp.status == Status.OK

    def mget(self, keys: Sequence[bytes]) -> list[bytes | None]:
        resp = self._call(Request(Opcode.MGET, self._next_rid(),
                                  keys=tuple(keys)))
        return [value if status == Status.OK else None
                for status, value in resp.items]

    def tag_query(self, ttype: int, op: CmpOp | int, tvalue: int) -> list[bytes]:
        resp = self._call(Request(Opcode.TAG_QUERY, self._next_rid(),
                                  ttype=ttype, cmp=self._cmp(op), tvalue=tvalue))
        return list(resp.keys)

    def tag_expire(self, ttype: int, op: CmpOp | int, tvalue: int) -> int:
        resp = self._call(Request(Opcode.TAG_EXPIRE, self._next_rid(),
                                  ttype=ttype, cmp=self._cmp(op), tvalue=tvalue))
        return resp.deleted or 0

    def stats(self) -> dict:
        resp = self._call(Request(Opcode.STATS, self._next_rid()))
        records, used_bytes, evictions, buckets = resp.stats
        return {"records": records, "used_bytes": used_bytes,
                "evictions": evictions, "buckets": buckets}

    def quit(self) -> None:
        """Ask the server to flush and close this connection."""
        try:
            self._call(Request(Opcode.QUIT, self._next_rid()))
        finally:
            self.close()

    # -- pipelined access --

    def run_pipelined(self, requests: Sequence[Request],
                      window: int = 32) -> list[Response]:
        """Send requests keeping up to `window` in flight; responses return
        in request order."""
        responses: list[Response] = []
        in_flight: list[Request] = []
        i = 0
        while i < len(requests) or in_flight:
            while i < len(requests) and len(in_flight) < window:
                req = requests[i]
                self._sock.sendall(wire.encode_request(req))
                in_flight.append(req)
                i += 1
            req = in_flight.pop(0)
            responses.append(self._read_response(req))
        return responses

    def make_request(self, opcode: Opcode, **fields) -> Request:
        """Build a request carrying a fresh request id for pipelined use."""
        return Request(opcode, self._next_rid(), **fields)

    # -- internals --

    def _cmp(self, op: CmpOp | int) -> int:
        return _CMP_TO_WIRE[op] if isinstance(op, CmpOp) else int(op)

    def _next_rid(self) -> int:
        return next(self._rid) & 0xFFFFFFFF

    def _call(self, req: Request, allow_not_found: bool = False) -> Response:
        self._sock.sendall(wire.encode_request(req))
        resp = self._read_response(req)
        if resp.status == Status.OK:
            return resp
        if allow_not_found and resp.status == Status.NOT_FOUND:
            return resp
        raise ServerError(resp.status, req.opcode)

    def _read_response(self, req: Request) -> Response:
        while True:
            result = wire.decode_response(self._buf, req.opcode, self._max_body)
            if not isinstance(result, wire.NeedMore):
                resp, consumed = result
                del self._buf[:consumed]
                if resp.request_id != req.request_id:
                    raise ProtocolError(
                        f"response id {resp.request_id} does not match "
                        f"request id {req.request_id}")
                return resp
            data = self._sock.recv(65536)
            if not data:
                raise ConnectionError("server closed the connection")
            self._buf += data
