"""The cache daemon.

One network thread multiplexes every socket (TCP and local) with
non-blocking IO, assembles complete frames, and hands them to a fixed
pool of worker threads through a bounded job queue.  Workers execute
requests against the store and push encoded responses to a completion
queue; the network thread alone writes sockets, reordering responses so
each connection sees them in request-arrival order.

With --workers 0 the daemon runs threadless: the network thread executes
requests inline as plain function calls, with no queues and no
cross-thread handoffs.
"""
from __future__ import annotations

import argparse
import os
import queue
import selectors
import signal
import socket
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import __version__, wire
from .store import ConfigError, RecordTooLarge, Store, StoreConfig
from .tagindex import CmpOp

DEFAULT_TCP = ("127.0.0.1", 9180)
DEFAULT_SOCKET_PATH = "/tmp/tagcache.sock"

_CMP_FROM_WIRE = {wire.CMP_EQ: CmpOp.EQ, wire.CMP_LT: CmpOp.LT,
                  wire.CMP_GT: CmpOp.GT}


class BindError(Exception):
    """A listen endpoint could not be bound."""


@dataclass
class ServerConfig:
    workers: int = 4                      # 0 = threadless (SPED) mode
    queue_depth: int = 1024
    tcp: tuple[str, int] | None = DEFAULT_TCP
    socket_path: str | None = DEFAULT_SOCKET_PATH
    store: StoreConfig = field(default_factory=StoreConfig)
    max_connections: int = 1024
    max_body: int = wire.DEFAULT_MAX_BODY
    instrument: bool = False

    def validate(self) -> None:
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if self.workers > 0 and self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")
        if self.max_body < wire.HEADER_LEN:
            raise ConfigError("max_body too small")
        if self.tcp is None and self.socket_path is None:
            raise ConfigError("at least one listen endpoint is required")
        self.store.validate()


def execute(frame: wire.Request, store: Store) -> wire.Response:
    """Map one decoded request onto the store; never raises."""
    op = frame.opcode
    rid = frame.request_id
    try:
        if op == wire.Opcode.NOOP:
            return wire.Response(op, wire.Status.OK, rid)
        if op == wire.Opcode.GET:
            value = store.get(frame.key)
            if value is None:
                return wire.Response(op, wire.Status.NOT_FOUND, rid)
            return wire.Response(op, wire.Status.OK, rid, value=value)
        if op == wire.Opcode.PUT:
            replaced = store.put(frame.key, frame.value or b"", frame.tags)
            flags = wire.FLAG_REPLACED if replaced else 0
            return wire.Response(op, wire.Status.OK, rid, flags=flags)
        if op == wire.Opcode.DELETE:
            status = wire.Status.OK if store.delete(frame.key) \
                else wire.Status.NOT_FOUND
            return wire.Response(op, status, rid)
        if op == wire.Opcode.MGET:
            pairs = store.get_many(list(frame.keys))
            items = tuple(
                (int(wire.Status.OK), value) if value is not None
                else (int(wire.Status.NOT_FOUND), b"")
                for _key, value in pairs)
            return wire.Response(op, wire.Status.OK, rid, items=items)
        if op in (wire.Opcode.TAG_QUERY, wire.Opcode.TAG_EXPIRE):
            cmp_op = _CMP_FROM_WIRE.get(frame.cmp)
            if cmp_op is None:
                return wire.Response(op, wire.Status.BAD_REQUEST, rid)
            if op == wire.Opcode.TAG_QUERY:
                keys = store.query_cmp(frame.ttype, cmp_op, frame.tvalue)
                if len(keys) > 0xFFFF:
                    return wire.Response(op, wire.Status.TOO_LARGE, rid)
                return wire.Response(op, wire.Status.OK, rid,
                                     keys=tuple(sorted(keys)))
            deleted = store.expire_group(frame.ttype, cmp_op, frame.tvalue)
            return wire.Response(op, wire.Status.OK, rid, deleted=deleted)
        if op == wire.Opcode.STATS:
            s = store.stats()
            return wire.Response(op, wire.Status.OK, rid,
                                 stats=(s["records"], s["used_bytes"],
                                        s["evictions"], s["buckets"]))
        return wire.Response(op, wire.Status.BAD_REQUEST, rid)
    except RecordTooLarge:
        return wire.Response(op, wire.Status.TOO_LARGE, rid)
    except ValueError:
        return wire.Response(op, wire.Status.BAD_REQUEST, rid)
    except Exception:
        # A request must never take a worker down.
        return wire.Response(op, wire.Status.BAD_REQUEST, rid)


class _Conn:
    __slots__ = ("sock", "fd", "in_buf", "out_buf", "next_seq", "next_to_send",
                 "pending", "closing", "alive", "want_write")

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.fd = sock.fileno()
        self.in_buf = bytearray()
        self.out_buf = bytearray()
        self.next_seq = 0        # arrival sequence of the next request
        self.next_to_send = 0    # sequence of the next response to write
        self.pending: dict[int, bytes] = {}
        self.closing = False     # QUIT seen: flush pending, then close
        self.alive = True
        self.want_write = False


class Server:
    def __init__(self, config: ServerConfig | None = None) -> None:
        self.config = config or ServerConfig()
        self.config.validate()
        self.store = Store(self.config.store)
        self.handoffs = 0  # cross-thread job handoffs; stays 0 when threadless
        self._sel = selectors.DefaultSelector()
        self._jobs: queue.Queue | None = (
            queue.Queue(self.config.queue_depth) if self.config.workers else None)
        self._completions: deque = deque()
        self._comp_lock = threading.Lock()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._wake_w.setblocking(False)
        self._stop = threading.Event()
        self._listeners: list[socket.socket] = []
        self._conns: dict[int, _Conn] = {}
        self._workers: list[threading.Thread] = []
        self._net_thread: threading.Thread | None = None
        self._bound = False
        self.tcp_address: tuple[str, int] | None = None
        self.socket_path: str | None = None

    # -- lifecycle --

    def start(self) -> None:
        """Bind, spawn threads, and serve in the background."""
        self._bind()
        self._spawn_workers()
        self._net_thread = threading.Thread(target=self._net_loop,
                                            name="tagcache-net", daemon=True)
        self._net_thread.start()

    def serve_forever(self) -> None:
        """Bind and serve on the calling thread until request_stop()."""
        self._bind()
        self._spawn_workers()
        self._net_loop()
        for t in self._workers:
            t.join()

    def request_stop(self) -> None:
        """Ask the server to drain and exit; safe from signal handlers."""
        self._stop.set()
        self._wake()

    def stop(self) -> None:
        """Stop and wait for a clean shutdown."""
        self.request_stop()
        if self._net_thread is not None and self._net_thread.is_alive():
            self._net_thread.join(timeout=10)
        for t in self._workers:
            t.join(timeout=10)

    # -- setup --

    def _bind(self) -> None:
        if self._bound:
            return
        cfg = self.config
        try:
            if cfg.tcp is not None:
                sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                sock.bind(cfg.tcp)
                sock.listen(128)
                sock.setblocking(False)
                self._listeners.append(sock)
                self.tcp_address = sock.getsockname()
            if cfg.socket_path is not None:
                if os.path.exists(cfg.socket_path):
                    os.unlink(cfg.socket_path)
                sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                sock.bind(cfg.socket_path)
                sock.listen(128)
                sock.setblocking(False)
                self._listeners.append(sock)
                self.socket_path = cfg.socket_path
        except OSError as exc:
            for sock in self._listeners:
                sock.close()
            self._listeners.clear()
            raise BindError(str(exc)) from exc
        for sock in self._listeners:
            self._sel.register(sock, selectors.EVENT_READ, "listener")
        self._sel.register(self._wake_r, selectors.EVENT_READ, "waker")
        self._bound = True

    def _spawn_workers(self) -> None:
        for i in range(self.config.workers):
            t = threading.Thread(target=self._worker_loop,
                                 name=f"tagcache-worker-{i}", daemon=True)
            t.start()
            self._workers.append(t)

    # -- network thread --

    def _net_loop(self) -> None:
        while not self._stop.is_set():
            events = self._sel.select(timeout=0.5)
            for key, mask in events:
                tag = key.data
                if tag == "waker":
                    self._drain_waker()
                elif tag == "listener":
                    self._accept(key.fileobj)
                else:
                    conn: _Conn = tag
                    if not conn.alive:
                        continue
                    if mask & selectors.EVENT_READ:
                        self._on_readable(conn)
                    if conn.alive and mask & selectors.EVENT_WRITE:
                        self._flush(conn)
            self._drain_completions()
        self._shutdown_drain()

    def _accept(self, listener: socket.socket) -> None:
        while True:
            try:
                sock, _addr = listener.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            if len(self._conns) >= self.config.max_connections:
                sock.close()
                continue
            sock.setblocking(False)
            if sock.family == socket.AF_INET:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock)
            self._conns[conn.fd] = conn
            self._sel.register(sock, selectors.EVENT_READ, conn)

    def _on_readable(self, conn: _Conn) -> None:
        try:
            data = conn.sock.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self._close_conn(conn)
            return
        if not data:
            self._close_conn(conn)
            return
        if conn.closing:
            return  # discard input after QUIT
        conn.in_buf += data
        self._process_input(conn)

    def _process_input(self, conn: _Conn) -> None:
        while conn.alive and not conn.closing:
            try:
                result = wire.decode_request(conn.in_buf, self.config.max_body)
            except wire.ProtocolError:
                self._close_conn(conn)
                return
            if isinstance(result, wire.NeedMore):
                return
            frame, consumed = result
            del conn.in_buf[:consumed]
            seq = conn.next_seq
            conn.next_seq += 1
            self._handle_frame(conn, seq, frame)

    def _handle_frame(self, conn: _Conn, seq: int, frame: wire.Request) -> None:
        if frame.opcode == wire.Opcode.QUIT:
            # Stop reading; flush earlier responses plus this one, then close.
            conn.closing = True
            conn.in_buf.clear()
            self._set_interest(conn)
            resp = wire.Response(frame.opcode, wire.Status.OK, frame.request_id)
            self._submit(conn, seq, wire.encode_response(resp))
            return
        if self._jobs is None:
            resp = execute(frame, self.store)
            self._submit(conn, seq, wire.encode_response(resp))
            return
        try:
            self._jobs.put_nowait((conn, seq, frame))
            self.handoffs += 1
        except queue.Full:
            resp = wire.Response(frame.opcode, wire.Status.SERVER_BUSY,
                                 frame.request_id)
            self._submit(conn, seq, wire.encode_response(resp))

    def _submit(self, conn: _Conn, seq: int, data: bytes) -> None:
        """Queue a response, releasing any now-contiguous run in order."""
        conn.pending[seq] = data
        while conn.next_to_send in conn.pending:
            conn.out_buf += conn.pending.pop(conn.next_to_send)
            conn.next_to_send += 1
        self._flush(conn)

    def _flush(self, conn: _Conn) -> None:
        if conn.out_buf:
            try:
                sent = conn.sock.send(conn.out_buf)
                del conn.out_buf[:sent]
            except (BlockingIOError, InterruptedError):
                pass
            except OSError:
                self._close_conn(conn)
                return
        if conn.closing and not conn.out_buf and not conn.pending:
            self._close_conn(conn)
            return
        self._set_interest(conn)

    def _set_interest(self, conn: _Conn) -> None:
        want_write = bool(conn.out_buf)
        events = selectors.EVENT_WRITE if want_write else 0
        if not conn.closing:
            events |= selectors.EVENT_READ
        if events == 0:
            events = selectors.EVENT_READ  # selectors require some interest
        if want_write != conn.want_write or conn.closing:
            try:
                self._sel.modify(conn.sock, events, conn)
            except (KeyError, ValueError, OSError):
                pass
            conn.want_write = want_write

    def _close_conn(self, conn: _Conn) -> None:
        if not conn.alive:
            return
        conn.alive = False
        try:
            self._sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        try:
            conn.sock.close()
        except OSError:
            pass
        self._conns.pop(conn.fd, None)
        conn.pending.clear()
        conn.out_buf.clear()

    # -- worker threads --

    def _worker_loop(self) -> None:
        jobs = self._jobs
        assert jobs is not None
        while True:
            item = jobs.get()
            if item is None:
                return
            conn, seq, frame = item
            try:
                data = wire.encode_response(execute(frame, self.store))
                with self._comp_lock:
                    self._completions.append((conn, seq, data))
            finally:
                jobs.task_done()
            self._wake()

    def _drain_completions(self) -> None:
        while True:
            with self._comp_lock:
                if not self._completions:
                    return
                conn, seq, data = self._completions.popleft()
            if conn.alive:
                self._submit(conn, seq, data)

    def _wake(self) -> None:
        try:
            self._wake_w.send(b"x")
        except (BlockingIOError, InterruptedError):
            pass  # wake pipe already has pending signal
        except OSError:
            pass

    def _drain_waker(self) -> None:
        while True:
            try:
                if not self._wake_r.recv(4096):
                    return
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return

    # -- shutdown --

    def _shutdown_drain(self) -> None:
        for sock in self._listeners:
            try:
                self._sel.unregister(sock)
            except (KeyError, ValueError):
                pass
            sock.close()
        self._listeners.clear()
        if self._jobs is not None:
            self._jobs.join()  # let workers finish queued requests
            for _ in self._workers:
                self._jobs.put(None)
        self._drain_completions()
        deadline = time.monotonic() + 5.0
        for conn in list(self._conns.values()):
            conn.sock.settimeout(max(0.1, deadline - time.monotonic()))
            try:
                if conn.out_buf:
                    conn.sock.sendall(conn.out_buf)
                    conn.out_buf.clear()
            except OSError:
                pass
            self._close_conn(conn)
        self._sel.close()
        self._wake_r.close()
        self._wake_w.close()
        if self.socket_path and os.path.exists(self.socket_path):
            try:
                os.unlink(self.socket_path)
            except OSError:
                pass


def _parse_hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tagcache-server",
        description="In-memory cache daemon with typed numeric tags.")
    parser.add_argument("--workers", type=int, default=4, metavar="N",
                        help="worker threads; 0 runs threadless (default: 4)")
    parser.add_argument("--buckets", type=int, default=256, metavar="N",
                        help="hash buckets, a power of two (default: 256)")
    parser.add_argument("--bucket-limit", type=int, default=1 << 20,
                        metavar="BYTES",
                        help="per-bucket byte budget (default: 1 MiB)")
    parser.add_argument("--tcp", type=_parse_hostport,
                        default=DEFAULT_TCP, metavar="HOST:PORT",
                        help="TCP listen endpoint (default: 127.0.0.1:9180)")
    parser.add_argument("--socket", default=DEFAULT_SOCKET_PATH, metavar="PATH",
                        help="local stream socket path "
                             f"(default: {DEFAULT_SOCKET_PATH})")
    parser.add_argument("--queue-depth", type=int, default=1024, metavar="N",
                        help="bounded job queue depth (default: 1024)")
    parser.add_argument("--max-body", type=int, default=wire.DEFAULT_MAX_BODY,
                        metavar="BYTES",
                        help="largest accepted frame body (default: 16 MiB)")
    parser.add_argument("--instrument", action="store_true",
                        help="expose lock and handoff counters through stats")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        config = ServerConfig(
            workers=args.workers,
            queue_depth=args.queue_depth,
            tcp=args.tcp,
            socket_path=args.socket,
            store=StoreConfig(bucket_count=args.buckets,
                              bucket_limit_bytes=args.bucket_limit,
                              instrument=args.instrument),
            max_body=args.max_body,
            instrument=args.instrument,
        )
        server = Server(config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    for signum in (signal.SIGINT, signal.SIGTERM):
        signal.signal(signum, lambda *_: server.request_stop())
    try:
        server.serve_forever()
    except BindError as exc:
        print(f"bind failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
