import os
import signal
import socket
import subprocess
import sys
import threading
import time

import pytest

from tagcache import wire
from tagcache.client import Client, ServerError
from tagcache.server import BindError, Server, ServerConfig, execute
from tagcache.store import Store, StoreConfig
from tagcache.wire import Opcode, Request, Status


@pytest.fixture
def make_server(tmp_path):
    servers = []

    def factory(**kwargs):
        kwargs.setdefault("tcp", ("127.0.0.1", 0))
        kwargs.setdefault("socket_path", str(tmp_path / f"s{len(servers)}.sock"))
        kwargs.setdefault("store", StoreConfig(bucket_count=64))
        server = Server(ServerConfig(**kwargs))
        server.start()
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.stop()


def unix_endpoint(server) -> str:
    return f"unix:{server.socket_path}"


def tcp_endpoint(server) -> str:
    host, port = server.tcp_address
    return f"tcp:{host}:{port}"


def slow_get(store, delay):
    """Wrap store.get with an artificial stall, for fault injection."""
    original = store.get

    def slower(key):
        time.sleep(delay)
        return original(key)

    store.get = slower


class TestExecute:
    def test_noop(self):
        resp = execute(Request(Opcode.NOOP, 1), Store())
        assert resp.status == Status.OK and resp.request_id == 1

    def test_get_absent(self):
        resp = execute(Request(Opcode.GET, 2, key=b"k"), Store())
        assert resp.status == Status.NOT_FOUND

    def test_unknown_opcode(self):
        resp = execute(Request(0x7F, 3), Store())
        assert resp.status == Status.BAD_REQUEST

    def test_invalid_cmp(self):
        resp = execute(Request(Opcode.TAG_QUERY, 4, ttype=1, cmp=9, tvalue=0),
                       Store())
        assert resp.status == Status.BAD_REQUEST

    def test_too_large(self):
        store = Store(StoreConfig(bucket_count=1, bucket_limit_bytes=100))
        resp = execute(Request(Opcode.PUT, 5, key=b"k", value=b"x" * 100),
                       store)
        assert resp.status == Status.TOO_LARGE

    def test_mixed_script_matches_reference_model(self):
        import random
        rng = random.Random(17)
        store = Store(StoreConfig(bucket_count=16))
        model = {}
        pool = [b"k:%03d" % i for i in range(150)]
        for i in range(10000):
            key = rng.choice(pool)
            if rng.random() < 0.9:
                resp = execute(Request(Opcode.GET, i, key=key), store)
                if key in model:
                    assert (resp.status, resp.value) == (Status.OK, model[key])
                else:
                    assert resp.status == Status.NOT_FOUND
            else:
                value = rng.randbytes(rng.randint(0, 40))
                resp = execute(Request(Opcode.PUT, i, key=key, value=value),
                               store)
                assert resp.status == Status.OK
                assert bool(resp.flags & wire.FLAG_REPLACED) == (key in model)
                model[key] = value


class TestThreadless:
    def test_noop_over_local_socket(self, make_server):
        server = make_server(workers=0)
        with Client(unix_endpoint(server)) as client:
            client.noop()

    def test_no_cross_thread_handoffs(self, make_server):
        server = make_server(workers=0)
        with Client(unix_endpoint(server)) as client:
            for _ in range(50):
                client.noop()
            client.put(b"a", b"b")
            client.get(b"a")
        assert server.handoffs == 0

    def test_worker_mode_counts_handoffs(self, make_server):
        server = make_server(workers=2)
        with Client(unix_endpoint(server)) as client:
            for _ in range(10):
                client.noop()
        assert server.handoffs == 10


class TestRoundTripsOverSockets:
    @pytest.mark.parametrize("endpoint_of", [unix_endpoint, tcp_endpoint])
    def test_full_surface(self, make_server, endpoint_of):
        server = make_server(workers=2)
        with Client(endpoint_of(server)) as client:
            assert client.put(b"k", b"v", [(1, 5), (2, -3)]) is False
            assert client.get(b"k") == b"v"
            assert client.mget([b"k", b"gone"]) == [b"v", None]
            assert client.tag_query(1, wire.CMP_EQ, 5) == [b"k"]
            assert client.tag_query(2, wire.CMP_LT, 0) == [b"k"]
            assert client.tag_expire(2, wire.CMP_GT, 0) == 0
            stats = client.stats()
            assert stats["records"] == 1
            assert stats["buckets"] == 64
            assert client.delete(b"k") is True
            assert client.delete(b"k") is False

    def test_binary_safe_values(self, make_server):
        server = make_server(workers=1)
        blob = bytes(range(256)) * 41
        with Client(unix_endpoint(server)) as client:
            client.put(b"\x00\xffkey", blob)
            assert client.get(b"\x00\xffkey") == blob

    def test_concurrent_clients_against_model(self, make_server):
        import random
        server = make_server(workers=4)
        errors = []

        def hammer(idx):
            # Distinct per-client key space keeps the reference model local.
            rng = random.Random(idx)
            model = {}
            try:
                with Client(unix_endpoint(server)) as client:
                    for i in range(300):
                        key = b"c%d:%03d" % (idx, rng.randrange(40))
                        if rng.random() < 0.5:
                            value = rng.randbytes(rng.randint(0, 64))
                            client.put(key, value)
                            model[key] = value
                        else:
                            assert client.get(key) == model.get(key)
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=hammer, args=(i,)) for i in range(10)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []


class TestPipelining:
    def test_responses_in_request_order(self, make_server):
        server = make_server(workers=4)
        with Client(unix_endpoint(server)) as client:
            client.put(b"x", b"1")
            reqs = [client.make_request(Opcode.GET, key=b"x")
                    for _ in range(200)]
            resps = client.run_pipelined(reqs, window=32)
        assert [r.request_id for r in resps] == [q.request_id for q in reqs]
        assert all(r.value == b"1" for r in resps)

    def test_order_preserved_with_stalled_worker(self, make_server):
        server = make_server(workers=4)
        slow_get(server.store, 0.01)
        with Client(unix_endpoint(server)) as client:
            client.put(b"x", b"1")  # note: put is unaffected by slow_get
            reqs = []
            for i in range(40):
                if i % 2:
                    reqs.append(client.make_request(Opcode.GET, key=b"x"))
                else:
                    reqs.append(client.make_request(Opcode.NOOP))
            resps = client.run_pipelined(reqs, window=16)
        assert [r.request_id for r in resps] == [q.request_id for q in reqs]


class TestBackpressure:
    def test_queue_overflow_yields_server_busy(self, make_server):
        server = make_server(workers=1, queue_depth=1)
        slow_get(server.store, 0.25)
        with Client(unix_endpoint(server)) as client:
            reqs = [client.make_request(Opcode.GET, key=b"k")
                    for _ in range(4)]
            resps = client.run_pipelined(reqs, window=4)
        statuses = [r.status for r in resps]
        assert Status.SERVER_BUSY in statuses
        # Every request got exactly one response, in order.
        assert [r.request_id for r in resps] == [q.request_id for q in reqs]
        # The connection survived: the busy responses did not kill it.
        assert all(s in (Status.NOT_FOUND, Status.SERVER_BUSY)
                   for s in statuses)


class TestConnectionLifecycle:
    def test_quit_flushes_then_closes(self, make_server):
        server = make_server(workers=2)
        slow_get(server.store, 0.05)
        with Client(unix_endpoint(server)) as client:
            client.put(b"x", b"v")
            reqs = [client.make_request(Opcode.GET, key=b"x"),
                    client.make_request(Opcode.QUIT)]
            resps = client.run_pipelined(reqs, window=2)
            assert resps[0].status == Status.OK and resps[0].value == b"v"
            assert resps[1].status == Status.OK
            assert client._sock.recv(1) == b""  # server closed after flush

    def test_requests_after_quit_ignored(self, make_server):
        server = make_server(workers=0)
        with Client(unix_endpoint(server)) as client:
            quit_req = client.make_request(Opcode.QUIT)
            noop_req = client.make_request(Opcode.NOOP)
            client._sock.sendall(wire.encode_request(quit_req) +
                                 wire.encode_request(noop_req))
            resp = client._read_response(quit_req)
            assert resp.status == Status.OK
            assert client._sock.recv(1) == b""

    def test_unknown_opcode_keeps_connection(self, make_server):
        server = make_server(workers=1)
        with Client(unix_endpoint(server)) as client:
            bogus = wire._HEADER.pack(wire.REQUEST_MAGIC, wire.VERSION,
                                      0x70, 0, 77, 0, 0)
            client._sock.sendall(bogus)
            resp = client._read_response(Request(0x70, 77))
            assert resp.status == Status.BAD_REQUEST
            client.noop()  # still alive

    def test_protocol_error_closes_connection(self, make_server):
        server = make_server(workers=1)
        with Client(unix_endpoint(server)) as client:
            client._sock.sendall(b"\x00garbage")
            assert client._sock.recv(1) == b""

    def test_max_connections_enforced(self, make_server):
        server = make_server(workers=0, max_connections=2)
        c1 = Client(unix_endpoint(server))
        c2 = Client(unix_endpoint(server))
        c1.noop()
        c2.noop()
        c3 = Client(unix_endpoint(server))
        with pytest.raises((ConnectionError, OSError)):
            c3.noop()
        for c in (c1, c2, c3):
            c.close()

    def test_graceful_stop_answers_inflight(self, make_server):
        server = make_server(workers=2)
        slow_get(server.store, 0.05)
        client = Client(unix_endpoint(server))
        reqs = [client.make_request(Opcode.GET, key=b"nope")
                for _ in range(6)]
        for req in reqs:
            client._sock.sendall(wire.encode_request(req))
        time.sleep(0.05)  # let the frames reach the job queue
        stopper = threading.Thread(target=server.stop)
        stopper.start()
        got = [client._read_response(req) for req in reqs]
        stopper.join()
        assert [r.request_id for r in got] == [q.request_id for q in reqs]
        client.close()


class TestInstrumentation:
    def test_get_only_workload_never_takes_exclusive_locks(self, make_server):
        server = make_server(workers=2,
                             store=StoreConfig(bucket_count=64, instrument=True))
        with Client(unix_endpoint(server)) as client:
            for i in range(20):
                client.put(b"k:%02d" % i, b"v")
        _, exclusive_after_load = server.store.lock_acquisitions()

        def reader():
            with Client(unix_endpoint(server)) as client:
                for i in range(100):
                    client.get(b"k:%02d" % (i % 20))

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        shared, exclusive = server.store.lock_acquisitions()
        assert exclusive == exclusive_after_load


class TestBindAndCli:
    def test_bind_failure_raises(self, tmp_path):
        config = ServerConfig(tcp=None,
                              socket_path=str(tmp_path / "no-dir" / "x.sock"))
        with pytest.raises(BindError):
            Server(config).serve_forever()

    def test_tcp_port_conflict(self, tmp_path):
        blocker = socket.socket()
        blocker.bind(("127.0.0.1", 0))
        blocker.listen(1)
        port = blocker.getsockname()[1]
        try:
            config = ServerConfig(tcp=("127.0.0.1", port), socket_path=None)
            with pytest.raises(BindError):
                Server(config).serve_forever()
        finally:
            blocker.close()

    def test_cli_config_error_exit_code(self):
        proc = subprocess.run(
            [sys.executable, "-m", "tagcache.server", "--buckets", "100"],
            capture_output=True, timeout=30)
        assert proc.returncode == 1
        assert b"configuration error" in proc.stderr

    def test_cli_bind_failure_exit_code(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "tagcache.server",
             "--tcp", "127.0.0.1:0",
             "--socket", str(tmp_path / "missing" / "x.sock")],
            capture_output=True, timeout=30)
        assert proc.returncode == 2
        assert b"bind failure" in proc.stderr

    def test_cli_version(self):
        proc = subprocess.run(
            [sys.executable, "-m", "tagcache.server", "--version"],
            capture_output=True, timeout=30)
        assert proc.returncode == 0
        assert b"tagcache-server" in proc.stdout

    def test_cli_serves_and_stops_cleanly_on_sigterm(self, tmp_path):
        sock_path = str(tmp_path / "cli.sock")
        proc = subprocess.Popen(
            [sys.executable, "-m", "tagcache.server", "--workers", "1",
             "--tcp", "127.0.0.1:0", "--socket", sock_path],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        try:
            deadline = time.time() + 10
            while not os.path.exists(sock_path):
                assert time.time() < deadline, "server never came up"
                time.sleep(0.02)
            with Client(f"unix:{sock_path}") as client:
                client.noop()
                client.put(b"cli", b"works")
                assert client.get(b"cli") == b"works"
            proc.send_signal(signal.SIGTERM)
            assert proc.wait(timeout=10) == 0
        finally:
            if proc.poll() is None:
                proc.kill()
