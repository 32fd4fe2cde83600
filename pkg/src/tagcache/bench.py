"""Benchmark harness for the cache daemon.

Reproduces the reference workloads: a mixed read/write load over a
precomputed dataset (30,000 records of 1 KB +/- 500 bytes at a 90/10
read/write ratio by default) with a configurable number of concurrent
client connections, and a null-transaction mode that measures pure
protocol + dispatch overhead (useful for comparing threadless operation
against a worker pool on one host).

Every run is reproducible: the dataset and the operation mix derive from
the seed, and reports echo the workload parameters plus the server's
STATS counters.
"""
from __future__ import annotations

import argparse
import csv
import random
import sys
import threading
import time
from collections import Counter
from dataclasses import dataclass

from .client import Client
from .wire import Opcode, Status


@dataclass(frozen=True)
class WorkloadSpec:
    record_count: int = 30000
    value_size_mean: int = 1024
    value_size_half_width: int = 500
    read_ratio: float = 0.90
    client_count: int = 10
    duration: float = 10.0
    rng_seed: int = 42
    tag_fraction: float = 0.0
    tag_type_range: tuple[int, int] = (1, 8)
    tag_value_range: tuple[int, int] = (0, 1000)
    pipeline: int = 1

    @property
    def value_size_range(self) -> tuple[int, int]:
        return (self.value_size_mean - self.value_size_half_width,
                self.value_size_mean + self.value_size_half_width)


@dataclass
class BenchReport:
    mode: str
    endpoint: str
    clients: int
    requested_duration: float
    duration: float
    ops: int
    ops_per_second: float
    p50_us: float
    p95_us: float
    p99_us: float
    errors: dict[str, int]
    per_client_ops: list[int]
    record_count: int
    read_ratio: float
    rng_seed: int
    pipeline: int
    server_stats: dict | None = None

    CSV_FIELDS = ("mode", "clients", "duration_s", "records", "read_ratio",
                  "seed", "pipeline", "ops", "ops_per_sec", "p50_us", "p95_us",
                  "p99_us", "errors", "per_client_ops", "srv_records",
                  "srv_used_bytes", "srv_evictions", "srv_buckets")

    def csv_row(self) -> dict:
        stats = self.server_stats or {}
        return {
            "mode": self.mode,
            "clients": self.clients,
            "duration_s": f"{self.duration:.3f}",
            "records": self.record_count,
            "read_ratio": self.read_ratio,
            "seed": self.rng_seed,
            "pipeline": self.pipeline,
            "ops": self.ops,
            "ops_per_sec": f"{self.ops_per_second:.1f}",
            "p50_us": f"{self.p50_us:.1f}",
            "p95_us": f"{self.p95_us:.1f}",
            "p99_us": f"{self.p99_us:.1f}",
            "errors": ";".join(f"{k}:{v}" for k, v in sorted(self.errors.items())),
            "per_client_ops": ";".join(str(n) for n in self.per_client_ops),
            "srv_records": stats.get("records", ""),
            "srv_used_bytes": stats.get("used_bytes", ""),
            "srv_evictions": stats.get("evictions", ""),
            "srv_buckets": stats.get("buckets", ""),
        }

    def summary(self) -> str:
        return (f"{self.mode}: {self.clients} clients x {self.duration:.1f}s "
                f"-> {self.ops} ops, {self.ops_per_second:,.0f} ops/s, "
                f"p50 {self.p50_us:.0f}us p95 {self.p95_us:.0f}us "
                f"p99 {self.p99_us:.0f}us")


def generate_dataset(spec: WorkloadSpec) -> list[tuple[bytes, bytes, tuple]]:
    """Deterministic (key, value, tags) records for the given spec.

    The same seed always yields a byte-identical dataset; keys are unique
    and value sizes are uniform over [mean - half_width, mean + half_width].
    """
    rng = random.Random(spec.rng_seed)
    lo, hi = spec.value_size_range
    records = []
    for i in range(spec.record_count):
        key = b"key:%08d" % i
        value = rng.randbytes(rng.randint(lo, hi))
        tags: tuple = ()
        if rng.random() < spec.tag_fraction:
            tags = ((rng.randint(*spec.tag_type_range),
                     rng.randint(*spec.tag_value_range)),)
        records.append((key, value, tags))
    return records


def load_dataset(endpoint: str, dataset, window: int = 64) -> None:
    """Preload phase: pipelined PUTs of the whole dataset."""
    with Client(endpoint) as client:
        requests = [client.make_request(Opcode.PUT, key=key, value=value,
                                        tags=tags)
                    for key, value, tags in dataset]
        for resp in client.run_pipelined(requests, window=window):
            if resp.status != Status.OK:
                raise RuntimeError(
                    f"load phase failed with status {Status(resp.status).name}")


def _dataset_key(index: int) -> bytes:
    return b"key:%08d" % index


def _mixed_ops(client: Client, rng: random.Random, spec: WorkloadSpec, n: int):
    """n requests of the read/write mix over the preloaded key space."""
    lo, hi = spec.value_size_range
    out = []
    for _ in range(n):
        key = _dataset_key(rng.randrange(spec.record_count))
        if rng.random() < spec.read_ratio:
            out.append(client.make_request(Opcode.GET, key=key))
        else:
            value = rng.randbytes(rng.randint(lo, hi))
            out.append(client.make_request(Opcode.PUT, key=key, value=value))
    return out


def _null_ops(client: Client, rng: random.Random, spec: WorkloadSpec, n: int):
    return [client.make_request(Opcode.NOOP) for _ in range(n)]


def _client_loop(idx: int, spec: WorkloadSpec, endpoint: str, make_ops,
                 barrier: threading.Barrier, results: list, errors: list):
    rng = random.Random(spec.rng_seed * 1_000_003 + idx)
    depth = max(1, spec.pipeline)
    latencies: list[int] = []
    status_counts: Counter = Counter()
    ops = 0
    try:
        client = Client(endpoint)
    except OSError as exc:
        errors.append(exc)
        barrier.wait()
        return
    try:
        barrier.wait()
        start = time.perf_counter()
        deadline = start + spec.duration
        while time.perf_counter() < deadline:
            batch = make_ops(client, rng, spec, depth)
            t0 = time.perf_counter_ns()
            responses = client.run_pipelined(batch, window=depth)
            per_op = (time.perf_counter_ns() - t0) // len(batch)
            for resp in responses:
                ops += 1
                latencies.append(per_op)
                if resp.status != Status.OK:
                    status_counts[Status(resp.status).name] += 1
        elapsed = time.perf_counter() - start
        results[idx] = (ops, elapsed, latencies, status_counts)
    except Exception as exc:
        errors.append(exc)
    finally:
        client.close()


def _percentile(sorted_values: list[int], q: float) -> float:
    if not sorted_values:
        return 0.0
    pos = min(len(sorted_values) - 1, int(q * len(sorted_values)))
    return sorted_values[pos] / 1000.0  # ns -> us


def _run(spec: WorkloadSpec, endpoint: str, mode: str, make_ops) -> BenchReport:
    results: list = [None] * spec.client_count
    errors: list = []
    barrier = threading.Barrier(spec.client_count)
    threads = [threading.Thread(target=_client_loop,
                                args=(i, spec, endpoint, make_ops, barrier,
                                      results, errors))
               for i in range(spec.client_count)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        completed = sum(1 for r in results if r is not None)
        raise RuntimeError(
            f"{len(errors)} of {spec.client_count} bench clients failed "
            f"({completed} completed): {errors[0]!r}")
    total_ops = sum(r[0] for r in results)
    wall = max(r[1] for r in results)
    latencies = sorted(lat for r in results for lat in r[2])
    status_counts: Counter = Counter()
    for r in results:
        status_counts.update(r[3])
    try:
        with Client(endpoint) as c:
            server_stats = c.stats()
    except OSError:
        server_stats = None
    return BenchReport(
        mode=mode,
        endpoint=endpoint,
        clients=spec.client_count,
        requested_duration=spec.duration,
        duration=wall,
        ops=total_ops,
        ops_per_second=total_ops / wall if wall > 0 else 0.0,
        p50_us=_percentile(latencies, 0.50),
        p95_us=_percentile(latencies, 0.95),
        p99_us=_percentile(latencies, 0.99),
        errors=dict(status_counts),
        per_client_ops=[r[0] for r in results],
        record_count=spec.record_count if mode == "mixed" else 0,
        read_ratio=spec.read_ratio if mode == "mixed" else 1.0,
        rng_seed=spec.rng_seed,
        pipeline=spec.pipeline,
        server_stats=server_stats,
    )


def run_bench(spec: WorkloadSpec, endpoint: str, preload: bool = True) -> BenchReport:
    """The mixed workload: preload the dataset, then apply the op mix.

    Reads hit uniformly random preloaded keys; writes overwrite uniformly
    random keys with freshly generated values of the same size profile.
    """
    if preload:
        load_dataset(endpoint, generate_dataset(spec))
    return _run(spec, endpoint, "mixed", _mixed_ops)


def run_null_bench(endpoint: str, clients: int, duration: float,
                   pipeline: int = 1, rng_seed: int = 42) -> BenchReport:
    """100% NOOP stream: protocol and dispatch overhead only."""
    spec = WorkloadSpec(record_count=0, client_count=clients,
                        duration=duration, rng_seed=rng_seed,
                        pipeline=pipeline)
    return _run(spec, endpoint, "null", _null_ops)


def write_csv(path: str, reports: list[BenchReport], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BenchReport.CSV_FIELDS)
        if fh.tell() == 0:
            writer.writeheader()
        for report in reports:
            writer.writerow(report.csv_row())


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="tagcache-bench",
        description="Benchmark a running cache daemon.")
    parser.add_argument("--endpoint", required=True,
                        metavar="tcp:HOST:PORT|unix:PATH")
    parser.add_argument("--clients", type=int, default=10, metavar="N")
    parser.add_argument("--duration", type=float, default=10.0, metavar="S")
    parser.add_argument("--records", type=int, default=30000, metavar="N")
    parser.add_argument("--read-ratio", type=float, default=0.90, metavar="F")
    parser.add_argument("--seed", type=int, default=42, metavar="N")
    parser.add_argument("--mode", choices=("mixed", "null"), default="mixed")
    parser.add_argument("--pipeline", type=int, default=1, metavar="D")
    parser.add_argument("--csv", dest="csv_path", default=None, metavar="PATH")
    args = parser.parse_args(argv)
    spec = WorkloadSpec(record_count=args.records,
                        read_ratio=args.read_ratio,
                        client_count=args.clients,
                        duration=args.duration,
                        rng_seed=args.seed,
                        pipeline=args.pipeline)
    try:
        if args.mode == "mixed":
            report = run_bench(spec, args.endpoint)
        else:
            report = run_null_bench(args.endpoint, args.clients, args.duration,
                                    pipeline=args.pipeline, rng_seed=args.seed)
    except (OSError, RuntimeError) as exc:
        print(f"benchmark failed: {exc}", file=sys.stderr)
        return 1
    print(report.summary())
    if args.csv_path:
        write_csv(args.csv_path, [report], append=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
