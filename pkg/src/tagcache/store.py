"""The key-value data pool.

A fixed-size hash table whose buckets are red-black trees of records,
each bucket guarded by its own shared-exclusive lock and a byte budget.
Reads take shared locks and never block one another; writes exclusively
lock exactly one bucket.  When a write would push a bucket past its byte
budget, a naive garbage collector evicts that bucket's oldest-inserted
records (deliberately not LRU) until the write fits.

The bucket array itself is immutable after creation and is never locked.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from .rwlock import RWLock
from .rbtree import RBTree
from .tagindex import CmpOp, TagIndex, expire_group as _expire_group

MAX_KEY_LEN = 65535
MAX_VALUE_LEN = 2**32 - 1
MAX_TAGS_PER_RECORD = 255
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

# FNV-1a, 64-bit
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class ConfigError(Exception):
    """Invalid store or server configuration."""


class RecordTooLarge(Exception):
    """A single record cannot fit in any bucket's byte budget."""


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def bucket_of(key: bytes, bucket_count: int) -> int:
    """Bucket index for a key: 64-bit FNV-1a masked by bucket_count - 1.

    bucket_count must be a power of two.
    """
    return fnv1a_64(key) & (bucket_count - 1)


def normalize_tags(tags: Mapping[int, int] | Iterable[tuple[int, int]]) -> dict[int, int]:
    """Validate and canonicalize tags to a ttype -> tvalue mapping.

    A record carries at most one value per tag type; when the input
    repeats a type, the last pair wins.
    """
    if isinstance(tags, Mapping):
        pairs = tags.items()
    else:
        pairs = tags
    out: dict[int, int] = {}
    for ttype, tvalue in pairs:
        if not (INT64_MIN <= ttype <= INT64_MAX) or not (INT64_MIN <= tvalue <= INT64_MAX):
            raise ValueError("tag type and value must fit in a signed 64-bit integer")
        out[int(ttype)] = int(tvalue)
    if len(out) > MAX_TAGS_PER_RECORD:
        raise ValueError(f"a record may carry at most {MAX_TAGS_PER_RECORD} tags")
    return out


@dataclass(frozen=True)
class StoreConfig:
    bucket_count: int = 256
    bucket_limit_bytes: int = 1 << 20
    record_overhead_bytes: int = 64
    instrument: bool = False

    def validate(self) -> None:
        n = self.bucket_count
        if n < 1 or (n & (n - 1)) != 0:
            raise ConfigError(f"bucket_count must be a power of two >= 1, got {n}")
        if self.bucket_limit_bytes < 1:
            raise ConfigError("bucket_limit_bytes must be positive")
        if self.record_overhead_bytes < 0:
            raise ConfigError("record_overhead_bytes must be non-negative")


class Record:
    __slots__ = ("key", "value", "tags", "byte_size", "seq")

    def __init__(self, key: bytes, value: bytes, tags: dict[int, int],
                 byte_size: int, seq: int) -> None:
        self.key = key
        self.value = value
        self.tags = tags
        self.byte_size = byte_size
        self.seq = seq


class _Bucket:
    __slots__ = ("tree", "lock", "used_bytes", "evictions")

    def __init__(self) -> None:
        self.tree = RBTree()
        self.lock = RWLock()
        self.used_bytes = 0
        self.evictions = 0


class Store:
    """Sharded, lock-per-bucket key-value store with an attached tag index."""

    def __init__(self, config: StoreConfig | None = None) -> None:
        config = config or StoreConfig()
        config.validate()
        self.config = config
        self._buckets = [_Bucket() for _ in range(config.bucket_count)]
        self._mask = config.bucket_count - 1
        self._seq = itertools.count(1)
        self.index = TagIndex()

    # -- core operations --

    def get(self, key: bytes) -> bytes | None:
        """Value for key, or None. Takes only the bucket's shared lock."""
        key = self._check_key(key)
        bucket = self._buckets[fnv1a_64(key) & self._mask]
        with bucket.lock.shared():
            record = bucket.tree.find(key)
            return record.value if record is not None else None

    def put(self, key: bytes, value: bytes,
            tags: Mapping[int, int] | Iterable[tuple[int, int]] = ()) -> bool:
        """Insert or replace a record. Returns True when a record was replaced.

        Holds exactly one bucket's exclusive lock.  Replacement swaps the
        value and the full tag set.  If the bucket's budget would be
        exceeded, oldest-inserted records are evicted first; a record too
        large to ever fit raises RecordTooLarge without touching state.
        """
        key = self._check_key(key)
        if not isinstance(value, (bytes, bytearray, memoryview)):
            raise ValueError("value must be bytes")
        value = bytes(value)
        if len(value) > MAX_VALUE_LEN:
            raise ValueError(f"value exceeds {MAX_VALUE_LEN} bytes")
        tag_map = normalize_tags(tags)
        size = len(key) + len(value) + self.config.record_overhead_bytes
        if size > self.config.bucket_limit_bytes:
            raise RecordTooLarge(
                f"record of {size} bytes exceeds the per-bucket budget of "
                f"{self.config.bucket_limit_bytes}")
        bucket = self._buckets[fnv1a_64(key) & self._mask]
        with bucket.lock.exclusive():
            replaced = False
            existing: Record | None = bucket.tree.find(key)
            if existing is not None:
                bucket.tree.remove(key)
                bucket.used_bytes -= existing.byte_size
                if existing.tags:
                    self.index.remove(key, existing.tags)
                replaced = True
            if bucket.used_bytes + size > self.config.bucket_limit_bytes:
                self._collect_garbage(bucket, size)
            record = Record(key, value, tag_map, size, next(self._seq))
            bucket.tree.insert(key, record)
            bucket.used_bytes += size
            if tag_map:
                self.index.add(key, tag_map)
        return replaced

    def delete(self, key: bytes) -> bool:
        """Remove a record and its tag entries. Returns False when absent."""
        key = self._check_key(key)
        bucket = self._buckets[fnv1a_64(key) & self._mask]
        with bucket.lock.exclusive():
            record: Record | None = bucket.tree.remove(key)
            if record is None:
                return False
            bucket.used_bytes -= record.byte_size
            if record.tags:
                self.index.remove(key, record.tags)
        return True

    def get_many(self, keys: Iterable[bytes]) -> list[tuple[bytes, bytes | None]]:
        """Per-key gets, one bucket lock at a time, results in request order.

        No cross-key atomicity: each lookup is an independent snapshot.
        """
        keys = list(keys)
        if not 1 <= len(keys) <= 65535:
            raise ValueError("get_many takes between 1 and 65535 keys")
        return [(key, self.get(key)) for key in keys]

    # -- tag operations (delegating to the attached index) --

    def query_type(self, ttype: int) -> set[bytes]:
        return self.index.query_type(ttype)

    def query_cmp(self, ttype: int, op: CmpOp, tvalue: int) -> set[bytes]:
        return self.index.query_cmp(ttype, op, tvalue)

    def expire_group(self, ttype: int, op: CmpOp, tvalue: int) -> int:
        return _expire_group(self, self.index, ttype, op, tvalue)

    # -- introspection --

    def stats(self) -> dict:
        """Point-in-time counters, per bucket and aggregated.

        Each bucket is sampled under its shared lock; the aggregate is the
        sum of those samples, not a globally atomic snapshot.
        """
        per_bucket = []
        for bucket in self._buckets:
            with bucket.lock.shared():
                entry = {
                    "records": len(bucket.tree),
                    "used_bytes": bucket.used_bytes,
                    "evictions": bucket.evictions,
                }
            if self.config.instrument:
                entry["shared_acquisitions"] = bucket.lock.shared_acquisitions
                entry["exclusive_acquisitions"] = bucket.lock.exclusive_acquisitions
            per_bucket.append(entry)
        out = {
            "buckets": self.config.bucket_count,
            "records": sum(b["records"] for b in per_bucket),
            "used_bytes": sum(b["used_bytes"] for b in per_bucket),
            "evictions": sum(b["evictions"] for b in per_bucket),
            "per_bucket": per_bucket,
        }
        if self.config.instrument:
            shared, exclusive = self.lock_acquisitions()
            out["shared_lock_acquisitions"] = shared
            out["exclusive_lock_acquisitions"] = exclusive
        return out

    def lock_acquisitions(self) -> tuple[int, int]:
        """(shared, exclusive) bucket-lock acquisition totals."""
        shared = sum(b.lock.shared_acquisitions for b in self._buckets)
        exclusive = sum(b.lock.exclusive_acquisitions for b in self._buckets)
        return shared, exclusive

    def items(self) -> Iterator[tuple[bytes, bytes, dict[int, int]]]:
        """Snapshot iteration: (key, value, tags) per record, bucket by bucket."""
        for bucket in self._buckets:
            with bucket.lock.shared():
                chunk = [(rec.key, rec.value, dict(rec.tags))
                         for _key, rec in bucket.tree]
            yield from chunk

    # -- internals --

    def _collect_garbage(self, bucket: _Bucket, needed_bytes: int) -> int:
        """Evict oldest-inserted records until needed_bytes fits the budget.

        Caller must hold the bucket's exclusive lock.  Returns bytes freed.
        """
        target = self.config.bucket_limit_bytes - needed_bytes
        if target < 0:
            raise RecordTooLarge(
                f"{needed_bytes} bytes can never fit the per-bucket budget of "
                f"{self.config.bucket_limit_bytes}")
        if bucket.used_bytes <= target:
            return 0
        victims = sorted((rec.seq, key, rec) for key, rec in bucket.tree)
        freed = 0
        for _seq, key, rec in victims:
            if bucket.used_bytes <= target:
                break
            bucket.tree.remove(key)
            bucket.used_bytes -= rec.byte_size
            bucket.evictions += 1
            freed += rec.byte_size
            if rec.tags:
                self.index.remove(key, rec.tags)
        return freed

    @staticmethod
    def _check_key(key: bytes) -> bytes:
        if not isinstance(key, (bytes, bytearray, memoryview)):
            raise ValueError("key must be bytes")
        if not 1 <= len(key) <= MAX_KEY_LEN:
            raise ValueError(f"key length must be in [1, {MAX_KEY_LEN}]")
        return bytes(key)
