"""Secondary index over typed numeric tags.

An ordered tree of tag types, where each type node owns an ordered
multi-map from tag value to the set of record keys carrying that
(type, value) tag.  Supports exact, less-than and greater-than value
queries plus group expiry, all with per-node reader-writer locking so
concurrent queries never block each other.

The index stores key copies rather than record references; a query can
therefore name keys whose records are evicted before the caller fetches
them, and callers must tolerate a subsequent not-found.

Lock order: the type-tree lock is always taken before a value-tree lock,
and callers mutating the index (put/delete/eviction paths) already hold
the owning bucket's lock.  No index operation ever takes a bucket lock.
"""
from __future__ import annotations

import enum
from typing import Iterable, Mapping

from .rbtree import RBTree
from .rwlock import RWLock


class CmpOp(enum.Enum):
    """Comparison selecting tag values: exact, strictly-less, strictly-greater."""

    EQ = 0
    LT = 1
    GT = 2


class _TypeNode:
    """One tag type: an ordered map tvalue -> set of keys, with its own lock."""

    __slots__ = ("ttype", "values", "lock", "dead")

    def __init__(self, ttype: int) -> None:
        self.ttype = ttype
        self.values = RBTree()
        self.lock = RWLock()
        # Set when this node is pruned from the type tree; writers that
        # raced past the type lookup must retry against the live tree.
        self.dead = False


class TagIndex:
    def __init__(self) -> None:
        self._types = RBTree()
        self._type_lock = RWLock()

    def add(self, key: bytes, tags: Mapping[int, int]) -> None:
        """Register key under every (ttype, tvalue) pair in tags."""
        for ttype in sorted(tags):
            tvalue = tags[ttype]
            while True:
                node = self._find_or_create(ttype)
                with node.lock.exclusive():
                    if node.dead:
                        continue
                    keys = node.values.find(tvalue)
                    if keys is None:
                        node.values.insert(tvalue, {key})
                    else:
                        keys.add(key)
                    break

    def remove(self, key: bytes, tags: Mapping[int, int]) -> None:
        """Drop key's entries; prunes empty value entries and type nodes."""
        for ttype in sorted(tags):
            tvalue = tags[ttype]
            with self._type_lock.shared():
                node = self._types.find(ttype)
            if node is None:
                continue
            with node.lock.exclusive():
                if node.dead:
                    # Pruned concurrently; this key's entry went with it.
                    continue
                keys = node.values.find(tvalue)
                if keys is not None:
                    keys.discard(key)
                    if not keys:
                        node.values.remove(tvalue)
                empty = len(node.values) == 0
            if empty:
                self._prune(ttype)

    def query_type(self, ttype: int) -> set[bytes]:
        """All keys carrying any tag of the given type."""
        node = self._lookup(ttype)
        if node is None:
            return set()
        result: set[bytes] = set()
        with node.lock.shared():
            if not node.dead:
                for _tvalue, keys in node.values:
                    result |= keys
        return result

    def query_cmp(self, ttype: int, op: CmpOp, tvalue: int) -> set[bytes]:
        """Keys whose tag of this type satisfies the comparison.

        LT and GT are strict.  Implemented as an ordered traversal of the
        value tree, so the work is proportional to the matching range.
        """
        if not isinstance(op, CmpOp):
            raise ValueError(f"not a comparison op: {op!r}")
        node = self._lookup(ttype)
        if node is None:
            return set()
        result: set[bytes] = set()
        with node.lock.shared():
            if node.dead:
                return result
            if op is CmpOp.EQ:
                keys = node.values.find(tvalue)
                if keys:
                    result |= keys
            elif op is CmpOp.LT:
                for tv, keys in node.values:
                    if tv >= tvalue:
                        break
                    result |= keys
            else:
                for tv, keys in node.values.iter_from(tvalue):
                    if tv == tvalue:
                        continue
                    result |= keys
        return result

    def snapshot(self) -> dict[tuple[int, int], set[bytes]]:
        """Full (ttype, tvalue) -> keys copy; for verification and debugging."""
        with self._type_lock.shared():
            nodes = [(ttype, node) for ttype, node in self._types]
        out: dict[tuple[int, int], set[bytes]] = {}
        for ttype, node in nodes:
            with node.lock.shared():
                if node.dead:
                    continue
                for tvalue, keys in node.values:
                    out[(ttype, tvalue)] = set(keys)
        return out

    def type_count(self) -> int:
        with self._type_lock.shared():
            return len(self._types)

    def lock_stats(self) -> dict[str, int]:
        """Aggregate acquisition counters across the type lock and value locks."""
        with self._type_lock.shared():
            nodes = [node for _ttype, node in self._types]
        stats = {
            "type_shared": self._type_lock.shared_acquisitions,
            "type_exclusive": self._type_lock.exclusive_acquisitions,
            "value_shared": sum(n.lock.shared_acquisitions for n in nodes),
            "value_exclusive": sum(n.lock.exclusive_acquisitions for n in nodes),
        }
        return stats

    def _lookup(self, ttype: int) -> _TypeNode | None:
        with self._type_lock.shared():
            return self._types.find(ttype)

    def _find_or_create(self, ttype: int) -> _TypeNode:
        with self._type_lock.shared():
            node = self._types.find(ttype)
        if node is not None:
            return node
        with self._type_lock.exclusive():
            node = self._types.find(ttype)
            if node is None:
                node = _TypeNode(ttype)
                self._types.insert(ttype, node)
            return node

    def _prune(self, ttype: int) -> None:
        with self._type_lock.exclusive():
            node = self._types.find(ttype)
            if node is None:
                return
            with node.lock.exclusive():
                if len(node.values) == 0:
                    node.dead = True
                    self._types.remove(ttype)


def expire_group(store, index: TagIndex, ttype: int, op: CmpOp, tvalue: int) -> int:
    """Delete every record matching the tag comparison; returns the count.

    Equivalent to query_cmp followed by per-key deletes, each delete
    individually atomic.  Keys inserted after the internal query are not
    affected, and keys that vanish in between count zero.
    """
    keys = index.query_cmp(ttype, op, tvalue)
    deleted = 0
    for key in sorted(keys):
        if store.delete(key):
            deleted += 1
    return deleted
