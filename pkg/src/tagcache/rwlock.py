"""Shared-exclusive lock with writer preference.

Any number of threads may hold the lock shared, or exactly one may hold
it exclusive.  A waiting exclusive requester blocks admission of new
shared requesters, so writers cannot be starved by a continuous stream
of readers.

Acquisition counters are maintained so callers can verify locking
behaviour (e.g. that a read-only workload never takes the exclusive
side).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager


class RWLock:
    """Writer-preference reader-writer lock."""

    def __init__(self) -> None:
        self._monitor = threading.Lock()
        self._readers_ok = threading.Condition(self._monitor)
        self._writers_ok = threading.Condition(self._monitor)
        self._active_readers = 0
        self._writer_active = False
        self._writers_waiting = 0
        # Acquisition counters; reads of these are racy snapshots, which
        # is fine for instrumentation.
        self.shared_acquisitions = 0
        self.exclusive_acquisitions = 0

    def acquire_shared(self) -> None:
        with self._monitor:
            # A waiting writer fences out new readers.
            while self._writer_active or self._writers_waiting:
                self._readers_ok.wait()
            self._active_readers += 1
            self.shared_acquisitions += 1

    def release_shared(self) -> None:
        with self._monitor:
            self._active_readers -= 1
            if self._active_readers == 0 and self._writers_waiting:
                self._writers_ok.notify()

    def acquire_exclusive(self) -> None:
        with self._monitor:
            self._writers_waiting += 1
            while self._writer_active or self._active_readers:
                self._writers_ok.wait()
            self._writers_waiting -= 1
            self._writer_active = True
            self.exclusive_acquisitions += 1

    def release_exclusive(self) -> None:
        with self._monitor:
            self._writer_active = False
            if self._writers_waiting:
                self._writers_ok.notify()
            else:
                self._readers_ok.notify_all()

    @contextmanager
    def shared(self):
        self.acquire_shared()
        try:
            yield self
        finally:
            self.release_shared()

    @contextmanager
    def exclusive(self):
        self.acquire_exclusive()
        try:
            yield self
        finally:
            self.release_exclusive()
