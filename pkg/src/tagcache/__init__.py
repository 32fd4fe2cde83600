"""tagcache: an in-memory cache daemon with typed numeric tags.

Library surface: the Store (sharded key-value pool with per-bucket
reader-writer locks and tag index), the binary wire protocol, the
network server and client, a benchmark harness, and a discrete-event
lock-contention simulator.
"""
from .store import (
    ConfigError,
    RecordTooLarge,
    Store,
    StoreConfig,
    bucket_of,
    fnv1a_64,
)
from .tagindex import CmpOp, TagIndex, expire_group
from .rwlock import RWLock
from .wire import Opcode, ProtocolError, Status

__version__ = "0.1.0"

__all__ = [
    "CmpOp",
    "ConfigError",
    "Opcode",
    "ProtocolError",
    "RecordTooLarge",
    "RWLock",
    "Status",
    "Store",
    "StoreConfig",
    "TagIndex",
    "bucket_of",
    "expire_group",
    "fnv1a_64",
    "__version__",
]
