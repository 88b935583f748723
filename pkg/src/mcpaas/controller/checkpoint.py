"""Pluggable state store and coordinated checkpoints."""

import hashlib
import json
import os
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from filelock import FileLock

LEADER_KEY = "leader.json"
_CKPT_RE = re.compile(r"^checkpoint-(\d+)\.json$")


class StoreUnavailable(Exception):
    pass


class DigestMismatch(ValueError):
    pass


class StateStore(ABC):
    """Shared medium between masters. ``compare_and_set`` must be atomic."""

    def __init__(self):
        self.available = True

    def _guard(self):
        if not self.available:
            raise StoreUnavailable("state store unreachable")

    @abstractmethod
    def put(self, key: str, value: bytes) -> None: ...

    @abstractmethod
    def get(self, key: str) -> Optional[bytes]: ...

    @abstractmethod
    def compare_and_set(self, key: str, expected: Optional[bytes], value: bytes) -> bool: ...

    @abstractmethod
    def list(self, prefix: str = "") -> List[str]: ...

    @abstractmethod
    def delete(self, key: str) -> None: ...


class MemoryStateStore(StateStore):
    def __init__(self):
        super().__init__()
        self._data: Dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key, value):
        self._guard()
        with self._lock:
            self._data[key] = bytes(value)

    def get(self, key):
        self._guard()
        return self._data.get(key)

    def compare_and_set(self, key, expected, value):
        self._guard()
        with self._lock:
            if self._data.get(key) != expected:
                return False
            self._data[key] = bytes(value)
            return True

    def list(self, prefix=""):
        self._guard()
        return sorted(k for k in self._data if k.startswith(prefix))

    def delete(self, key):
        self._guard()
        with self._lock:
            self._data.pop(key, None)


class FileStateStore(StateStore):
    """One file per key in a directory; writes go through a temp file + rename."""

    def __init__(self, root: Union[str, Path]):
        super().__init__()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".store.lock"))

    def _path(self, key: str) -> Path:
        if "/" in key or key.startswith("."):
            raise ValueError(f"invalid store key {key!r}")
        return self.root / key

    def _write(self, key: str, value: bytes):
        path = self._path(key)
        tmp = path.with_name(f".{key}.tmp")
        tmp.write_bytes(value)
        os.replace(tmp, path)

    def put(self, key, value):
        self._guard()
        with self._lock:
            self._write(key, value)

    def get(self, key):
        self._guard()
        p = self._path(key)
        return p.read_bytes() if p.exists() else None

    def compare_and_set(self, key, expected, value):
        self._guard()
        with self._lock:
            p = self._path(key)
            current = p.read_bytes() if p.exists() else None
            if current != expected:
                return False
            self._write(key, value)
            return True

    def list(self, prefix=""):
        self._guard()
        return sorted(p.name for p in self.root.iterdir() if not p.name.startswith(".") and p.name.startswith(prefix))

    def delete(self, key):
        self._guard()
        with self._lock:
            p = self._path(key)
            if p.exists():
                p.unlink()


def _digest(seq: int, timestamp: float, state: Dict[str, Any]) -> str:
    body = json.dumps({"seq": seq, "timestamp": timestamp, "state": state}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode()).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    seq: int
    timestamp: float
    state: Dict[str, Any]
    digest: str

    @classmethod
    def make(cls, seq: int, timestamp: float, state: Dict[str, Any]) -> "Checkpoint":
        return cls(seq, timestamp, state, _digest(seq, timestamp, state))

    @property
    def key(self) -> str:
        return f"checkpoint-{self.seq}.json"

    def to_bytes(self) -> bytes:
        return json.dumps(
            {"seq": self.seq, "timestamp": self.timestamp, "state": self.state, "digest": self.digest},
            sort_keys=True, separators=(",", ":"),
        ).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        try:
            d = json.loads(raw.decode())
            cp = cls(int(d["seq"]), float(d["timestamp"]), d["state"], d["digest"])
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
            raise DigestMismatch(f"unreadable checkpoint: {e}") from None
        if _digest(cp.seq, cp.timestamp, cp.state) != cp.digest:
            raise DigestMismatch(f"checkpoint {cp.seq}: digest mismatch")
        return cp


class CheckpointLog:
    """Keeps the newest ``retain`` checkpoints in a store."""

    def __init__(self, store: StateStore, retain: int = 3):
        if retain < 1:
            raise ValueError("retain must be >= 1")
        self.store = store
        self.retain = retain
        self.skipped: List[str] = []

    def sequences(self) -> List[int]:
        out = []
        for k in self.store.list("checkpoint-"):
            m = _CKPT_RE.match(k)
            if m:
                out.append(int(m.group(1)))
        return sorted(out)

    def next_seq(self) -> int:
        seqs = self.sequences()
        return (seqs[-1] + 1) if seqs else 1

    def save(self, timestamp: float, state: Dict[str, Any]) -> Checkpoint:
        cp = Checkpoint.make(self.next_seq(), timestamp, state)
        self.store.put(cp.key, cp.to_bytes())
        for old in self.sequences()[: -self.retain]:
            self.store.delete(f"checkpoint-{old}.json")
        return cp

    def load(self, seq: int) -> Checkpoint:
        raw = self.store.get(f"checkpoint-{seq}.json")
        if raw is None:
            raise KeyError(seq)
        return Checkpoint.from_bytes(raw)

    def load_latest(self) -> Optional[Checkpoint]:
        """Newest checkpoint that verifies; corrupt ones are skipped and noted."""
        for seq in reversed(self.sequences()):
            try:
                return self.load(seq)
            except DigestMismatch as e:
                self.skipped.append(str(e))
        return None


def read_leader(store: StateStore) -> Optional[Dict[str, Any]]:
    raw = store.get(LEADER_KEY)
    return None if raw is None else json.loads(raw.decode())


def encode_leader(master_id: str, term: int, timestamp: float) -> bytes:
    return json.dumps(
        {"master_id": master_id, "term": term, "timestamp": timestamp}, sort_keys=True, separators=(",", ":")
    ).encode()
