"""Controller system state and serially-equivalent transactions.

Concurrency control is optimistic: a transaction buffers its writes and
remembers the version of every key it read. At commit the read versions
are validated against the store; any change aborts the transaction. The
surviving commit order is therefore a valid serial order.
"""

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from typing import Any, Callable, Dict, List, Optional, Tuple


class TransactionError(Exception):
    pass


class ConflictAbort(TransactionError):
    """Read set was invalidated by a concurrent commit; safe to retry."""


class InvalidKey(TransactionError, KeyError):
    pass


class IntakePaused(TransactionError):
    """A coordinated checkpoint is draining in-flight transactions."""


class SystemState:
    """Flat namespaced keyspace: ``resources/<node>``, ``deployments/<app>``,
    ``routing/version`` and ``roles/<master>``. Values are JSON-compatible."""

    def __init__(self, data: Optional[Dict[str, Any]] = None):
        self.data: Dict[str, Any] = copy.deepcopy(dict(data or {}))

    def _ns(self, prefix: str) -> Dict[str, Any]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in sorted(self.data.items()) if k.startswith(p)}

    @property
    def resources(self) -> Dict[str, Any]:
        return self._ns("resources")

    @property
    def deployments(self) -> Dict[str, Any]:
        return self._ns("deployments")

    @property
    def roles(self) -> Dict[str, Any]:
        return self._ns("roles")

    @property
    def routing_version(self) -> int:
        return self.data.get("routing/version", 0)

    def leaders(self) -> List[str]:
        return sorted(m for m, r in self.roles.items() if r.get("role") == "leader")

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(dict(sorted(self.data.items())))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "SystemState":
        return cls(d)

    def __eq__(self, other):
        return isinstance(other, SystemState) and self.canonical() == other.canonical()

    def __repr__(self):
        return f"SystemState({len(self.data)} keys)"


class TxStatus(str, Enum):
    PENDING = "pending"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass
class Transaction:
    id: int
    operations: List[Tuple] = field(default_factory=list)
    status: TxStatus = TxStatus.PENDING
    reads: Dict[str, int] = field(default_factory=dict)
    writes: Dict[str, Any] = field(default_factory=dict)
    deletes: set = field(default_factory=set)


_MISSING = object()


class TransactionManager:
    def __init__(self, state: Optional[SystemState] = None):
        self.state = state if state is not None else SystemState()
        self.versions: Dict[str, int] = {k: 1 for k in self.state.data}
        self.history: List[int] = []
        self._ids = count(1)
        self._active: Dict[int, Transaction] = {}
        self._paused = False
        self._drain_waiters: List[Callable[[], None]] = []

    @property
    def in_flight(self) -> int:
        return len(self._active)

    @property
    def paused(self) -> bool:
        return self._paused

    def begin(self) -> Transaction:
        if self._paused:
            raise IntakePaused("transaction intake paused for checkpoint")
        tx = Transaction(next(self._ids))
        self._active[tx.id] = tx
        return tx

    def _check(self, tx: Transaction):
        if tx.status is not TxStatus.PENDING:
            raise TransactionError(f"transaction {tx.id} is {tx.status.value}")

    def read(self, tx: Transaction, key: str, default: Any = _MISSING) -> Any:
        self._check(tx)
        tx.operations.append(("read", key))
        if key in tx.writes:
            return copy.deepcopy(tx.writes[key])
        if key in tx.deletes:
            if default is _MISSING:
                raise InvalidKey(key)
            return default
        tx.reads.setdefault(key, self.versions.get(key, 0))
        if key not in self.state.data:
            if default is _MISSING:
                raise InvalidKey(key)
            return default
        return copy.deepcopy(self.state.data[key])

    def write(self, tx: Transaction, key: str, value: Any):
        self._check(tx)
        tx.operations.append(("write", key, value))
        tx.deletes.discard(key)
        tx.writes[key] = copy.deepcopy(value)

    def delete(self, tx: Transaction, key: str):
        self._check(tx)
        tx.operations.append(("delete", key))
        tx.writes.pop(key, None)
        tx.deletes.add(key)

    def _finish(self, tx: Transaction, status: TxStatus):
        tx.status = status
        self._active.pop(tx.id, None)
        if not self._active and self._drain_waiters:
            waiters, self._drain_waiters = self._drain_waiters, []
            for fn in waiters:
                fn()

    def abort(self, tx: Transaction):
        if tx.status is TxStatus.PENDING:
            self._finish(tx, TxStatus.ABORTED)

    def commit(self, tx: Transaction) -> bool:
        """Validate and apply. Raises :class:`ConflictAbort` on a stale read."""
        self._check(tx)
        for key, seen in tx.reads.items():
            if self.versions.get(key, 0) != seen:
                self._finish(tx, TxStatus.ABORTED)
                raise ConflictAbort(f"transaction {tx.id}: {key} changed")
        for key, value in tx.writes.items():
            self.state.data[key] = value
            self.versions[key] = self.versions.get(key, 0) + 1
        for key in tx.deletes:
            if key in self.state.data:
                del self.state.data[key]
                self.versions[key] = self.versions.get(key, 0) + 1
        self.history.append(tx.id)
        self._finish(tx, TxStatus.COMMITTED)
        return True

    def submit_transaction(self, tx: Transaction) -> TxStatus:
        try:
            self.commit(tx)
        except ConflictAbort:
            return TxStatus.ABORTED
        return TxStatus.COMMITTED

    def run(self, body: Callable[[Transaction], Any], retries: int = 8) -> Any:
        """Execute ``body`` in a fresh transaction, retrying on conflict."""
        for _ in range(retries + 1):
            tx = self.begin()
            try:
                result = body(tx)
                self.commit(tx)
                return result
            except ConflictAbort:
                continue
            except BaseException:
                self.abort(tx)
                raise
        raise ConflictAbort(f"gave up after {retries} retries")

    def pause_intake(self):
        self._paused = True

    def resume_intake(self):
        self._paused = False

    def when_drained(self, fn: Callable[[], None]):
        if not self._active:
            fn()
        else:
            self._drain_waiters.append(fn)

    def reset(self, state: SystemState):
        """Replace the whole state (rollback). In-flight transactions are aborted."""
        for tx in list(self._active.values()):
            self.abort(tx)
        self.state = SystemState(state.data)
        # bump every version so no stale reader can validate
        top = max(self.versions.values(), default=0) + 1
        self.versions = {k: top for k in set(self.versions) | set(self.state.data)}
