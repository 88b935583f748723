"""Multi-cloud load balancer: routing table, round-robin dispatch, health probes."""

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional

from .fabric import SECOND, Fabric

DEFAULT_TIMEOUT_MS = 5 * SECOND
DEFAULT_PROBE_PERIOD_MS = 100.0
DEFAULT_PROBE_MISSES = 3


class BalancerError(KeyError):
    pass


class Status(str, Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    NO_BACKEND = "no-backend"


@dataclass
class RouteEntry:
    instance_id: str
    node_id: str
    provider_id: str
    healthy: bool = True


@dataclass(frozen=True)
class RequestOutcome:
    request_id: int
    application: str
    instance_id: Optional[str]
    latency: float
    status: Status
    time: float
    version: int


class RoutingTable:
    """Versioned map of route key -> entries; every mutation bumps the version."""

    def __init__(self):
        self.version = 0
        self.entries: Dict[str, List[RouteEntry]] = {}
        self.cursor: Dict[str, int] = {}

    def _bump(self) -> int:
        self.version += 1
        return self.version

    def ensure(self, key: str) -> int:
        if key not in self.entries:
            self.entries[key] = []
            self.cursor[key] = 0
            return self._bump()
        return self.version

    def add(self, key: str, entry: RouteEntry) -> int:
        self.entries.setdefault(key, [])
        self.cursor.setdefault(key, 0)
        self.entries[key].append(entry)
        return self._bump()

    def remove(self, instance_id: str) -> int:
        for key, entries in self.entries.items():
            for i, e in enumerate(entries):
                if e.instance_id == instance_id:
                    del entries[i]
                    if entries:
                        self.cursor[key] %= len(entries)
                    else:
                        self.cursor[key] = 0
                    return self._bump()
        raise BalancerError(instance_id)

    def find(self, instance_id: str) -> RouteEntry:
        for entries in self.entries.values():
            for e in entries:
                if e.instance_id == instance_id:
                    return e
        raise BalancerError(instance_id)

    def key_of(self, instance_id: str) -> str:
        for key, entries in self.entries.items():
            if any(e.instance_id == instance_id for e in entries):
                return key
        raise BalancerError(instance_id)

    def set_health(self, instance_id: str, healthy: bool) -> int:
        self.find(instance_id).healthy = healthy
        return self._bump()

    def next_healthy(self, key: str) -> Optional[RouteEntry]:
        entries = self.entries[key]
        n = len(entries)
        start = self.cursor[key]
        for k in range(n):
            e = entries[(start + k) % n]
            if e.healthy:
                self.cursor[key] = (start + k + 1) % n
                return e
        return None

    def healthy(self, key: str) -> List[RouteEntry]:
        return [e for e in self.entries.get(key, []) if e.healthy]

    def snapshot(self) -> Dict[str, List[dict]]:
        return {
            k: [dict(vars(e)) for e in v] for k, v in sorted(self.entries.items())
        }


class LoadBalancer:
    """Single logical balancer actor running on the fabric event loop.

    Requests to an instance whose node has silently failed are lost until
    the pull probe marks the entry unhealthy (``probe_period * misses``).
    """

    def __init__(
        self,
        fabric: Fabric,
        timeout: float = DEFAULT_TIMEOUT_MS,
        probe_period: float = DEFAULT_PROBE_PERIOD_MS,
        probe_misses: int = DEFAULT_PROBE_MISSES,
        aliases: Optional[Dict[str, str]] = None,
    ):
        self.fabric = fabric
        self.table = RoutingTable()
        self.timeout = timeout
        self.probe_period = probe_period
        self.probe_misses = probe_misses
        self.aliases: Dict[str, str] = dict(aliases or {})
        self.outcomes: List[RequestOutcome] = []
        self.record_outcomes = True
        self._arrivals: Dict[str, List[float]] = {}
        self._misses: Dict[str, int] = {}
        self._arrival_listeners: List[Callable[[str, float], None]] = []
        self._health_listeners: List[Callable[[str, str, bool], None]] = []
        self._probing = False
        self._next_request = 0

    @property
    def detection_budget(self) -> float:
        return self.probe_period * self.probe_misses

    def resolve(self, application: str) -> str:
        key = self.aliases.get(application, application)
        if key not in self.table.entries:
            raise BalancerError(f"unknown application {application!r}")
        return key

    def on_arrival(self, fn: Callable[[str, float], None]):
        self._arrival_listeners.append(fn)

    def on_health_change(self, fn: Callable[[str, str, bool], None]):
        self._health_listeners.append(fn)

    def register(self, key: str, instance_id: str, node_id: str, provider_id: str) -> int:
        self._misses[instance_id] = 0
        v = self.table.add(key, RouteEntry(instance_id, node_id, provider_id))
        self.fabric.log.emit("balancer", "route_added", key=key, instance=instance_id, version=v)
        return v

    def deregister(self, instance_id: str) -> int:
        v = self.table.remove(instance_id)
        self._misses.pop(instance_id, None)
        self.fabric.log.emit("balancer", "route_removed", instance=instance_id, version=v)
        return v

    def dispatch(self, application: str, request_id: Optional[int] = None, at: Optional[float] = None) -> RequestOutcome:
        key = self.resolve(application)
        t = self.fabric.now if at is None else at
        if request_id is None:
            request_id = self._next_request
        self._next_request = max(self._next_request, request_id) + 1
        self._arrivals.setdefault(key, []).append(t)
        for fn in self._arrival_listeners:
            fn(key, t)
        entry = self.table.next_healthy(key)
        version = self.table.version
        if entry is None:
            out = RequestOutcome(request_id, key, None, 0.0, Status.NO_BACKEND, t, version)
        elif not self.fabric.instance_alive(entry.instance_id):
            # nobody answers; the client gives up at the timeout
            out = RequestOutcome(request_id, key, entry.instance_id, self.timeout, Status.TIMEOUT, t, version)
        else:
            inst = self.fabric.instances[entry.instance_id]
            rt = inst.accept(t, self.timeout)
            if rt is None:
                out = RequestOutcome(request_id, key, inst.id, self.timeout, Status.TIMEOUT, t, version)
            else:
                out = RequestOutcome(request_id, key, inst.id, rt, Status.OK, t, version)
        if self.record_outcomes:
            self.outcomes.append(out)
        return out

    def mark_health(self, instance_id: str, healthy: bool, at: Optional[float] = None) -> int:
        entry = self.table.find(instance_id)
        changed = entry.healthy != healthy
        v = self.table.set_health(instance_id, healthy)
        if changed:
            key = self.table.key_of(instance_id)
            self.fabric.log.emit(
                "balancer", "health_changed", instance=instance_id, healthy=healthy, version=v
            )
            for fn in self._health_listeners:
                fn(key, instance_id, healthy)
        return v

    def connection_rate(self, application: str, start: float, end: float) -> float:
        """Dispatched requests per second over the half-open window [start, end)."""
        if end <= start:
            raise ValueError("window must be positive")
        key = self.resolve(application)
        times = self._arrivals.get(key, [])
        n = bisect.bisect_left(times, end) - bisect.bisect_left(times, start)
        return n / ((end - start) / SECOND)

    def start_probing(self):
        if self._probing:
            return
        self._probing = True
        self.fabric.clock.every(self.probe_period, self._probe)

    def stop_probing(self):
        self._probing = False

    def _probe(self):
        if not self._probing:
            return False
        for entries in list(self.table.entries.values()):
            for e in list(entries):
                alive = self.fabric.instance_alive(e.instance_id)
                if alive:
                    self._misses[e.instance_id] = 0
                    if not e.healthy:
                        self.mark_health(e.instance_id, True)
                else:
                    self._misses[e.instance_id] = self._misses.get(e.instance_id, 0) + 1
                    if e.healthy and self._misses[e.instance_id] >= self.probe_misses:
                        self.mark_health(e.instance_id, False)
        return True
