"""Deterministic simulated cloud fabric.

Everything else in the package runs as callbacks on the :class:`SimClock`
owned by a :class:`Fabric`. Time is a float number of simulated
milliseconds; nothing here reads the wall clock.
"""

from collections import deque
import heapq
import json
import math
import random
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Dict, List, Optional, Union

MS = 1.0
SECOND = 1000.0
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE

DEFAULT_PROVISION_DELAY_MS = 54 * SECOND  # 0.9 min agent node
DEFAULT_MASTER_STACK_DELAY_MS = 126 * SECOND  # 2.1 min master stack
DEFAULT_BASE_LATENCY_MS = 20.0


class FabricError(Exception):
    pass


class VmType(IntEnum):
    MICRO = 0
    SMALL = 1
    MEDIUM = 2
    LARGE = 3

    @classmethod
    def parse(cls, name: Union[str, "VmType"]) -> "VmType":
        if isinstance(name, VmType):
            return name
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown vm type {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


def classify_vm(vcpu: int, ram_gib: float) -> VmType:
    """Map raw provider VM characteristics onto the platform's four types."""
    if vcpu < 1 or ram_gib <= 0:
        raise ValueError("vcpu must be >= 1 and ram > 0")
    if vcpu <= 1 and ram_gib < 1:
        return VmType.MICRO
    if vcpu <= 1 and ram_gib <= 2:
        return VmType.SMALL
    if vcpu <= 2 and ram_gib <= 4:
        return VmType.MEDIUM
    return VmType.LARGE


@dataclass(frozen=True)
class VmOffer:
    vcpu: int
    ram: float
    price: float  # currency units per hour


@dataclass(frozen=True)
class ProviderProfile:
    id: str
    display_name: str
    location: str
    vm_catalog: Dict[VmType, VmOffer]
    provision_delay: float = DEFAULT_PROVISION_DELAY_MS
    base_latency: float = DEFAULT_BASE_LATENCY_MS
    monitorable: bool = True

    def __post_init__(self):
        if not self.vm_catalog:
            raise ValueError(f"provider {self.id}: empty vm catalog")
        for offer in self.vm_catalog.values():
            if offer.price <= 0:
                raise ValueError(f"provider {self.id}: prices must be positive")
        if self.provision_delay < 0:
            raise ValueError(f"provider {self.id}: negative provision delay")
        if self.base_latency <= 0:
            raise ValueError(f"provider {self.id}: latency must be positive")

    def price(self, vm_type: VmType) -> float:
        return self.vm_catalog[vm_type].price

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ProviderProfile":
        catalog = {}
        for name, offer in d["vm_catalog"].items():
            catalog[VmType.parse(name)] = VmOffer(
                vcpu=int(offer["vcpu"]), ram=float(offer["ram"]), price=float(offer["price"])
            )
        return cls(
            id=d["id"],
            display_name=d.get("display_name", d["id"]),
            location=d["location"],
            vm_catalog=catalog,
            provision_delay=float(d.get("provision_delay_ms", DEFAULT_PROVISION_DELAY_MS)),
            base_latency=float(d.get("base_latency_ms", DEFAULT_BASE_LATENCY_MS)),
            monitorable=bool(d.get("monitorable", True)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "display_name": self.display_name,
            "location": self.location,
            "vm_catalog": {
                t.label: {"vcpu": o.vcpu, "ram": o.ram, "price": o.price}
                for t, o in sorted(self.vm_catalog.items())
            },
            "provision_delay_ms": self.provision_delay,
            "base_latency_ms": self.base_latency,
            "monitorable": self.monitorable,
        }


def load_registry(path) -> List[ProviderProfile]:
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = data["providers"]
    return [ProviderProfile.from_dict(d) for d in data]


class NodeState(str, Enum):
    PROVISIONING = "provisioning"
    RUNNING = "running"
    FAILED = "failed"
    TERMINATED = "terminated"


@dataclass
class SimNode:
    id: str
    provider: ProviderProfile
    vm_type: VmType
    state: NodeState = NodeState.PROVISIONING
    hosted_instances: List[str] = field(default_factory=list)
    reachable_latency: float = DEFAULT_BASE_LATENCY_MS
    role: str = "agent"  # agent | master
    running_since: Optional[float] = None
    billed_ms: float = 0.0

    @property
    def running(self) -> bool:
        return self.state is NodeState.RUNNING


class InstanceState(str, Enum):
    DEPLOYING = "deploying"
    RUNNING = "running"
    TERMINATED = "terminated"


@dataclass
class AppInstance:
    """One deployed replica of an application component.

    Load model: a single-server deterministic FIFO queue. A request
    arriving at ``t`` waits for the current backlog and then takes
    ``service_time`` (plus ``overhead`` when platform accounting is on).
    Requests whose response would reach the timeout are refused and never
    enter the queue.
    """

    id: str
    application: str
    component: str
    node_id: str
    service_time: float = 100.0
    overhead: float = 0.0
    state: InstanceState = InstanceState.DEPLOYING
    busy_until: float = 0.0
    arrivals_since_sample: int = 0
    busy_since_sample: float = 0.0
    completions: deque = field(default_factory=deque, repr=False)

    @property
    def key(self) -> str:
        return f"{self.application}/{self.component}"

    def backlog(self, t: float) -> float:
        return max(0.0, self.busy_until - t)

    def queue_length(self, t: float) -> int:
        """Requests still in the system at ``t`` (waiting or in service)."""
        c = self.completions
        while c and c[0] <= t:
            c.popleft()
        return len(c)

    def enqueue_at(self, t: float) -> float:
        """Append a request unconditionally; returns its response time."""
        cost = self.service_time + self.overhead
        self.queue_length(t)
        start = max(t, self.busy_until)
        self.busy_until = start + cost
        self.completions.append(self.busy_until)
        self.arrivals_since_sample += 1
        self.busy_since_sample += cost
        return self.busy_until - t

    def accept(self, t: float, timeout: float) -> Optional[float]:
        """Response time for a request at ``t``, or None when it would time out."""
        if self.backlog(t) + self.service_time + self.overhead >= timeout:
            return None
        return self.enqueue_at(t)


@dataclass(order=True)
class _Scheduled:
    time: float
    seq: int
    callback: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())
    cancelled: bool = field(compare=False, default=False)

    def cancel(self):
        self.cancelled = True


class SimClock:
    """Priority-queue event loop. Ties at equal time run in insertion order."""

    def __init__(self, seed: int = 0):
        self.now = 0.0
        self.rng_seed = seed
        self.rng = random.Random(seed)
        self._pending: List[_Scheduled] = []
        self._seq = 0
        self._stopped = False

    def schedule_at(self, at: float, callback: Callable, *args) -> _Scheduled:
        if at < self.now:
            raise FabricError(f"cannot schedule in the past ({at} < {self.now})")
        self._seq += 1
        ev = _Scheduled(at, self._seq, callback, args)
        heapq.heappush(self._pending, ev)
        return ev

    def schedule(self, delay: float, callback: Callable, *args) -> _Scheduled:
        return self.schedule_at(self.now + max(0.0, delay), callback, *args)

    def every(self, period: float, callback: Callable, start: Optional[float] = None):
        """Run ``callback()`` periodically until it returns False."""

        def tick():
            if callback() is False:
                return
            self.schedule(period, tick)

        self.schedule_at(self.now + period if start is None else start, tick)

    @property
    def pending(self) -> int:
        return sum(1 for e in self._pending if not e.cancelled)

    def stop(self):
        self._stopped = True

    def step(self) -> bool:
        while self._pending:
            ev = heapq.heappop(self._pending)
            if ev.cancelled:
                continue
            self.now = ev.time
            ev.callback(*ev.args)
            return True
        return False

    def run(self, until: float = math.inf):
        self._stopped = False
        while self._pending and not self._stopped:
            head = self._pending[0]
            if head.time > until:
                break
            self.step()
        if until != math.inf and not self._stopped:
            self.now = max(self.now, until)


class EventLog:
    def __init__(self, clock: SimClock):
        self.clock = clock
        self.records: List[Dict[str, Any]] = []
        self._listeners: List[Callable[[Dict[str, Any]], None]] = []

    def emit(self, actor: str, event: str, **detail) -> Dict[str, Any]:
        rec = {"time": round(self.clock.now, 6), "actor": actor, "event": event, "detail": detail}
        self.records.append(rec)
        for fn in self._listeners:
            fn(rec)
        return rec

    def subscribe(self, fn: Callable[[Dict[str, Any]], None]):
        self._listeners.append(fn)

    def select(self, event: Optional[str] = None, actor: Optional[str] = None):
        return [
            r
            for r in self.records
            if (event is None or r["event"] == event) and (actor is None or r["actor"] == actor)
        ]

    def to_ndjson(self) -> str:
        return "".join(
            json.dumps(r, sort_keys=True, separators=(",", ":"), default=str) + "\n"
            for r in self.records
        )


class Fabric:
    """A set of simulated providers, their nodes and hosted instances."""

    def __init__(self, providers: List[ProviderProfile], seed: int = 0, latency_jitter: float = 0.2):
        if not providers:
            raise FabricError("fabric needs at least one provider")
        self.clock = SimClock(seed)
        self.log = EventLog(self.clock)
        self.providers: Dict[str, ProviderProfile] = {}
        for p in providers:
            if p.id in self.providers:
                raise FabricError(f"duplicate provider id {p.id}")
            self.providers[p.id] = p
        self.nodes: Dict[str, SimNode] = {}
        self.instances: Dict[str, AppInstance] = {}
        self.latency_jitter = latency_jitter
        self._node_counter = 0
        self._instance_counter = 0
        self._on_node_state: List[Callable[[SimNode], None]] = []

    @property
    def now(self) -> float:
        return self.clock.now

    def watch_nodes(self, fn: Callable[[SimNode], None]):
        self._on_node_state.append(fn)

    def _set_state(self, node: SimNode, state: NodeState):
        if node.state is NodeState.RUNNING and node.running_since is not None:
            node.billed_ms += self.now - node.running_since
            node.running_since = None
        node.state = state
        if state is NodeState.RUNNING:
            node.running_since = self.now
        self.log.emit("fabric", f"node_{state.value}", node=node.id, provider=node.provider.id)
        for fn in self._on_node_state:
            fn(node)

    def provision_node(
        self,
        provider: Union[str, ProviderProfile],
        vm_type: Union[str, VmType],
        role: str = "agent",
        delay: Optional[float] = None,
        on_ready: Optional[Callable[[SimNode], None]] = None,
    ) -> SimNode:
        p = self.providers[provider] if isinstance(provider, str) else provider
        if p.id not in self.providers:
            raise FabricError(f"unknown provider {p.id}")
        vm_type = VmType.parse(vm_type)
        if vm_type not in p.vm_catalog:
            raise FabricError(f"provider {p.id} does not offer {vm_type.label}")
        self._node_counter += 1
        jitter = self.clock.rng.uniform(0.0, self.latency_jitter) * p.base_latency
        node = SimNode(
            id=f"n{self._node_counter}-{p.id}",
            provider=p,
            vm_type=vm_type,
            reachable_latency=round(p.base_latency + jitter, 3),
            role=role,
        )
        self.nodes[node.id] = node
        self.log.emit("fabric", "node_provisioning", node=node.id, provider=p.id, vm=vm_type.label)

        def ready():
            if node.state is not NodeState.PROVISIONING:
                return
            self._set_state(node, NodeState.RUNNING)
            if on_ready is not None:
                on_ready(node)

        wait = p.provision_delay if delay is None else delay
        if wait <= 0:
            ready()
        else:
            self.clock.schedule(wait, ready)
        return node

    def _resolve_targets(self, target: str) -> List[SimNode]:
        if target in self.nodes:
            return [self.nodes[target]]
        if target in self.providers:
            return [n for n in self.nodes.values() if n.provider.id == target]
        raise FabricError(f"unknown failure target {target!r}")

    def inject_failure(self, target: str, at: Optional[float] = None):
        if target not in self.nodes and target not in self.providers:
            raise FabricError(f"unknown failure target {target!r}")
        at = self.now if at is None else at

        def fire():
            # provider targets also take down nodes created after scheduling
            for node in self._resolve_targets(target):
                if node.state in (NodeState.RUNNING, NodeState.PROVISIONING):
                    self._set_state(node, NodeState.FAILED)
            self.log.emit("fabric", "failure_injected", target=target)

        return self.clock.schedule_at(at, fire)

    def terminate_node(self, node_id: str):
        node = self.nodes[node_id]
        if node.state in (NodeState.RUNNING, NodeState.PROVISIONING):
            for iid in list(node.hosted_instances):
                self.instances[iid].state = InstanceState.TERMINATED
            self._set_state(node, NodeState.TERMINATED)

    def ping(self, source: str, target: str) -> Optional[float]:
        """Reachable latency of ``target`` in ms, or None when unreachable."""
        src = self.nodes.get(source)
        if src is not None and not src.running:
            return None
        dst = self.nodes.get(target)
        if dst is None or not dst.running:
            return None
        return dst.reachable_latency

    def create_instance(
        self,
        node_id: str,
        application: str,
        component: str,
        service_time: float = 100.0,
        overhead: float = 0.0,
    ) -> AppInstance:
        node = self.nodes[node_id]
        self._instance_counter += 1
        inst = AppInstance(
            id=f"i{self._instance_counter}-{component}",
            application=application,
            component=component,
            node_id=node_id,
            service_time=service_time,
            overhead=overhead,
        )
        self.instances[inst.id] = inst
        node.hosted_instances.append(inst.id)
        return inst

    def instance_alive(self, instance_id: str) -> bool:
        inst = self.instances.get(instance_id)
        if inst is None or inst.state is not InstanceState.RUNNING:
            return False
        return self.nodes[inst.node_id].running

    def terminate_instance(self, instance_id: str):
        inst = self.instances[instance_id]
        inst.state = InstanceState.TERMINATED
        node = self.nodes[inst.node_id]
        if instance_id in node.hosted_instances:
            node.hosted_instances.remove(instance_id)

    def finalize(self):
        """Close accounting: every live node is terminated at simulation end."""
        for node in self.nodes.values():
            if node.state in (NodeState.RUNNING, NodeState.PROVISIONING):
                self._set_state(node, NodeState.TERMINATED)

    def billed_hours(self) -> Dict[str, float]:
        out = {}
        for node in self.nodes.values():
            ms = node.billed_ms
            if node.running_since is not None:
                ms += self.now - node.running_since
            out[node.id] = ms / HOUR
        return out

    def cost(self) -> float:
        hours = self.billed_hours()
        return sum(hours[n.id] * n.provider.price(n.vm_type) for n in self.nodes.values())
