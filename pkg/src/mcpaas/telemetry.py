"""Per-instance monitoring, health checks and metric delivery."""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .fabric import SECOND, Fabric

SAMPLE_PERIOD_MS = 1 * SECOND
FLUSH_PERIOD_MS = 5 * SECOND


@dataclass(frozen=True)
class MetricEvent:
    instance_id: str
    application: str
    timestamp: float
    response_time: float
    request_count: int
    cpu_load: float
    component: str = ""

    def __post_init__(self):
        if self.response_time < 0 or self.request_count < 0:
            raise ValueError("metrics must be non-negative")
        if not 0.0 <= self.cpu_load <= 1.0:
            raise ValueError("cpu_load must lie in [0, 1]")

    @property
    def subject(self) -> str:
        return f"{self.application}/{self.component}" if self.component else self.application

    def value(self, metric: str) -> float:
        if metric in ("ResponseTime", "response_time"):
            return self.response_time
        if metric in ("RequestRate", "request_count"):
            return float(self.request_count)
        if metric in ("CpuLoad", "cpu_load"):
            return self.cpu_load
        raise KeyError(metric)


@dataclass(frozen=True)
class HealthReport:
    component_id: str
    timestamp: float
    reachable: bool
    latency: Optional[float] = None

    def __post_init__(self):
        if self.reachable != (self.latency is not None):
            raise ValueError("latency is present iff the component is reachable")


class Monitor:
    """Samples running instances and ships batches to the workload manager.

    Delivery is at-least-once: a batch that cannot reach the manager stays
    in the outbox and is resent with the next flush.
    """

    def __init__(
        self,
        fabric: Fabric,
        sample_period: float = SAMPLE_PERIOD_MS,
        flush_period: float = FLUSH_PERIOD_MS,
        probe_node: Optional[str] = None,
    ):
        self.fabric = fabric
        self.sample_period = sample_period
        self.flush_period = flush_period
        self.probe_node = probe_node
        self.buffers: Dict[str, List[MetricEvent]] = {}
        self.outbox: Dict[str, List[MetricEvent]] = {}
        self.delivered: List[MetricEvent] = []
        self._watch: Dict[str, bool] = {}
        self._running = False
        # agent node -> node hosting the manager it is bound to (None: unbound)
        self.sink_node: Callable[[str], Optional[str]] = lambda src: None
        self.sink: Callable[[List[MetricEvent]], None] = lambda batch: None

    def watch(self, instance_id: str):
        inst = self.fabric.instances[instance_id]
        node = self.fabric.nodes[inst.node_id]
        if not node.provider.monitorable:
            return
        self._watch[instance_id] = True
        self.buffers.setdefault(instance_id, [])
        self.outbox.setdefault(instance_id, [])

    def unwatch(self, instance_id: str):
        self._watch.pop(instance_id, None)

    @property
    def watched(self) -> List[str]:
        return list(self._watch)

    def sample_instance(self, instance_id: str, at: Optional[float] = None) -> Optional[MetricEvent]:
        if not self.fabric.instance_alive(instance_id):
            return None
        t = self.fabric.now if at is None else at
        inst = self.fabric.instances[instance_id]
        q = inst.queue_length(t)
        busy = inst.busy_since_sample
        ev = MetricEvent(
            instance_id=inst.id,
            application=inst.application,
            component=inst.component,
            timestamp=t,
            response_time=(q + 1) * inst.service_time,
            request_count=inst.arrivals_since_sample,
            cpu_load=min(1.0, busy / self.sample_period),
        )
        inst.arrivals_since_sample = 0
        inst.busy_since_sample = 0.0
        self.buffers.setdefault(instance_id, []).append(ev)
        return ev

    def flush_interval(self, instance_id: str) -> List[MetricEvent]:
        batch = self.buffers.get(instance_id, [])
        self.buffers[instance_id] = []
        return batch

    def health_check(self, component_id: str) -> HealthReport:
        node_id = component_id
        if component_id in self.fabric.instances:
            inst = self.fabric.instances[component_id]
            node_id = inst.node_id
            if not self.fabric.instance_alive(component_id):
                return HealthReport(component_id, self.fabric.now, False)
        lat = self.fabric.ping(self.probe_node, node_id) if self.probe_node else self.fabric.ping(node_id, node_id)
        return HealthReport(component_id, self.fabric.now, lat is not None, lat)

    def start(self):
        if self._running:
            return
        self._running = True
        self.fabric.clock.every(self.sample_period, self._sample_all)
        self.fabric.clock.every(self.flush_period, self._flush_all)

    def stop(self):
        self._running = False

    def _sample_all(self):
        if not self._running:
            return False
        for iid in list(self._watch):
            self.sample_instance(iid)
        return True

    def _flush_all(self):
        if not self._running:
            return False
        batch: List[MetricEvent] = []
        for iid in list(self.outbox):
            src = self.fabric.instances[iid].node_id
            if not self.fabric.nodes[src].running:
                # the agent went down with its buffers
                del self.outbox[iid]
                self.buffers.pop(iid, None)
                continue
            pending = self.outbox[iid] + self.flush_interval(iid)
            sink = self.sink_node(src)
            if sink is not None and self.fabric.ping(src, sink) is not None:
                batch.extend(pending)
                self.outbox[iid] = []
            else:
                self.outbox[iid] = pending
            if iid not in self._watch and not self.outbox[iid] and not self.buffers.get(iid):
                del self.outbox[iid]
        if batch:
            self.delivered.extend(batch)
            self.sink(batch)
        return True
