"""Service deployer: constraint validation, placement, and deployment sequencing."""

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .balancer import LoadBalancer
from .fabric import SECOND, Fabric, InstanceState, NodeState, ProviderProfile, SimNode, VmType
from .manifest import ApplicationManifest, ComponentSpec

DEFAULT_APP_DEPLOY_DELAY_MS = 4 * SECOND
DEFAULT_AGENT_STACK_DELAY_MS = 0.0
PHASE_TIMEOUT_FACTOR = 5


class ConstraintError(ValueError):
    def __init__(self, component: str, constraint: str, message: str):
        super().__init__(f"component {component}: {message}")
        self.component = component
        self.constraint = constraint


def matches_location(provider: ProviderProfile, value: str) -> bool:
    """Location constraint test; a provider name, a location, or ``Provider_Location``."""
    v = value.strip().lower()
    names = {provider.id.lower(), provider.display_name.lower()}
    if v == provider.location.lower() or v in names:
        return True
    head, sep, tail = v.partition("_")
    return bool(sep) and head in names and tail == provider.location.lower()


def _eligible(component: ComponentSpec, provider: ProviderProfile) -> bool:
    loc = component.location
    if loc is not None and not matches_location(provider, loc):
        return False
    return component.vm_type in provider.vm_catalog


def validate_constraints(
    manifest: ApplicationManifest, registry: Sequence[ProviderProfile]
) -> Dict[str, List[ProviderProfile]]:
    if not registry:
        raise ValueError("provider registry is empty")
    out = {}
    for comp in manifest.components:
        cands = [p for p in registry if _eligible(comp, p)]
        if not cands:
            failing = "location" if comp.location is not None and not any(
                matches_location(p, comp.location) for p in registry
            ) else "vm"
            raise ConstraintError(comp.name, failing, f"no provider satisfies {failing}")
        if len(cands) < comp.replication:
            raise ConstraintError(
                comp.name,
                "replication",
                f"replication {comp.replication} exceeds {len(cands)} candidate provider(s)",
            )
        out[comp.name] = cands
    return out


@dataclass(frozen=True)
class Placement:
    component: str
    replica: int
    provider_id: str
    vm_type: VmType
    note: str = ""


@dataclass
class DeploymentPlan:
    application: str
    placements: List[Placement]

    def count(self, component: str) -> int:
        return sum(1 for p in self.placements if p.component == component)

    def shape(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for p in self.placements:
            out[p.component] = out.get(p.component, 0) + 1
        return out


def pick_lowest_price(
    candidates: Sequence[ProviderProfile], vm_type: VmType, rng: random.Random, exclude=()
) -> Tuple[ProviderProfile, float]:
    avail = [p for p in candidates if p.id not in exclude]
    if not avail:
        raise ValueError("no candidate provider left")
    best = min(p.price(vm_type) for p in avail)
    cheapest = [p for p in avail if p.price(vm_type) == best]
    return rng.choice(cheapest), best


def choose_placement(
    manifest: ApplicationManifest,
    candidates: Dict[str, List[ProviderProfile]],
    rng: random.Random,
    replicas: Optional[Dict[str, int]] = None,
    existing: Optional[Dict[str, Sequence[str]]] = None,
) -> DeploymentPlan:
    """Per replica: keep the cheapest candidates, then pick one at random.

    ``existing`` lists providers already used by live replicas; they are
    avoided when any other candidate remains.
    """
    placements = []
    for comp in manifest.components:
        n = comp.replication if replicas is None else replicas.get(comp.name, 0)
        used = list((existing or {}).get(comp.name, ()))
        for r in range(n):
            pool = candidates[comp.name]
            if all(p.id in used for p in pool):
                used = []  # more replicas than providers; fall back to reuse
            chosen, price = pick_lowest_price(pool, comp.vm_type, rng, exclude=used)
            used.append(chosen.id)
            why = f"location={comp.location}" if comp.location else "any location"
            placements.append(
                Placement(comp.name, r, chosen.id, comp.vm_type, f"{why}; vm={comp.vm_type.label}; price={price:g}/h")
            )
    return DeploymentPlan(manifest.name, placements)


class RecordStatus(str, Enum):
    VALIDATING = "validating"
    PROVISIONING = "provisioning"
    DEPLOYING = "deploying"
    ACTIVE = "active"
    FAILED = "failed"


_ORDER = [RecordStatus.VALIDATING, RecordStatus.PROVISIONING, RecordStatus.DEPLOYING, RecordStatus.ACTIVE]


@dataclass
class DeploymentRecord:
    plan: DeploymentPlan
    instances: Dict[Tuple[str, int], str] = field(default_factory=dict)
    nodes: Dict[Tuple[str, int], str] = field(default_factory=dict)
    status: RecordStatus = RecordStatus.VALIDATING
    timestamps: Dict[str, float] = field(default_factory=dict)
    error: str = ""

    def advance(self, status: RecordStatus, now: float):
        if status is self.status:
            return
        if status is not RecordStatus.FAILED:
            back = _ORDER.index(status) < _ORDER.index(self.status)
            replacing = self.status is RecordStatus.ACTIVE and status is RecordStatus.DEPLOYING
            if self.status is RecordStatus.FAILED or (back and not replacing):
                raise ValueError(f"illegal transition {self.status.value} -> {status.value}")
        self.status = status
        self.timestamps[status.value] = now


class ServiceDeployer:
    """Runs plans through node provisioning, stack install and instance deploy.

    All-or-nothing per plan: instances are registered with the balancer only
    once every placement is running; any failure rolls the plan back.
    """

    def __init__(
        self,
        fabric: Fabric,
        balancer: Optional[LoadBalancer] = None,
        app_deploy_delay: float = DEFAULT_APP_DEPLOY_DELAY_MS,
        agent_stack_delay: float = DEFAULT_AGENT_STACK_DELAY_MS,
    ):
        self.fabric = fabric
        self.balancer = balancer
        self.app_deploy_delay = app_deploy_delay
        self.agent_stack_delay = agent_stack_delay
        self.service_time: Callable[[str, str], float] = lambda app, comp: 100.0
        self.overhead: float = 0.0
        self.on_instance_live: List[Callable[[str], None]] = []

    def _reusable(self, placement: Placement, app: str, claimed: set) -> Optional[SimNode]:
        for node in self.fabric.nodes.values():
            if (
                node.role == "agent"
                and node.running
                and node.provider.id == placement.provider_id
                and node.vm_type == placement.vm_type
                and node.id not in claimed
                and not any(
                    self.fabric.instances[i].application == app
                    and self.fabric.instances[i].component == placement.component
                    and self.fabric.instances[i].state is not InstanceState.TERMINATED
                    for i in node.hosted_instances
                )
            ):
                return node
        return None

    def execute_plan(
        self,
        plan: DeploymentPlan,
        on_done: Optional[Callable[[DeploymentRecord], None]] = None,
        register: bool = True,
    ) -> DeploymentRecord:
        fab = self.fabric
        rec = DeploymentRecord(plan)
        rec.timestamps["validating"] = fab.now
        log = fab.log
        log.emit(
            "deployer", "plan", application=plan.application,
            placements=[[p.component, p.replica, p.provider_id, p.vm_type.label] for p in plan.placements],
        )
        fresh_nodes: List[str] = []
        pending = {(p.component, p.replica) for p in plan.placements}
        waiting_node = set(pending)
        watchdogs = []
        claimed: set = set()

        def finish(ok: bool, why: str = ""):
            if rec.status in (RecordStatus.ACTIVE, RecordStatus.FAILED):
                return
            for w in watchdogs:
                w.cancel()
            if ok:
                if register and self.balancer is not None:
                    for p in plan.placements:
                        iid = rec.instances[(p.component, p.replica)]
                        self.balancer.register(
                            f"{plan.application}/{p.component}", iid,
                            rec.nodes[(p.component, p.replica)], p.provider_id,
                        )
                rec.advance(RecordStatus.ACTIVE, fab.now)
                log.emit("deployer", "record_active", application=plan.application,
                         instances=sorted(rec.instances.values()))
                for iid in sorted(rec.instances.values()):
                    for fn in self.on_instance_live:
                        fn(iid)
            else:
                rec.error = why
                rec.advance(RecordStatus.FAILED, fab.now)
                for iid in rec.instances.values():
                    if self.balancer is not None:
                        try:
                            self.balancer.deregister(iid)
                        except KeyError:
                            pass
                    fab.terminate_instance(iid)
                for nid in fresh_nodes:
                    fab.terminate_node(nid)
                log.emit("deployer", "record_failed", application=plan.application, reason=why)
            if on_done is not None:
                on_done(rec)

        def watchdog(delay: float, what: str):
            if delay <= 0:
                return
            watchdogs.append(
                fab.clock.schedule(PHASE_TIMEOUT_FACTOR * delay, lambda: finish(False, f"timeout: {what}"))
            )

        def node_failed(node: SimNode):
            if node.state is NodeState.FAILED and node.id in rec.nodes.values():
                finish(False, f"node {node.id} failed")

        fab.watch_nodes(node_failed)

        def instance_running(slot, inst_id):
            if rec.status in (RecordStatus.ACTIVE, RecordStatus.FAILED):
                return
            node = fab.nodes[rec.nodes[slot]]
            if not node.running:
                finish(False, f"node {node.id} lost during deploy")
                return
            fab.instances[inst_id].state = InstanceState.RUNNING
            pending.discard(slot)
            log.emit("deployer", "instance_running", instance=inst_id, node=node.id)
            if not pending:
                finish(True)

        def node_ready(slot, p: Placement, node: SimNode):
            if rec.status in (RecordStatus.ACTIVE, RecordStatus.FAILED):
                return
            waiting_node.discard(slot)
            if not waiting_node:
                rec.advance(RecordStatus.DEPLOYING, fab.now)

            def deploy():
                if rec.status in (RecordStatus.ACTIVE, RecordStatus.FAILED):
                    return
                if not node.running:
                    finish(False, f"node {node.id} lost during stack install")
                    return
                inst = fab.create_instance(
                    node.id, plan.application, p.component,
                    self.service_time(plan.application, p.component), self.overhead,
                )
                rec.instances[slot] = inst.id
                watchdog(self.app_deploy_delay, f"deploy {inst.id}")
                fab.clock.schedule(self.app_deploy_delay, instance_running, slot, inst.id)

            if self.agent_stack_delay > 0:
                watchdog(self.agent_stack_delay, f"stack on {node.id}")
                fab.clock.schedule(self.agent_stack_delay, deploy)
            else:
                deploy()

        rec.advance(RecordStatus.PROVISIONING, fab.now)
        for p in plan.placements:
            slot = (p.component, p.replica)
            node = self._reusable(p, plan.application, claimed)
            if node is not None:
                claimed.add(node.id)
                rec.nodes[slot] = node.id
                log.emit("deployer", "node_reused", node=node.id, component=p.component, replica=p.replica)
                fab.clock.schedule(0.0, node_ready, slot, p, node)
                continue
            provider = fab.providers[p.provider_id]
            try:
                node = fab.provision_node(
                    provider, p.vm_type,
                    on_ready=lambda n, slot=slot, p=p: node_ready(slot, p, n),
                )
            except Exception as e:  # catalog mismatch and the like
                fab.clock.schedule(0.0, finish, False, str(e))
                break
            claimed.add(node.id)
            fresh_nodes.append(node.id)
            rec.nodes[slot] = node.id
            watchdog(provider.provision_delay, f"provision {node.id}")
        return rec
