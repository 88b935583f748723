"""Master/agent orchestration: heartbeats, fail-over, checkpoints and scale actions.

The platform is the leader's point of view. Followers only watch the
leader and read checkpoints from the shared state store; agents find the
leader by polling ``leader.json``.
"""

import random
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from ..balancer import LoadBalancer
from ..deployer import (
    ConstraintError,
    DeploymentRecord,
    RecordStatus,
    ServiceDeployer,
    choose_placement,
    pick_lowest_price,
    validate_constraints,
)
from ..fabric import DEFAULT_MASTER_STACK_DELAY_MS, SECOND, Fabric, NodeState, SimNode, VmType
from ..manifest import ApplicationManifest, ScaleAction
from ..telemetry import Monitor
from ..workload import DEFAULT_UNDERLOAD_FACTOR, ScaleDecision, WorkloadManager
from .checkpoint import (
    LEADER_KEY,
    Checkpoint,
    CheckpointLog,
    StateStore,
    StoreUnavailable,
    encode_leader,
    read_leader,
)
from .election import NoCandidate, Role, RoleState, elect_leader, election_duration
from .transactions import SystemState, Transaction, TransactionManager


@dataclass
class PlatformConfig:
    masters: List[str] = field(default_factory=list)  # provider ids; the first one leads
    master_vm: str = "medium"
    heartbeat_period: float = 100.0
    heartbeat_misses: int = 3
    election_window: float = 200.0
    checkpoint_period: float = 30 * SECOND
    checkpoint_retain: int = 3
    discovery_period: float = 10 * SECOND
    follower_start_delay: float = 900.0
    master_stack_delay: float = DEFAULT_MASTER_STACK_DELAY_MS
    scale_in_cooldown: float = 60 * SECOND
    store_retry: float = 1 * SECOND

    @property
    def detection_budget(self) -> float:
        return self.heartbeat_period * self.heartbeat_misses


@dataclass(frozen=True)
class InstanceFailure:
    subject: str  # "app/component"
    instance_id: str
    at: float


class DecisionRejected(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class RecoveryReport:
    kind: str  # "leader" | "follower"
    failed_master: str
    failed_at: float
    detected_at: float
    elected: Optional[str] = None
    election_ms: float = 0.0
    promoted_at: Optional[float] = None
    checkpoint_seq: Optional[int] = None
    state_matches_checkpoint: Optional[bool] = None
    new_follower: Optional[str] = None
    new_follower_provider: Optional[str] = None
    follower_started_at: Optional[float] = None
    follower_ready_at: Optional[float] = None
    agents_rebound_at: Optional[float] = None
    completed_at: Optional[float] = None

    @property
    def detection_ms(self) -> float:
        return self.detected_at - self.failed_at

    @property
    def elect_start_ms(self) -> Optional[float]:
        """Failure to the moment the replacement follower is started."""
        return None if self.follower_started_at is None else self.follower_started_at - self.failed_at

    @property
    def redeploy_ms(self) -> Optional[float]:
        if self.follower_ready_at is None or self.follower_started_at is None:
            return None
        return self.follower_ready_at - self.follower_started_at

    @property
    def total_ms(self) -> Optional[float]:
        return None if self.completed_at is None else self.completed_at - self.failed_at

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d.update(
            detection_ms=self.detection_ms,
            elect_start_ms=self.elect_start_ms,
            redeploy_ms=self.redeploy_ms,
            total_ms=self.total_ms,
        )
        return d


@dataclass
class AppSettings:
    service_time: Union[float, Dict[str, float]] = 100.0
    elastic: bool = True
    overload_factor: float = 1.0
    underload_factor: float = DEFAULT_UNDERLOAD_FACTOR

    def service_time_of(self, component: str) -> float:
        if isinstance(self.service_time, dict):
            return float(self.service_time[component])
        return float(self.service_time)


@dataclass
class _App:
    manifest: ApplicationManifest
    settings: AppSettings
    candidates: Dict[str, list]
    record: Optional[DeploymentRecord] = None


class Platform:
    """The control plane: one leader, N followers, and the agents they drive."""

    def __init__(
        self,
        fabric: Fabric,
        balancer: LoadBalancer,
        deployer: ServiceDeployer,
        monitor: Monitor,
        workload: WorkloadManager,
        store: StateStore,
        config: Optional[PlatformConfig] = None,
    ):
        self.fabric = fabric
        self.balancer = balancer
        self.deployer = deployer
        self.monitor = monitor
        self.workload = workload
        self.store = store
        self.config = config or PlatformConfig()
        self.tm = TransactionManager()
        self.checkpoints = CheckpointLog(store, self.config.checkpoint_retain)
        self.rng: random.Random = fabric.clock.rng
        self.leader_id: Optional[str] = None
        self.followers: List[str] = []
        self.roles: Dict[str, RoleState] = {}
        self.term = 0
        self.bindings: Dict[str, Optional[str]] = {}
        self.apps: Dict[str, _App] = {}
        self.recoveries: List[RecoveryReport] = []
        self.scale_actions: List[Dict[str, Any]] = []
        self._target_followers = 0
        self._leader_misses: Dict[str, int] = {}
        self._follower_misses: Dict[str, int] = {}
        self._electing = False
        self._open: List[RecoveryReport] = []
        self._down_since: Dict[str, float] = {}
        self._unavailable = False
        self._scale_busy: set = set()
        self._last_scale: Dict[str, float] = {}
        self._replacing: set = set()
        self._deferred: List[InstanceFailure] = []
        self._running = False

        workload.decide = self._decide
        workload.online = self.online
        monitor.sink_node = self._sink_for
        monitor.sink = workload.ingest
        balancer.on_arrival(workload.on_arrival)
        balancer.on_health_change(self._on_health)
        deployer.on_instance_live.append(monitor.watch)
        fabric.watch_nodes(self._on_node)

    # -- status ----------------------------------------------------------

    @property
    def log(self):
        return self.fabric.log

    @property
    def state(self) -> SystemState:
        return self.tm.state

    def online(self) -> bool:
        return self.leader_id is not None and self.fabric.nodes[self.leader_id].running

    def masters(self) -> List[str]:
        return ([self.leader_id] if self.leader_id else []) + list(self.followers)

    def agents(self) -> List[str]:
        return sorted(n.id for n in self.fabric.nodes.values() if n.role == "agent" and n.running)

    def all_agents_bound(self) -> bool:
        return all(self.bindings.get(a) == self.leader_id for a in self.agents())

    def _sink_for(self, agent: str) -> Optional[str]:
        m = self.bindings.get(agent)
        return m if m is not None and m == self.leader_id else None

    # -- transactions ------------------------------------------------------

    def _commit(self, body: Callable[[Transaction], Any]) -> Transaction:
        holder: List[Transaction] = []

        def wrapped(tx):
            holder.append(tx)
            body(tx)

        self.tm.run(wrapped)
        return holder[-1]

    def _role_tx(self, tx: Transaction, master: str, role: Role):
        rs = self.roles[master]
        self.tm.write(tx, f"roles/{master}", {
            "role": role.value,
            "last_heartbeat": rs.last_heartbeat,
            "reachable_latency": rs.reachable_latency,
        })

    def _resource_entry(self, node: SimNode) -> Dict[str, Any]:
        return {
            "provider": node.provider.id,
            "vm_type": node.vm_type.label,
            "state": node.state.value,
            "role": node.role,
            "instances": len(node.hosted_instances),
        }

    def reconcile_resources(self) -> Transaction:
        """Bring the resource table in line with the live fabric nodes."""
        live = {n.id: n for n in self.fabric.nodes.values() if n.state in (NodeState.RUNNING, NodeState.PROVISIONING)}

        def body(tx):
            for nid in sorted(self.tm.state.resources):
                if nid not in live:
                    self.tm.delete(tx, f"resources/{nid}")
            for nid in sorted(live):
                self.tm.write(tx, f"resources/{nid}", self._resource_entry(live[nid]))

        return self._commit(body)

    # -- bootstrap -------------------------------------------------------

    def bootstrap(self):
        """Bring the masters up at t=0: the first one leads."""
        cfg = self.config
        if not cfg.masters:
            raise ValueError("at least one master provider is required")
        vm = VmType.parse(cfg.master_vm)
        ids = []
        for pid in cfg.masters:
            node = self.fabric.provision_node(pid, vm, role="master", delay=0)
            self.roles[node.id] = RoleState(node.id, Role.FOLLOWER, self.fabric.now, node.reachable_latency)
            ids.append(node.id)
        self.leader_id = ids[0]
        self.roles[ids[0]].role = Role.LEADER
        self.followers = ids[1:]
        self._target_followers = len(self.followers)
        self.term = 1
        self.store.put(LEADER_KEY, encode_leader(self.leader_id, self.term, self.fabric.now))

        def body(tx):
            for m in ids:
                self._role_tx(tx, m, self.roles[m].role)

        self._commit(body)
        self.reconcile_resources()
        self.log.emit("controller", "bootstrap", leader=self.leader_id, followers=list(self.followers), term=self.term)
        for a in self.agents():
            self._bind(a)
        self.checkpoint_now()

    def start(self):
        if self._running:
            return
        self._running = True
        clock = self.fabric.clock
        clock.every(self.config.heartbeat_period, self._heartbeat)
        clock.every(self.config.checkpoint_period, self._periodic_checkpoint)
        clock.every(self.config.discovery_period, self._discover)

    def stop(self):
        self._running = False

    def add_agent(self, provider: str, vm: Union[str, VmType]) -> SimNode:
        """Pre-allocate an agent node, ready immediately."""
        return self.fabric.provision_node(provider, vm, role="agent", delay=0)

    # -- node and agent bookkeeping -------------------------------------

    def _on_node(self, node: SimNode):
        if node.state is NodeState.FAILED:
            self._down_since.setdefault(node.id, self.fabric.now)
        if node.role == "agent" and node.running:
            self._bind(node.id)
        if self.online() and node.id != self.leader_id:
            nid = node.id
            if node.state in (NodeState.RUNNING, NodeState.PROVISIONING):
                self._commit(lambda tx: self.tm.write(tx, f"resources/{nid}", self._resource_entry(node)))
            else:
                self._commit(lambda tx: self.tm.delete(tx, f"resources/{nid}"))

    def _bind(self, agent: str) -> bool:
        try:
            rec = read_leader(self.store)
        except StoreUnavailable:
            return False
        if rec is None:
            return False
        master = rec["master_id"]
        if self.bindings.get(agent) == master:
            return False
        rebound = agent in self.bindings
        self.bindings[agent] = master
        self.log.emit("agent", "agent_rebound" if rebound else "agent_bound", agent=agent, master=master, term=rec["term"])
        return True

    def _discover(self):
        if not self._running:
            return False
        changed = False
        for a in self.agents():
            changed = self._bind(a) or changed
        if changed:
            self._check_recoveries()
        return True

    # -- heartbeats and failure detection --------------------------------

    def _heartbeat(self):
        if not self._running:
            return False
        fab = self.fabric
        now = fab.now
        k = self.config.heartbeat_misses
        leader = self.leader_id
        if leader is None:
            return True
        for f in list(self.followers):
            if not fab.nodes[f].running:
                continue
            lat = fab.ping(f, leader)
            if lat is None:
                self._leader_misses[f] = self._leader_misses.get(f, 0) + 1
            else:
                self._leader_misses[f] = 0
                self.roles[leader].last_heartbeat = now
                self.roles[leader].reachable_latency = lat
        if fab.nodes[leader].running:
            for f in list(self.followers):
                lat = fab.ping(leader, f)
                if lat is None:
                    self._follower_misses[f] = self._follower_misses.get(f, 0) + 1
                    if self._follower_misses[f] >= k:
                        self.handle_follower_failure(f)
                else:
                    self._follower_misses[f] = 0
                    self.roles[f].last_heartbeat = now
                    self.roles[f].reachable_latency = lat
            self._unavailable = False
        elif not self._electing:
            if any(self._leader_misses.get(f, 0) >= k for f in self.followers):
                self.handle_leader_failure()
            elif not any(fab.nodes[f].running for f in self.followers) and not self._unavailable:
                if now - self._down_since.get(leader, now) >= self.config.detection_budget:
                    self._unavailable = True
                    self.log.emit("controller", "system_unavailable", reason="no reachable master candidate")
        return True

    def handle_leader_failure(self, at: Optional[float] = None) -> Optional[RecoveryReport]:
        """Run an election among followers; the winner rolls back and rebuilds."""
        fab = self.fabric
        now = fab.now if at is None else at
        old = self.leader_id
        rep = RecoveryReport("leader", old, self._down_since.get(old, now), now)
        self.log.emit("controller", "leader_unreachable", master=old)
        candidates = []
        for f in sorted(self.followers):
            rs = self.roles[f]
            candidates.append(RoleState(f, Role.FOLLOWER, rs.last_heartbeat, fab.ping(f, f)))
        try:
            winner = elect_leader(candidates)
        except NoCandidate:
            self._unavailable = True
            self.log.emit("controller", "system_unavailable", reason="no reachable master candidate")
            return None
        self._electing = True
        rep.elected = winner
        rep.election_ms = election_duration(candidates, self.config.election_window)
        self._open.append(rep)
        self.recoveries.append(rep)
        fab.clock.schedule(rep.election_ms, self._promote, winner, rep)
        return rep

    def _promote(self, winner: str, rep: RecoveryReport):
        fab = self.fabric
        try:
            current = self.store.get(LEADER_KEY)
            won = self.store.compare_and_set(LEADER_KEY, current, encode_leader(winner, self.term + 1, fab.now))
        except StoreUnavailable:
            self.log.emit("controller", "recovery_blocked", reason="state store unreachable", candidate=winner)
            fab.clock.schedule(self.config.store_retry, self._promote, winner, rep)
            return
        if not won:
            self._electing = False
            return
        old = self.leader_id
        self.term += 1
        self.leader_id = winner
        self.followers.remove(winner)
        self.roles[winner].role = Role.LEADER
        self.roles.pop(old, None)
        self._leader_misses = {}
        self._follower_misses = {}
        self._electing = False
        rep.promoted_at = fab.now

        cp = self.checkpoints.load_latest()
        if cp is not None:
            restored = self.rollback(cp)
            rep.checkpoint_seq = cp.seq
            rep.state_matches_checkpoint = restored.to_dict() == cp.state
        else:
            self.tm.reset(SystemState())

        def body(tx):
            self.tm.delete(tx, f"roles/{old}")
            self._role_tx(tx, winner, Role.LEADER)

        self._commit(body)
        self.log.emit(
            "controller", "leader_elected", leader=winner, previous=old, term=self.term,
            election_ms=rep.election_ms, checkpoint=rep.checkpoint_seq,
        )
        self.reconcile_resources()
        self.workload.restart()
        self._spawn_follower(rep, exclude=[fab.nodes[old].provider.id])
        deferred, self._deferred = self._deferred, []
        for failure in deferred:
            self._decide(failure)

    def handle_follower_failure(self, follower: str) -> RecoveryReport:
        fab = self.fabric
        self.followers.remove(follower)
        self._follower_misses.pop(follower, None)
        self._leader_misses.pop(follower, None)
        self.roles.pop(follower, None)
        self._commit(lambda tx: self.tm.delete(tx, f"roles/{follower}"))
        rep = RecoveryReport("follower", follower, self._down_since.get(follower, fab.now), fab.now)
        self.recoveries.append(rep)
        self._open.append(rep)
        self.log.emit("controller", "follower_unreachable", master=follower)
        self._spawn_follower(rep, exclude=[fab.nodes[follower].provider.id])
        return rep

    def _spawn_follower(self, rep: RecoveryReport, exclude: Sequence[str] = ()):
        """Start a replacement follower on a provider other than the leader's."""
        fab = self.fabric
        vm = VmType.parse(self.config.master_vm)
        leader_provider = fab.nodes[self.leader_id].provider.id
        if len(self.followers) >= self._target_followers:
            self._check_recoveries()
            return
        pool = [p for p in fab.providers.values() if vm in p.vm_catalog and p.id != leader_provider]
        if not pool:
            self.log.emit("controller", "follower_unplaceable", reason="no provider distinct from the leader")
            return
        preferred = [p for p in pool if p.id not in exclude] or pool
        provider, _ = pick_lowest_price(preferred, vm, self.rng)

        def start():
            rep.follower_started_at = fab.now
            node = fab.provision_node(provider, vm, role="master", on_ready=lambda n: fab.clock.schedule(
                self.config.master_stack_delay, self._follower_ready, n, rep))
            rep.new_follower = node.id
            rep.new_follower_provider = provider.id
            self.log.emit("controller", "follower_starting", node=node.id, provider=provider.id)

        fab.clock.schedule(self.config.follower_start_delay, start)

    def _follower_ready(self, node: SimNode, rep: RecoveryReport):
        if not node.running or self.leader_id is None:
            return
        self.roles[node.id] = RoleState(node.id, Role.FOLLOWER, self.fabric.now, node.reachable_latency)
        self.followers.append(node.id)
        self._commit(lambda tx: self._role_tx(tx, node.id, Role.FOLLOWER))
        rep.follower_ready_at = self.fabric.now
        self.log.emit("controller", "follower_ready", node=node.id, provider=node.provider.id)
        self._check_recoveries()

    def _check_recoveries(self):
        if not self._open or not self.online():
            return
        if len(self.followers) < self._target_followers:
            return
        bound = self.all_agents_bound()
        for rep in list(self._open):
            if rep.kind == "leader" and not bound:
                continue
            if rep.kind == "leader":
                rep.agents_rebound_at = max(
                    (e["time"] for e in self.log.select("agent_rebound") if e["time"] >= rep.promoted_at),
                    default=rep.promoted_at,
                )
            rep.completed_at = self.fabric.now
            self._open.remove(rep)
            self.log.emit("controller", "recovery_complete", kind=rep.kind, total_ms=rep.total_ms)

    # -- checkpoints -----------------------------------------------------

    def checkpoint_now(self, on_done: Optional[Callable[[Optional[Checkpoint]], None]] = None) -> Optional[Checkpoint]:
        """Coordinated snapshot: pause intake, drain, save, resume.

        Returns the checkpoint when nothing was in flight; otherwise it is
        handed to ``on_done`` once the last transaction finishes.
        """
        if not self.online():
            raise RuntimeError("only the leader takes checkpoints")
        result: List[Optional[Checkpoint]] = []
        self.tm.pause_intake()

        def snap():
            cp = None
            try:
                cp = self.checkpoints.save(self.fabric.now, self.tm.state.to_dict())
                self.log.emit("controller", "checkpoint", seq=cp.seq, digest=cp.digest)
            except StoreUnavailable:
                self.log.emit("controller", "checkpoint_skipped", reason="state store unreachable")
            finally:
                self.tm.resume_intake()
            result.append(cp)
            if on_done is not None:
                on_done(cp)

        self.tm.when_drained(snap)
        return result[0] if result else None

    def rollback(self, cp: Checkpoint) -> SystemState:
        self.tm.reset(SystemState(cp.state))
        self.log.emit("controller", "rollback", seq=cp.seq)
        return self.tm.state

    def _periodic_checkpoint(self):
        if not self._running:
            return False
        if self.online():
            self.checkpoint_now()
        return True

    # -- applications ----------------------------------------------------

    def register_application(self, manifest: ApplicationManifest, settings: Optional[AppSettings] = None):
        settings = settings or AppSettings()
        cands = validate_constraints(manifest, list(self.fabric.providers.values()))
        self.apps[manifest.name] = _App(manifest, settings, cands)
        for comp in manifest.components:
            key = f"{manifest.name}/{comp.name}"
            self.balancer.table.ensure(key)
            self.workload.track(
                key, comp.elasticity, settings.service_time_of(comp.name),
                lambda key=key: len(self.balancer.table.healthy(key)),
                settings.overload_factor, settings.underload_factor, settings.elastic,
            )
        self.balancer.aliases[manifest.name] = f"{manifest.name}/{manifest.entry.name}"
        return cands

    def deploy(self, name: str, on_done: Optional[Callable[[DeploymentRecord], None]] = None) -> DeploymentRecord:
        app = self.apps[name]
        if not self.online():
            raise DecisionRejected("no leader")
        plan = choose_placement(app.manifest, app.candidates, self.rng)
        self.deployer.service_time = lambda a, c: self.apps[a].settings.service_time_of(c)
        self._commit(lambda tx: self.tm.write(tx, f"deployments/{name}", {"status": "deploying", "components": {}}))

        def done(rec: DeploymentRecord):
            if rec.status is RecordStatus.ACTIVE:
                self._record_instances(name, "active")
            else:
                self._commit(lambda tx: self.tm.write(
                    tx, f"deployments/{name}", {"status": "failed", "components": {}, "error": rec.error}))
            if on_done is not None:
                on_done(rec)

        app.record = self.deployer.execute_plan(plan, done)
        return app.record

    def _record_instances(self, name: str, status: str) -> Transaction:
        app = self.apps[name]
        comps = {}
        for comp in app.manifest.components:
            key = f"{name}/{comp.name}"
            comps[comp.name] = [e.instance_id for e in self.balancer.table.entries.get(key, [])]

        def body(tx):
            self.tm.write(tx, f"deployments/{name}", {"status": status, "components": comps})
            self.tm.write(tx, "routing/version", self.balancer.table.version)

        return self._commit(body)

    def replicas(self, key: str) -> List[str]:
        return [e.instance_id for e in self.balancer.table.entries.get(key, [])]

    # -- decisions -------------------------------------------------------

    def _decide(self, decision: Union[ScaleDecision, InstanceFailure]) -> bool:
        try:
            self.act_on_decision(decision)
        except DecisionRejected as e:
            self.log.emit("controller", "decision_rejected", subject=decision.subject, reason=e.reason)
            return False
        return True

    def _on_health(self, key: str, instance_id: str, healthy: bool):
        if healthy:
            return
        failure = InstanceFailure(key, instance_id, self.fabric.now)
        if not self.online():
            self._deferred.append(failure)
            return
        self._decide(failure)

    def _split(self, subject: str) -> Tuple[_App, str]:
        app_name, _, comp = subject.partition("/")
        app = self.apps.get(app_name)
        if app is None or app.record is None or app.record.status is not RecordStatus.ACTIVE:
            raise DecisionRejected(f"application {app_name} is not live")
        if not comp:
            comp = app.manifest.entry.name
        return app, comp

    def act_on_decision(self, decision: Union[ScaleDecision, InstanceFailure]) -> List[Transaction]:
        if not self.online():
            raise DecisionRejected("no leader")
        if isinstance(decision, InstanceFailure):
            return self._replace_instance(decision)
        if decision.action is ScaleAction.SCALE_OUT:
            return self._scale_out(decision)
        return self._scale_in(decision)

    def _one_more(self, app: _App, comp: str, existing: List[str]):
        try:
            return choose_placement(app.manifest, app.candidates, self.rng, replicas={comp: 1},
                                    existing={comp: existing})
        except (ValueError, ConstraintError) as e:
            raise DecisionRejected(f"no provider satisfies {comp}: {e}") from None

    def _scale_out(self, d: ScaleDecision) -> List[Transaction]:
        app, comp = self._split(d.subject)
        key = f"{app.manifest.name}/{comp}"
        if key in self._scale_busy:
            raise DecisionRejected("scale action in flight")
        existing = [e.provider_id for e in self.balancer.table.entries.get(key, [])]
        plan = self._one_more(app, comp, existing)
        self.checkpoint_now()
        self._scale_busy.add(key)
        started = self.fabric.now
        tx = self._commit(lambda tx: self.tm.write(
            tx, f"deployments/{app.manifest.name}",
            dict(self.tm.read(tx, f"deployments/{app.manifest.name}", {}), status="scaling")))
        self.log.emit("controller", "scale_out_started", subject=key, source=d.source,
                      provider=plan.placements[0].provider_id)

        def done(rec: DeploymentRecord):
            self._scale_busy.discard(key)
            self._last_scale[key] = self.fabric.now
            if rec.status is RecordStatus.ACTIVE:
                self._record_instances(app.manifest.name, "active")
                self.workload.reset_latches(key)
                n = len(self.replicas(key))
                self.scale_actions.append({"time": self.fabric.now, "started": started, "action": "scale-out",
                                           "subject": key, "source": d.source, "instances": n})
                self.log.emit("controller", "scale_out_done", subject=key, instances=n,
                              duration_ms=self.fabric.now - started)
            else:
                self.workload.reset_latches(key)
                self.log.emit("controller", "scale_out_failed", subject=key, reason=rec.error)

        self.deployer.execute_plan(plan, done)
        return [tx]

    def _scale_in(self, d: ScaleDecision) -> List[Transaction]:
        app, comp = self._split(d.subject)
        key = f"{app.manifest.name}/{comp}"
        if key in self._scale_busy:
            raise DecisionRejected("scale action in flight")
        live = self.replicas(key)
        floor = app.manifest.component(comp).replication
        if len(live) <= floor:
            raise DecisionRejected(f"replication floor {floor}")
        last = self._last_scale.get(key)
        if last is not None and self.fabric.now - last < self.config.scale_in_cooldown:
            raise DecisionRejected("cooldown")
        self.checkpoint_now()
        victim = live[-1]
        self.balancer.deregister(victim)
        self.monitor.unwatch(victim)
        self.fabric.terminate_instance(victim)
        self._last_scale[key] = self.fabric.now
        self.workload.reset_latches(key)
        tx = self._record_instances(app.manifest.name, "active")
        n = len(self.replicas(key))
        self.scale_actions.append({"time": self.fabric.now, "started": self.fabric.now, "action": "scale-in",
                                   "subject": key, "source": d.source, "instances": n})
        self.log.emit("controller", "scale_in_done", subject=key, removed=victim, instances=n)
        return [tx]

    def _replace_instance(self, f: InstanceFailure) -> List[Transaction]:
        if f.instance_id in self._replacing:
            raise DecisionRejected("replacement already in progress")
        app, comp = self._split(f.subject)
        key = f"{app.manifest.name}/{comp}"
        existing = [e.provider_id for e in self.balancer.table.entries.get(key, [])]
        plan = self._one_more(app, comp, existing)
        self._replacing.add(f.instance_id)
        tx = self._commit(lambda tx: self.tm.write(
            tx, f"deployments/{app.manifest.name}",
            dict(self.tm.read(tx, f"deployments/{app.manifest.name}", {}), status="repairing")))
        self.log.emit("controller", "replacement_started", subject=key, failed=f.instance_id,
                      provider=plan.placements[0].provider_id)

        def done(rec: DeploymentRecord):
            self._replacing.discard(f.instance_id)
            if rec.status is not RecordStatus.ACTIVE:
                self.log.emit("controller", "replacement_failed", failed=f.instance_id, reason=rec.error)
                return
            try:
                self.balancer.deregister(f.instance_id)
            except KeyError:
                pass
            self.monitor.unwatch(f.instance_id)
            self.fabric.terminate_instance(f.instance_id)
            self._record_instances(app.manifest.name, "active")
            self.log.emit("controller", "instance_replaced", failed=f.instance_id,
                          replacement=sorted(rec.instances.values()))

        self.deployer.execute_plan(plan, done)
        return [tx]
