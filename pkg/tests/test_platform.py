import pytest

from mcpaas.balancer import Status
from mcpaas.controller import (
    AppSettings,
    DecisionRejected,
    InstanceFailure,
    IntakePaused,
    StoreUnavailable,
)
from mcpaas.fabric import NodeState, SECOND
from mcpaas.manifest import ScaleAction, parse_manifest
from mcpaas.workload import ScaleDecision

from conftest import LISTING1, build_platform, scenario_registry

CATALOG = '<composite name="shop"><component name="web"><property name="replication">2</property></component></composite>'


def deployed(manifest_text=LISTING1, masters=("fr-paris", "de-frankfurt"), **cfg):
    p = build_platform(scenario_registry(), list(masters), **cfg)
    m = parse_manifest(manifest_text)
    p.register_application(m, AppSettings(service_time=10.0, elastic=False))
    p.start()
    p.balancer.start_probing()
    rec = p.deploy(m.name)
    p.fabric.clock.run(until=60 * SECOND)
    assert rec.status.value == "active"
    return p, m.name


def out(subject):
    return ScaleDecision(subject, ScaleAction.SCALE_OUT, "test", "t", 0.0)


def scale_in(subject):
    return ScaleDecision(subject, ScaleAction.SCALE_IN, "test", "t", 0.0)


def test_bootstrap_roles_and_leader_record():
    p = build_platform(scenario_registry(), ["fr-paris", "de-frankfurt"])
    assert p.leader_id == "n1-fr-paris" and p.followers == ["n2-de-frankfurt"]
    assert p.state.leaders() == ["n1-fr-paris"]
    assert p.checkpoints.sequences() == [1]
    assert p.store.get("leader.json") is not None


def test_scale_out_adds_one_distinct_replica():
    p, app = deployed()
    key = f"{app}/computing"
    before = p.replicas(key)
    version = p.balancer.table.version
    seq = p.checkpoints.next_seq()
    p.act_on_decision(out(key))
    assert p.checkpoints.sequences()[-1] == seq  # checkpoint taken before the action
    with pytest.raises(DecisionRejected, match="in flight"):
        p.act_on_decision(out(key))
    p.fabric.clock.run(until=p.fabric.now + 70 * SECOND)
    after = p.replicas(key)
    assert len(after) == len(before) + 1 and p.balancer.table.version > version
    providers = [p.balancer.table.find(i).provider_id for i in after]
    assert len(set(providers)) == 2
    assert all(p.fabric.providers[x].vm_catalog for x in providers)
    assert p.scale_actions[-1]["action"] == "scale-out"


def test_scale_in_floor_and_cooldown():
    p, app = deployed(CATALOG)
    key = f"{app}/web"
    with pytest.raises(DecisionRejected, match="floor"):
        p.act_on_decision(scale_in(key))
    p.act_on_decision(out(key))
    p.fabric.clock.run(until=p.fabric.now + 70 * SECOND)
    assert len(p.replicas(key)) == 3
    with pytest.raises(DecisionRejected, match="cooldown"):
        p.act_on_decision(scale_in(key))
    p.fabric.clock.run(until=p.fabric.now + 60 * SECOND)
    newest = p.replicas(key)[-1]
    p.act_on_decision(scale_in(key))
    assert newest not in p.replicas(key) and len(p.replicas(key)) == 2
    assert p.fabric.instances[newest].state.value == "terminated"


def test_decisions_for_dead_applications_rejected():
    p = build_platform(scenario_registry(), ["fr-paris"])
    p.register_application(parse_manifest(CATALOG))
    with pytest.raises(DecisionRejected, match="not live"):
        p.act_on_decision(out("shop/web"))
    assert not p._decide(out("shop/web"))
    assert p.log.select("decision_rejected")


def test_instance_failure_replaced_while_survivor_serves():
    p, app = deployed(CATALOG)
    key = f"{app}/web"
    victim, survivor = p.replicas(key)
    t0 = p.fabric.now
    p.fabric.inject_failure(p.fabric.instances[victim].node_id)
    p.fabric.clock.run(until=t0 + 400)
    assert p.log.select("replacement_started")
    served = [p.balancer.dispatch(app, at=p.fabric.now) for _ in range(4)]
    assert all(o.status is Status.OK and o.instance_id == survivor for o in served)
    p.fabric.clock.run(until=t0 + 70 * SECOND)
    live = p.replicas(key)
    assert victim not in live and survivor in live and len(live) == 2
    assert p.log.select("instance_replaced")


def test_checkpoint_waits_for_in_flight_transactions():
    p = build_platform(scenario_registry(), ["fr-paris", "de-frankfurt"])
    tx = p.tm.begin()
    p.tm.write(tx, "deployments/x", {"status": "draft"})
    done = []
    assert p.checkpoint_now(done.append) is None
    with pytest.raises(IntakePaused):
        p.tm.begin()
    p.tm.commit(tx)
    assert done and done[0].state["deployments/x"] == {"status": "draft"}
    p.tm.begin()  # intake resumed


def test_checkpoint_skipped_when_store_down():
    p = build_platform(scenario_registry(), ["fr-paris"])
    p.store.available = False
    assert p.checkpoint_now() is None
    assert p.log.select("checkpoint_skipped")
    assert not p.tm.paused


def test_rollback_roundtrip():
    p = build_platform(scenario_registry(), ["fr-paris", "de-frankfurt"])
    cp = p.checkpoint_now()
    before = p.state.to_dict()
    assert p.rollback(cp).to_dict() == before
    for i in range(3):
        p._commit(lambda tx, i=i: p.tm.write(tx, f"deployments/a{i}", {"i": i}))
    assert p.rollback(cp).to_dict() == before


def test_one_leader_in_every_committed_state():
    p, app = deployed()
    seen = []
    orig = p.tm.commit

    def commit(tx):
        r = orig(tx)
        seen.append(p.state.leaders())
        return r

    p.tm.commit = commit
    p.fabric.inject_failure(p.leader_id)
    p.fabric.clock.run(until=p.fabric.now + 240 * SECOND)
    assert seen and all(len(ls) == 1 for ls in seen)
    assert p.state.leaders() == [p.leader_id] and p.term == 2


def test_kill_leader_without_followers():
    p = build_platform(scenario_registry(), ["fr-paris"])
    p.start()
    p.fabric.inject_failure(p.leader_id, at=1000.0)
    p.fabric.clock.run(until=10 * SECOND)
    ev = p.log.select("system_unavailable")
    assert len(ev) == 1 and ev[0]["time"] - 1000.0 <= p.config.detection_budget
    assert p.recoveries == [] and not p.online()


def test_follower_failure_no_election():
    p = build_platform(scenario_registry(), ["fr-paris", "de-frankfurt"])
    p.start()
    leader = p.leader_id
    p.fabric.inject_failure(p.followers[0], at=5000.0)
    p.fabric.clock.run(until=200 * SECOND)
    (rep,) = p.recoveries
    assert rep.kind == "follower" and p.leader_id == leader and p.term == 1
    # three missed 100 ms heartbeats, then the 900 ms start delay
    assert 200.0 <= rep.detection_ms <= 300.0
    assert rep.elect_start_ms == pytest.approx(rep.detection_ms + 900.0)
    assert rep.elect_start_ms <= 1200.0
    assert len(p.followers) == 1 and rep.new_follower_provider not in ("fr-paris", "de-frankfurt")
    assert rep.completed_at is not None


def test_recovery_blocked_while_store_down():
    p = build_platform(scenario_registry(), ["fr-paris", "de-frankfurt"])
    p.start()
    p.fabric.inject_failure(p.leader_id, at=1000.0)
    p.fabric.clock.run(until=1150.0)
    p.store.available = False
    p.fabric.clock.run(until=5000.0)
    assert p.log.select("recovery_blocked")
    assert p.term == 1
    p.store.available = True
    p.fabric.clock.run(until=8000.0)
    assert p.term == 2 and p.leader_id == "n2-de-frankfurt"


def test_agents_rebind_after_promotion():
    p = build_platform(scenario_registry(), ["fr-paris", "de-frankfurt"])
    a = p.add_agent("no-oslo", "small")
    p.start()
    assert p.bindings[a.id] == "n1-fr-paris"
    p.fabric.inject_failure(p.leader_id, at=1000.0)
    p.fabric.clock.run(until=1000.0 + 11 * SECOND)
    assert p.bindings[a.id] == "n2-de-frankfurt" and p.all_agents_bound()
