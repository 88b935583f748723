import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from mcpaas.fabric import Fabric
from mcpaas.manifest import ScaleAction, parse_elasticity_rule
from mcpaas.telemetry import MetricEvent
from mcpaas.workload import (
    ClockRegression,
    DriftAlert,
    DriftDetector,
    DriftIndicator,
    EwmaState,
    Severity,
    WorkloadManager,
    check_elasticity,
    correlate,
    evaluate_indicators,
    ewma_update,
)

from conftest import make_provider

ALPHA = 0.125


def step(f_prev, gap, alpha=ALPHA):
    """One update from an estimate ``f_prev`` and a single gap."""
    s = EwmaState(f_prev=f_prev, last_arrival=0.0, alpha=alpha)
    return ewma_update(s, gap).f_prev


def run_ewma(gaps, alpha=ALPHA):
    s = EwmaState(alpha=alpha)
    t = 0.0
    s = ewma_update(s, t)
    out = []
    for g in gaps:
        t += g
        s = ewma_update(s, t)
        out.append(s.f_prev)
    return out


def closed_form(gaps, alpha=ALPHA):
    """f(n) = (1-a)^n g0 + sum_k a (1-a)^(n-k) g_k, with f(0) = g0."""
    out = []
    for n in range(len(gaps)):
        terms = [(1 - alpha) ** n * gaps[0]] + [alpha * (1 - alpha) ** (n - k) * gaps[k] for k in range(1, n + 1)]
        out.append(math.fsum(terms))
    return out


# -- EWMA ------------------------------------------------------------------


def test_ewma_hand_values():
    assert step(1000.0, 1000.0) == 1000.0
    assert step(2000.0, 4000.0) == pytest.approx(0.875 * 2000 + 0.125 * 4000, rel=1e-12)
    assert step(2000.0, 4000.0) == pytest.approx(2250.0, rel=1e-12)
    assert step(0.0, 8000.0) == pytest.approx(1000.0, rel=1e-12)


def test_ewma_initialisation():
    s = EwmaState()
    assert s.alpha == 0.125 and not s.ready
    s = ewma_update(s, 10.0)
    assert not s.ready and s.last_arrival == 10.0
    s = ewma_update(s, 40.0)
    assert s.ready and s.f_prev == 30.0  # first gap seeds the estimate


def test_ewma_regression_and_alpha():
    s = ewma_update(ewma_update(EwmaState(), 10.0), 20.0)
    with pytest.raises(ClockRegression):
        ewma_update(s, 5.0)
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            EwmaState(alpha=bad)


def test_ewma_matches_closed_form_random_sequences():
    rng = random.Random(7)
    for _ in range(1000):
        gaps = [rng.uniform(0.1, 5000.0) for _ in range(rng.randint(1, 60))]
        for got, want in zip(run_ewma(gaps), closed_form(gaps)):
            assert got == pytest.approx(want, rel=1e-9)


def test_ewma_geometric_convergence_random():
    rng = random.Random(11)
    for _ in range(1000):
        f0 = rng.uniform(0.0, 10_000.0)
        g = rng.uniform(0.1, 10_000.0)
        f = f0
        for t in range(1, rng.randint(1, 200)):
            f = step(f, g)
            # brute-force iteration against the bound
            brute = f0
            for _ in range(t):
                brute = (1 - ALPHA) * brute + ALPHA * g
            assert f == pytest.approx(brute, rel=1e-9)
            assert abs(f - g) <= (1 - ALPHA) ** t * abs(f0 - g) * (1 + 1e-9) + 1e-9


@settings(max_examples=200)
@given(st.lists(st.floats(0.001, 1e6), min_size=1, max_size=80), st.floats(0.01, 0.99))
def test_ewma_bounds(gaps, alpha):
    est = run_ewma(gaps, alpha)
    lo, hi = min(gaps), max(gaps)
    for f in est:
        assert lo * (1 - 1e-12) <= f <= hi * (1 + 1e-12)


# -- correlation -------------------------------------------------------------

_events = st.builds(
    MetricEvent,
    instance_id=st.sampled_from(["i1", "i2"]),
    application=st.just("app"),
    timestamp=st.integers(0, 5).map(float),
    response_time=st.floats(0, 100),
    request_count=st.integers(0, 5),
    cpu_load=st.floats(0, 1),
)
_alerts = st.builds(DriftAlert, st.sampled_from(["d1", "d2"]), st.just("app"), st.floats(0, 10),
                    st.just((1, 0.0, 0.0)), st.integers(0, 3))


@settings(max_examples=200)
@given(st.lists(st.one_of(_events, _alerts), max_size=30))
def test_correlate_idempotent(batch):
    once = correlate(batch)
    assert correlate(once) == once
    keys = [(type(x).__name__, getattr(x, "instance_id", None), getattr(x, "timestamp", None),
             getattr(x, "indicator_id", None), getattr(x, "episode", None)) for x in once]
    assert len(set(keys)) == len(keys)


def test_correlate_examples():
    batch = [MetricEvent("i1", "app", float(t), 10.0, 1, 0.1) for t in (1, 2, 3)]
    assert correlate(batch + list(batch)) == batch
    alerts = [DriftAlert("cpu", "app", t, (1, 0.95, 0.95), episode=1) for t in (10.0, 11.0, 12.0)]
    assert correlate(alerts) == alerts[:1]
    a = MetricEvent("i1", "app", 1.0, 10.0, 1, 0.1)
    b = MetricEvent("i1", "app", 2.0, 10.0, 1, 0.1)
    assert correlate([a, b]) == [a, b]
    seen = set()
    assert correlate([a], seen) == [a] and correlate([a], seen) == []


# -- drift indicators --------------------------------------------------------

CPU90 = DriftIndicator("cpu90", "app", "CpuLoad", ">", 0.9, 120_000.0, Severity.OVERLOAD)


def cpu_series(values_by_second):
    return [MetricEvent("i1", "app", t * 1000.0, 10.0, 1, v) for t, v in values_by_second]


def test_indicator_fires_after_sustain():
    window = cpu_series([(t, 0.95) for t in range(0, 121)])
    alerts = evaluate_indicators(window, [CPU90], 120_000.0)
    assert len(alerts) == 1
    assert alerts[0].evidence[0] == 121 and alerts[0].evidence[1] == pytest.approx(0.95)


def test_indicator_not_sustained():
    window = cpu_series([(t, 0.95) for t in range(0, 61)] + [(t, 0.5) for t in range(61, 121)])
    assert evaluate_indicators(window, [CPU90], 120_000.0) == []
    assert evaluate_indicators([], [CPU90], 120_000.0) == []
    with pytest.raises(ValueError):
        DriftIndicator("x", "app", "CpuLoad", ">", 0.9, 0.0)


def brute_force_alerts(window, ind, now):
    """Independent oracle: test every point where the step function may change."""
    start = now - ind.sustain
    stamps = sorted({e.timestamp for e in window if e.subject == ind.subject or e.application == ind.subject})
    if not stamps or stamps[0] > start:
        return False

    def value_at(t):
        latest = max(s for s in stamps if s <= t)
        vals = [e.value(ind.metric) for e in window if e.timestamp == latest]
        return sum(vals) / len(vals)

    probes = [start] + [s for s in stamps if start < s <= now]
    return all(ind.holds(value_at(p)) for p in probes)


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 60), st.sampled_from(["i1", "i2"]), st.sampled_from([0.2, 0.5, 0.91, 0.95, 1.0])),
             max_size=100, unique_by=lambda x: (x[0], x[1])),
    st.integers(1, 30), st.integers(0, 70), st.sampled_from([">", ">=", "<", "<="]),
)
def test_indicator_oracle_equivalence(points, sustain_s, now_s, cmp):
    window = sorted((MetricEvent(i, "app", t * 1000.0, 1.0, 0, v) for t, i, v in points), key=lambda e: e.timestamp)
    ind = DriftIndicator("d", "app", "CpuLoad", cmp, 0.9, sustain_s * 1000.0)
    got = evaluate_indicators(window, [ind], now_s * 1000.0)
    assert bool(got) == brute_force_alerts(window, ind, now_s * 1000.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10))
def test_alert_latching(k, sustain_s):
    det = DriftDetector([DriftIndicator("d", "app", "CpuLoad", ">", 0.9, sustain_s * 1000.0)])
    window, fired = [], []
    horizon = k * sustain_s + sustain_s
    for t in range(0, horizon + 1):
        window.append(MetricEvent("i1", "app", t * 1000.0, 1.0, 0, 0.95))
        fired += det.evaluate(window, t * 1000.0)
    assert len(fired) == 1 and fired[0].episode == 1
    # the condition clears, then holds again: a second episode
    for t in range(horizon + 1, horizon + 3):
        window.append(MetricEvent("i1", "app", t * 1000.0, 1.0, 0, 0.1))
        fired += det.evaluate(window, t * 1000.0)
    for t in range(horizon + 3, horizon + 4 + sustain_s):
        window.append(MetricEvent("i1", "app", t * 1000.0, 1.0, 0, 0.95))
        fired += det.evaluate(window, t * 1000.0)
    assert [a.episode for a in fired] == [1, 2]


# -- elasticity rules --------------------------------------------------------

RULE = parse_elasticity_rule("Scaling out when ResponseTime > 4s")


def rt_window(mean):
    return [MetricEvent("i1", "app", float(t * 1000), mean, 1, 0.5, component="computing") for t in range(1, 11)]


def test_check_elasticity():
    d = check_elasticity(RULE, rt_window(4500.0), 10_000.0, "app/computing")
    assert d is not None and d.action is ScaleAction.SCALE_OUT and d.subject == "app/computing"
    assert d.evidence == (10, 4500.0)
    assert check_elasticity(RULE, rt_window(3900.0), 10_000.0) is None
    assert check_elasticity(RULE, rt_window(4000.0), 10_000.0) is None  # strict ">"
    assert check_elasticity(RULE, [], 10_000.0) is None


# -- workload manager loop ---------------------------------------------------


def make_wm(decide, service_time=10.0, instances=1, **kw):
    fab = Fabric([make_provider("a")])
    decisions = []

    def record(d):
        decisions.append(d)
        return decide(d)

    wm = WorkloadManager(fab, record, **kw)
    n = {"v": instances}
    wm.track("app/web", None, service_time, lambda: n["v"])
    wm.start()
    return fab, wm, decisions, n


def feed(fab, wm, start, end, gap):
    t = start
    while t < end:
        fab.clock.schedule_at(t, wm.on_arrival, "app/web", t)
        t += gap


def test_no_decision_before_two_arrivals():
    fab, wm, decisions, _ = make_wm(lambda d: True)
    fab.clock.schedule_at(0.0, wm.on_arrival, "app/web", 0.0)
    fab.clock.run(until=10_000)
    assert decisions == []


def test_single_decision_per_sustained_overload():
    fab, wm, decisions, _ = make_wm(lambda d: True)
    feed(fab, wm, 0.0, 5000.0, 2.0)  # 500/s against a capacity of 100/s
    fab.clock.run(until=5000.0)
    outs = [d for d in decisions if d.action is ScaleAction.SCALE_OUT]
    assert len(outs) == 1 and outs[0].source == "ewma"
    # latched while the decision is pending, even though overload persists
    assert wm.tracked["app/web"].pending


def test_overload_needs_sustain():
    fab, wm, decisions, _ = make_wm(lambda d: True)
    feed(fab, wm, 0.0, 250.0, 2.0)  # a burst shorter than the 300 ms sustain
    feed(fab, wm, 250.0, 3000.0, 50.0)
    fab.clock.run(until=3000.0)
    assert [d for d in decisions if d.action is ScaleAction.SCALE_OUT] == []


def test_new_episode_after_capacity_change():
    fab, wm, decisions, n = make_wm(lambda d: True)
    feed(fab, wm, 0.0, 2000.0, 2.0)
    fab.clock.run(until=2000.0)
    assert len(decisions) == 1
    n["v"] = 2
    wm.reset_latches("app/web")  # controller reports the scale-out
    feed(fab, wm, 2000.0, 4000.0, 2.0)  # still above two instances' capacity
    fab.clock.run(until=4000.0)
    outs = [d for d in decisions if d.action is ScaleAction.SCALE_OUT]
    assert len(outs) == 2


def test_rejected_underload_retries_after_five_seconds():
    fab, wm, decisions, _ = make_wm(lambda d: False, service_time=10.0)
    feed(fab, wm, 0.0, 1.0, 0.5)  # two arrivals, then silence counts as a long gap
    fab.clock.run(until=12_000)
    ins = [d for d in decisions if d.action is ScaleAction.SCALE_IN]
    times = [d.at for d in ins]
    assert len(ins) >= 2
    assert all(b - a >= 5000.0 for a, b in zip(times, times[1:]))


def test_accepted_underload_latches():
    fab, wm, decisions, _ = make_wm(lambda d: True, service_time=10.0)
    feed(fab, wm, 0.0, 1.0, 0.5)
    fab.clock.run(until=12_000)
    assert len([d for d in decisions if d.action is ScaleAction.SCALE_IN]) == 1


def test_offline_manager_ignores_input():
    fab, wm, decisions, _ = make_wm(lambda d: True)
    wm.online = lambda: False
    feed(fab, wm, 0.0, 2000.0, 2.0)
    fab.clock.run(until=2000.0)
    assert decisions == [] and not wm.tracked["app/web"].ewma.ready


def test_rule_trigger_from_metrics():
    fab = Fabric([make_provider("a")])
    decisions = []
    wm = WorkloadManager(fab, lambda d: decisions.append(d) or True)
    wm.track("app/computing", RULE, 100.0, lambda: 1)
    fab.clock.run(until=10_000)
    wm.ingest(rt_window(4500.0))
    wm.ingest([MetricEvent("i1", "app", 10_000.0, 4500.0, 1, 0.5, component="computing")])  # duplicate
    assert len(decisions) == 1 and decisions[0].source == "rule"


def test_indicator_alerts_become_decisions():
    fab = Fabric([make_provider("a")])
    decisions = []
    ind = DriftIndicator("cpu", "app/web", "CpuLoad", ">", 0.9, 3000.0, Severity.OVERLOAD)
    wm = WorkloadManager(fab, lambda d: decisions.append(d) or True, indicators=[ind])
    fab.clock.run(until=5000)
    wm.ingest([MetricEvent("i1", "app", float(t * 1000), 1.0, 1, 0.95, component="web") for t in range(0, 6)])
    assert len(wm.alerts) == 1
    assert decisions[0].action is ScaleAction.SCALE_OUT and decisions[0].source == "indicator"
