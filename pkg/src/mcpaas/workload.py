"""Workload manager: correlation, drift indicators, EWMA overload detection."""

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Deque, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .fabric import SECOND, Fabric
from .manifest import ElasticityRule, ScaleAction, compare
from .telemetry import MetricEvent

DEFAULT_ALPHA = 0.125
DEFAULT_SUSTAIN_MS = 300.0
DEFAULT_CHECK_PERIOD_MS = 100.0
DEFAULT_UNDERLOAD_FACTOR = 10.0
RETENTION_MS = 5 * 60 * SECOND


class ClockRegression(ValueError):
    pass


@dataclass(frozen=True)
class EwmaState:
    """Smoothed request inter-arrival time.

    ``f_prev`` stays None until two arrivals have been seen; the first gap
    then seeds the estimate.
    """

    f_prev: Optional[float] = None
    last_arrival: Optional[float] = None
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")

    @property
    def ready(self) -> bool:
        return self.f_prev is not None


def ewma_update(state: EwmaState, arrival: float) -> EwmaState:
    if state.last_arrival is None:
        return replace(state, last_arrival=arrival)
    if arrival < state.last_arrival:
        raise ClockRegression(f"arrival {arrival} precedes {state.last_arrival}")
    gap = arrival - state.last_arrival
    if state.f_prev is None:
        f = gap
    else:
        f = (1.0 - state.alpha) * state.f_prev + state.alpha * gap
    return replace(state, f_prev=f, last_arrival=arrival)


class Severity(str, Enum):
    INFO = "info"
    OVERLOAD = "overload"
    UNDERLOAD = "underload"


@dataclass(frozen=True)
class DriftIndicator:
    id: str
    subject: str
    metric: str
    comparator: str
    threshold: float
    sustain: float
    severity: Severity = Severity.INFO

    def __post_init__(self):
        if self.sustain <= 0:
            raise ValueError("sustain duration must be positive")

    def holds(self, value: float) -> bool:
        return compare(value, self.comparator, self.threshold)


@dataclass(frozen=True)
class DriftAlert:
    indicator_id: str
    subject: str
    fired_at: float
    evidence: Tuple[int, float, float]  # count, mean, max
    episode: int = 0


@dataclass(frozen=True)
class ScaleDecision:
    subject: str
    action: ScaleAction
    source: str  # "rule" | "ewma" | "indicator"
    rule_id: str
    at: float
    evidence: Tuple = ()


def _key(item) -> tuple:
    if isinstance(item, MetricEvent):
        return ("metric", item.instance_id, item.timestamp)
    if isinstance(item, DriftAlert):
        return ("alert", item.indicator_id, item.subject, item.episode)
    return ("other", repr(item))


def correlate(batch: Iterable[Union[MetricEvent, DriftAlert]], seen: Optional[set] = None) -> list:
    """Drop duplicates, keeping the first occurrence of each event key.

    ``seen`` carries keys across calls for a long-lived consumer.
    """
    seen = set() if seen is None else seen
    out = []
    for item in batch:
        k = _key(item)
        if k in seen:
            continue
        seen.add(k)
        out.append(item)
    return out


def _matches(event: MetricEvent, subject: str) -> bool:
    return event.application == subject or event.subject == subject


def _series(window: Sequence[MetricEvent], subject: str, metric: str) -> List[Tuple[float, float]]:
    """Per-timestamp mean of ``metric`` across the subject's instances."""
    acc: Dict[float, List[float]] = {}
    for ev in window:
        if _matches(ev, subject):
            acc.setdefault(ev.timestamp, []).append(ev.value(metric))
    return [(t, sum(v) / len(v)) for t, v in sorted(acc.items())]


def _held_span(series: List[Tuple[float, float]], start: float, now: float):
    """Points covering [start, now], or None when the series starts too late."""
    first = None
    for i, (t, _) in enumerate(series):
        if t <= start:
            first = i
        else:
            break
    if first is None:
        return None
    return [p for p in series[first:] if p[0] <= now]


def evaluate_indicators(
    window: Sequence[MetricEvent], indicators: Sequence[DriftIndicator], now: float
) -> List[DriftAlert]:
    """Alerts for every indicator whose condition held over [now - sustain, now].

    A sampled metric is read as a step function: its value at time t is the
    latest sample taken at or before t. This function does not latch; see
    :class:`DriftDetector` for one-alert-per-episode behaviour.
    """
    alerts = []
    for ind in indicators:
        series = _series(window, ind.subject, ind.metric)
        span = _held_span(series, now - ind.sustain, now)
        if not span or not all(ind.holds(v) for _, v in span):
            continue
        vals = [v for _, v in span]
        alerts.append(DriftAlert(ind.id, ind.subject, now, (len(vals), sum(vals) / len(vals), max(vals))))
    return alerts


class DriftDetector:
    """Latches alerts: one per indicator per sustained episode."""

    def __init__(self, indicators: Sequence[DriftIndicator]):
        self.indicators = list(indicators)
        self._episode: Dict[str, int] = {}
        self._active: Dict[str, bool] = {}

    def evaluate(self, window: Sequence[MetricEvent], now: float) -> List[DriftAlert]:
        fired = {a.indicator_id: a for a in evaluate_indicators(window, self.indicators, now)}
        out = []
        for ind in self.indicators:
            alert = fired.get(ind.id)
            if alert is None:
                self._active[ind.id] = False
                continue
            if self._active.get(ind.id):
                continue
            self._active[ind.id] = True
            ep = self._episode.get(ind.id, 0) + 1
            self._episode[ind.id] = ep
            out.append(replace(alert, episode=ep))
        return out


def windowed_mean(rule: ElasticityRule, window: Sequence[MetricEvent], now: float, subject: Optional[str] = None):
    evs = [
        e for e in window
        if now - rule.window_ms < e.timestamp <= now and (subject is None or _matches(e, subject))
    ]
    if not evs:
        return None, 0
    if rule.metric == "RequestRate":
        return sum(e.request_count for e in evs) / (rule.window_ms / SECOND), len(evs)
    vals = [e.value(rule.metric) for e in evs]
    return sum(vals) / len(vals), len(vals)


def check_elasticity(
    rule: ElasticityRule, window: Sequence[MetricEvent], now: float, subject: Optional[str] = None
) -> Optional[ScaleDecision]:
    mean, n = windowed_mean(rule, window, now, subject)
    if mean is None or not rule.holds(mean):
        return None
    subj = subject if subject is not None else window[-1].subject
    return ScaleDecision(subj, rule.action, "rule", rule.to_text(), now, (n, mean))


@dataclass
class _Tracked:
    key: str
    rule: Optional[ElasticityRule]
    service_time: float
    instances: Callable[[], int]
    overload_factor: float = 1.0
    underload_factor: float = DEFAULT_UNDERLOAD_FACTOR
    elastic: bool = True
    ewma: EwmaState = field(default_factory=EwmaState)
    over_since: Optional[float] = None
    under_since: Optional[float] = None
    over_latched: bool = False
    clear_since: Optional[float] = None
    pending: bool = False
    under_latched: bool = False
    under_retry_at: float = 0.0
    rule_latched: bool = False
    episodes: int = 0


class WorkloadManager:
    """Consumes metric batches and balancer arrivals; emits scale decisions.

    Two independent triggers exist per tracked component: the component's
    own elasticity rule (windowed mean over monitoring samples) and the
    platform loop comparing the smoothed inter-arrival time with the
    aggregate service capacity. ``decide`` returns True when the controller
    accepted a decision.
    """

    def __init__(
        self,
        fabric: Fabric,
        decide: Callable[[ScaleDecision], bool],
        sustain: float = DEFAULT_SUSTAIN_MS,
        check_period: float = DEFAULT_CHECK_PERIOD_MS,
        indicators: Sequence[DriftIndicator] = (),
    ):
        self.fabric = fabric
        self.decide = decide
        self.sustain = sustain
        self.check_period = check_period
        self.tracked: Dict[str, _Tracked] = {}
        self.window: Dict[str, Deque[MetricEvent]] = {}
        self.detector = DriftDetector(indicators)
        self.alerts: List[DriftAlert] = []
        self._seen: set = set()
        self._running = False
        self.online: Callable[[], bool] = lambda: True

    def track(
        self,
        key: str,
        rule: Optional[ElasticityRule],
        service_time: float,
        instances: Callable[[], int],
        overload_factor: float = 1.0,
        underload_factor: float = DEFAULT_UNDERLOAD_FACTOR,
        elastic: bool = True,
    ):
        self.tracked[key] = _Tracked(
            key, rule, service_time, instances, overload_factor, underload_factor, elastic
        )
        self.window.setdefault(key, deque())

    def start(self):
        if self._running:
            return
        self._running = True
        self.fabric.clock.every(self.check_period, self._check)

    def stop(self):
        self._running = False

    def on_arrival(self, key: str, t: float):
        tr = self.tracked.get(key)
        if tr is None or not self.online():
            return
        tr.ewma = ewma_update(tr.ewma, t)

    def ingest(self, batch: Sequence[MetricEvent]):
        if not self.online():
            return
        fresh = correlate(batch, self._seen)
        now = self.fabric.now
        touched = set()
        for ev in fresh:
            key = ev.subject
            self.window.setdefault(key, deque()).append(ev)
            touched.add(key)
        for key in sorted(touched):
            w = self.window[key]
            while w and w[0].timestamp < now - RETENTION_MS:
                w.popleft()
            self._check_rule(key, now)
        if self.detector.indicators:
            merged = [e for k in sorted(self.window) for e in self.window[k]]
            merged.sort(key=lambda e: e.timestamp)
            for alert in correlate(self.detector.evaluate(merged, now)):
                self.alerts.append(alert)
                self.fabric.log.emit(
                    "workload", "drift_alert", indicator=alert.indicator_id,
                    subject=alert.subject, episode=alert.episode, evidence=list(alert.evidence),
                )
                ind = next(i for i in self.detector.indicators if i.id == alert.indicator_id)
                if ind.severity is Severity.OVERLOAD:
                    self._emit(ScaleDecision(ind.subject, ScaleAction.SCALE_OUT, "indicator", ind.id, now))
                elif ind.severity is Severity.UNDERLOAD:
                    self._emit(ScaleDecision(ind.subject, ScaleAction.SCALE_IN, "indicator", ind.id, now))

    def _emit(self, d: ScaleDecision) -> bool:
        self.fabric.log.emit(
            "workload", "scale_decision", subject=d.subject, action=d.action.value,
            source=d.source, rule=d.rule_id, evidence=list(d.evidence),
        )
        return bool(self.decide(d))

    def _check_rule(self, key: str, now: float):
        tr = self.tracked.get(key)
        if tr is None or tr.rule is None or not tr.elastic:
            return
        d = check_elasticity(tr.rule, list(self.window[key]), now, key)
        if d is None:
            tr.rule_latched = False
            return
        if not tr.rule_latched:
            tr.rule_latched = self._emit(d)

    def capacity_gap(self, key: str) -> float:
        """Inter-arrival time at which arrivals match aggregate service capacity."""
        tr = self.tracked[key]
        return tr.service_time / max(1, tr.instances())

    def _check(self):
        if not self._running:
            return False
        if not self.online():
            return True
        now = self.fabric.now
        for key in sorted(self.tracked):
            tr = self.tracked[key]
            if not tr.elastic or not tr.ewma.ready:
                continue
            # silence counts as a long gap
            est = max(tr.ewma.f_prev, now - tr.ewma.last_arrival)
            gap = self.capacity_gap(key)
            over = est < gap * tr.overload_factor
            under = est > gap * tr.underload_factor
            if over:
                tr.clear_since = None
                tr.over_since = now if tr.over_since is None else tr.over_since
                if not tr.over_latched and now - tr.over_since >= self.sustain:
                    tr.over_latched = True
                    tr.episodes += 1
                    self.fabric.log.emit(
                        "workload", "overload", subject=key, episode=tr.episodes, since=tr.over_since,
                        ewma_ms=round(est, 6), threshold_ms=round(gap * tr.overload_factor, 6),
                    )
                    # held until the controller reports the capacity change
                    tr.pending = self._emit(
                        ScaleDecision(key, ScaleAction.SCALE_OUT, "ewma", "overload", now, (round(est, 6),))
                    )
            else:
                tr.over_since = None
                # the episode ends once the condition has stayed clear for the sustain period
                tr.clear_since = now if tr.clear_since is None else tr.clear_since
                if tr.over_latched and not tr.pending and now - tr.clear_since >= self.sustain:
                    tr.over_latched = False
            if under:
                tr.under_since = now if tr.under_since is None else tr.under_since
                if (
                    not tr.under_latched
                    and now - tr.under_since >= self.sustain
                    and now >= tr.under_retry_at
                ):
                    accepted = self._emit(
                        ScaleDecision(key, ScaleAction.SCALE_IN, "ewma", "underload", now, (round(est, 6),))
                    )
                    if accepted:
                        tr.under_latched = True
                    else:
                        tr.under_retry_at = now + 5 * SECOND
            else:
                tr.under_since = None
                tr.under_latched = False
        return True

    def restart(self):
        """Fresh estimator state, as on a newly promoted leader."""
        for key in self.tracked:
            self.tracked[key].ewma = EwmaState(alpha=self.tracked[key].ewma.alpha)
            self.reset_latches(key)

    def reset_latches(self, key: str):
        """Capacity changed; the next episode starts from a clean slate."""
        tr = self.tracked.get(key)
        if tr is None:
            return
        tr.over_since = tr.under_since = tr.clear_since = None
        tr.over_latched = tr.under_latched = False
        tr.rule_latched = tr.pending = False
