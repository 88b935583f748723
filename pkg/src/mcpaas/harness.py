"""Scenario runner and evaluation reports.

A scenario is a JSON document (see ``SCENARIO_SCHEMA``) naming providers,
masters, applications, workloads and a timed action script. ``run_scenario``
executes it on a fresh fabric and returns a :class:`RunResult` holding the
summary report, per-second series, request outcomes and the event log.
"""

import csv
import io
import json
import math
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import jsonschema

from .balancer import DEFAULT_PROBE_MISSES, DEFAULT_PROBE_PERIOD_MS, DEFAULT_TIMEOUT_MS, LoadBalancer, Status
from .controller import AppSettings, FileStateStore, MemoryStateStore, Platform, PlatformConfig
from .deployer import DEFAULT_AGENT_STACK_DELAY_MS, DEFAULT_APP_DEPLOY_DELAY_MS, ServiceDeployer
from .fabric import SECOND, Fabric, ProviderProfile, load_registry
from .manifest import parse_manifest
from .telemetry import FLUSH_PERIOD_MS, SAMPLE_PERIOD_MS, Monitor
from .workload import DEFAULT_CHECK_PERIOD_MS, DEFAULT_SUSTAIN_MS, DriftIndicator, Severity, WorkloadManager

REPORT_FILE = "report.json"
SERIES_FILE = "series.csv"
EVENTS_FILE = "events.ndjson"
REQUESTS_FILE = "requests.csv"
METRICS_FILE = "metrics.csv"
PEAK_DETECTION_TARGET_MS = 300.0


class ScenarioError(ValueError):
    pass


_number = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}

SCENARIO_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mcpaas scenario",
    "type": "object",
    "required": ["name"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "duration_s": _nonneg,
        "mode": {"enum": ["platform", "baseline"]},
        "registry": {"type": "string"},
        "providers": {"type": "array", "items": {"type": "object"}},
        "platform": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "masters": {"type": "array", "items": {"type": "string"}},
                "master_vm": {"type": "string"},
                "heartbeat_ms": _pos,
                "heartbeat_misses": {"type": "integer", "minimum": 1},
                "election_window_ms": _pos,
                "checkpoint_period_s": _pos,
                "checkpoint_retain": {"type": "integer", "minimum": 1},
                "discovery_period_s": _pos,
                "follower_start_delay_ms": _nonneg,
                "master_stack_delay_ms": _nonneg,
                "scale_in_cooldown_s": _nonneg,
                "app_deploy_delay_ms": _nonneg,
                "agent_stack_delay_ms": _nonneg,
                "probe_period_ms": _pos,
                "probe_misses": {"type": "integer", "minimum": 1},
                "timeout_ms": _pos,
                "sample_period_ms": _pos,
                "flush_period_ms": _pos,
                "sustain_ms": _nonneg,
                "check_period_ms": _pos,
                "telemetry_cost_ms": _nonneg,
                "balancer_cost_ms": _nonneg,
            },
        },
        "applications": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "descriptor": {"type": "string"},
                    "descriptor_file": {"type": "string"},
                    "service_time_ms": {
                        "oneOf": [_pos, {"type": "object", "additionalProperties": _pos}]
                    },
                    "elasticity": {"type": "boolean"},
                    "overload_factor": _pos,
                    "underload_factor": _pos,
                    "preallocate": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["provider", "vm"],
                            "additionalProperties": False,
                            "properties": {"provider": {"type": "string"}, "vm": {"type": "string"}},
                        },
                    },
                },
                "oneOf": [{"required": ["descriptor"]}, {"required": ["descriptor_file"]}],
            },
        },
        "workloads": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["application", "total_connections", "requests_per_connection", "profile"],
                "additionalProperties": False,
                "properties": {
                    "application": {"type": "string"},
                    "start_s": _nonneg,
                    "total_connections": {"type": "integer", "minimum": 1},
                    "requests_per_connection": {"type": "integer", "minimum": 1},
                    "request_interval_ms": _nonneg,
                    "arrivals": {"enum": ["poisson", "even"]},
                    "profile": {
                        "type": "array",
                        "minItems": 1,
                        "items": {"type": "array", "prefixItems": [_nonneg, _nonneg], "minItems": 2, "maxItems": 2},
                    },
                },
            },
        },
        "actions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["at_s", "action"],
                "additionalProperties": False,
                "properties": {
                    "at_s": _nonneg,
                    "action": {"enum": ["deploy", "inject_failure"]},
                    "application": {"type": "string"},
                    "target": {"type": "string"},
                },
            },
        },
        "indicators": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "subject", "metric", "comparator", "threshold", "sustain_ms", "severity"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "subject": {"type": "string"},
                    "metric": {"type": "string"},
                    "comparator": {"enum": [">", "<", ">=", "<="]},
                    "threshold": _number,
                    "sustain_ms": _nonneg,
                    "severity": {"enum": [s.value for s in Severity]},
                },
            },
        },
        "steady_window_s": {"type": "array", "items": _nonneg, "minItems": 2, "maxItems": 2},
    },
}


# -- workload ---------------------------------------------------------------


@dataclass
class WorkloadSpec:
    """Connections open following a piecewise-linear rate profile.

    ``profile`` holds ``(seconds after start, connections per second)``
    breakpoints; the last rate holds until ``total_connections`` is reached.
    Each connection sends ``requests_per_connection`` requests spaced by
    ``request_interval_ms`` on average. By default openings are Poisson and
    think times exponential; ``"even"`` spaces both exactly.
    """

    application: str
    total_connections: int
    requests_per_connection: int
    profile: List[Tuple[float, float]]
    request_interval_ms: float = 100.0
    start_s: float = 0.0
    timeout_ms: float = DEFAULT_TIMEOUT_MS
    arrivals: str = "poisson"  # "poisson" | "even"

    def __post_init__(self):
        self.profile = [(float(t), float(r)) for t, r in self.profile]
        if self.total_connections < 1 or self.requests_per_connection < 1:
            raise ValueError("connection and request counts must be positive")
        if not self.profile:
            raise ValueError("empty rate profile")
        times = [t for t, _ in self.profile]
        if times[0] != 0.0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("profile times must start at 0 and increase")
        if any(r < 0 for _, r in self.profile):
            raise ValueError("rates must be non-negative")
        if self.timeout_ms <= 0 or self.request_interval_ms < 0:
            raise ValueError("bad timing parameters")
        if self.arrivals not in ("poisson", "even"):
            raise ValueError(f"unknown arrival process {self.arrivals!r}")

    @property
    def rate_range(self) -> Tuple[float, float]:
        rates = [r for _, r in self.profile]
        return min(rates), max(rates)

    @property
    def planned_requests(self) -> int:
        return self.total_connections * self.requests_per_connection

    @classmethod
    def from_dict(cls, d: Dict[str, Any], timeout_ms: float = DEFAULT_TIMEOUT_MS) -> "WorkloadSpec":
        return cls(
            application=d["application"],
            total_connections=int(d["total_connections"]),
            requests_per_connection=int(d["requests_per_connection"]),
            profile=[tuple(p) for p in d["profile"]],
            request_interval_ms=float(d.get("request_interval_ms", 100.0)),
            start_s=float(d.get("start_s", 0.0)),
            timeout_ms=timeout_ms,
            arrivals=d.get("arrivals", "poisson"),
        )

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["profile"] = [list(p) for p in self.profile]
        return d

    def _invert(self, targets: Sequence[float]) -> List[float]:
        """Times (ms) at which the integrated rate reaches each sorted target."""
        out: List[float] = []
        i = 0
        base = 0.0  # integrated count at segment start
        for (t0, r0), (t1, r1) in zip(self.profile, self.profile[1:]):
            dur = t1 - t0
            area = (r0 + r1) / 2 * dur
            b = (r1 - r0) / dur
            while i < len(targets) and targets[i] <= base + area:
                m = targets[i] - base
                denom = r0 + math.sqrt(max(0.0, r0 * r0 + 2 * b * m))
                tau = 0.0 if m <= 0 else (2 * m / denom if denom > 0 else dur)
                out.append((self.start_s + t0 + min(tau, dur)) * SECOND)
                i += 1
            base += area
        t_last, r_last = self.profile[-1]
        if r_last > 0:
            out.extend((self.start_s + t_last + (m - base) / r_last) * SECOND for m in targets[i:])
        return out

    def connection_times(self, rng: Optional[random.Random] = None) -> List[float]:
        """Opening time (ms) of each connection.

        Without ``rng`` connection k opens exactly when the integrated rate
        reaches k. With ``rng`` the openings form a Poisson process whose
        intensity follows the profile (unit-rate arrivals, time-changed).
        """
        if rng is None:
            targets = [float(k) for k in range(self.total_connections)]
        else:
            targets, acc = [], 0.0
            for _ in range(self.total_connections):
                acc += rng.expovariate(1.0)
                targets.append(acc)
        return self._invert(targets)

    def request_times(self, rng: Optional[random.Random] = None) -> List[float]:
        """Send times of every request; Poisson mode draws exponential think times."""
        poisson = self.arrivals == "poisson" and rng is not None
        times = []
        for c in self.connection_times(rng if poisson else None):
            t = c
            for j in range(self.requests_per_connection):
                if j:
                    t += rng.expovariate(1.0 / self.request_interval_ms) if poisson else self.request_interval_ms
                times.append(t)
        times.sort()
        return times


# -- reports ----------------------------------------------------------------


def availability(mtbf: float, mttr: float) -> float:
    """Steady-state availability MTBF / (MTBF + MTTR)."""
    if mtbf <= 0:
        raise ValueError("mtbf must be positive")
    if mttr < 0:
        raise ValueError("mttr must be non-negative")
    return mtbf / (mtbf + mttr)


@dataclass(frozen=True)
class AvailabilityReport:
    mtbf: float
    mttr: float
    availability: float

    @classmethod
    def compute(cls, mtbf: float, mttr: float) -> "AvailabilityReport":
        return cls(mtbf, mttr, availability(mtbf, mttr))

    @property
    def percent(self) -> str:
        return f"{100 * self.availability:.3f}%"


def overhead(baseline: float, platform: float) -> float:
    """Relative execution-time overhead of the platform over the baseline."""
    if baseline <= 0:
        raise ValueError("baseline execution time must be positive")
    return (platform - baseline) / baseline


def overhead_report(baseline_dir: Union[str, Path], platform_dir: Union[str, Path]) -> Dict[str, Any]:
    b = json.loads((Path(baseline_dir) / REPORT_FILE).read_text())
    p = json.loads((Path(platform_dir) / REPORT_FILE).read_text())
    if b["workloads"] != p["workloads"] or b["seed"] != p["seed"]:
        raise ScenarioError("runs used different workload specs or seeds")
    frac = overhead(b["aggregate"]["execution_time_s"], p["aggregate"]["execution_time_s"])
    return {
        "baseline_s": b["aggregate"]["execution_time_s"],
        "platform_s": p["aggregate"]["execution_time_s"],
        "overhead": frac,
        "overhead_percent": round(100 * frac, 1),
    }


@dataclass
class RunResult:
    report: Dict[str, Any]
    series: List[Dict[str, Any]]
    events: str
    requests: List[Dict[str, Any]]
    metrics: List[Dict[str, Any]] = field(default_factory=list)

    def write(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT_FILE).write_text(json.dumps(self.report, sort_keys=True, indent=2) + "\n")
        (out / EVENTS_FILE).write_text(self.events)
        _write_csv(out / SERIES_FILE, SERIES_COLUMNS, self.series)
        _write_csv(out / REQUESTS_FILE, ["time", "app", "instance", "latency_ms", "status"], self.requests)
        _write_csv(out / METRICS_FILE, ["time", "instance", "response_time_ms", "request_count", "cpu_load"],
                   self.metrics)
        return out


SERIES_COLUMNS = ["second", "requests", "ok", "timeouts", "no_backend", "failures", "mean_response_ms", "instances"]


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict[str, Any]]):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in columns})
    path.write_text(buf.getvalue())


# -- scenario loading -------------------------------------------------------


def load_scenario(source: Union[str, Path, Dict[str, Any]]) -> Dict[str, Any]:
    """Parse and validate a scenario; relative file references are inlined."""
    if isinstance(source, dict):
        doc, base = json.loads(json.dumps(source)), Path(".")
    else:
        path = Path(source)
        doc, base = json.loads(path.read_text()), path.parent
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ScenarioError(f"scenario schema violation at {list(e.absolute_path)}: {e.message}") from None
    if "registry" in doc:
        doc["providers"] = [p.to_dict() for p in load_registry(base / doc.pop("registry"))]
    for app in doc.get("applications", []):
        if "descriptor_file" in app:
            app["descriptor"] = (base / app.pop("descriptor_file")).read_text()
    return doc


def _resolve_target(platform: Platform, target: str) -> str:
    if target == "leader":
        if platform.leader_id is None:
            raise ScenarioError("no leader to fail")
        return platform.leader_id
    if target == "follower":
        if not platform.followers:
            raise ScenarioError("no follower to fail")
        return platform.followers[0]
    if target.startswith("instance:"):
        key, _, idx = target[len("instance:"):].partition("#")
        key = platform.balancer.aliases.get(key, key)
        live = platform.replicas(key)
        n = int(idx or 0)
        if n >= len(live):
            raise ScenarioError(f"no replica #{n} of {key}")
        return platform.fabric.instances[live[n]].node_id
    return target


def _percent_failed(failed: int, total: int) -> float:
    return failed / total if total else 0.0


def run_scenario(
    scenario: Union[str, Path, Dict[str, Any]],
    seed: int = 0,
    state_dir: Optional[Union[str, Path]] = None,
) -> RunResult:
    doc = load_scenario(scenario)
    name = doc["name"]
    duration = float(doc.get("duration_s", 0.0)) * SECOND
    mode = doc.get("mode", "platform")
    pc = doc.get("platform", {})
    provider_docs = doc.get("providers", [])
    apps_doc = doc.get("applications", [])
    timeout = float(pc.get("timeout_ms", DEFAULT_TIMEOUT_MS))
    workloads = [WorkloadSpec.from_dict(w, timeout) for w in doc.get("workloads", [])]

    if not provider_docs:
        if apps_doc or workloads or doc.get("actions"):
            raise ScenarioError("scenario uses applications but declares no providers")
        return _empty_result(name, seed, mode, duration)

    providers = [ProviderProfile.from_dict(p) for p in provider_docs]
    fabric = Fabric(providers, seed=seed)
    known = set(fabric.providers)
    masters = pc.get("masters") or [p.id for p in providers[:2]]
    for m in masters:
        if m not in known:
            raise ScenarioError(f"undefined master provider {m!r}")

    balancer = LoadBalancer(
        fabric, timeout=timeout,
        probe_period=float(pc.get("probe_period_ms", DEFAULT_PROBE_PERIOD_MS)),
        probe_misses=int(pc.get("probe_misses", DEFAULT_PROBE_MISSES)),
    )
    deployer = ServiceDeployer(
        fabric, balancer,
        app_deploy_delay=float(pc.get("app_deploy_delay_ms", DEFAULT_APP_DEPLOY_DELAY_MS)),
        agent_stack_delay=float(pc.get("agent_stack_delay_ms", DEFAULT_AGENT_STACK_DELAY_MS)),
    )
    per_request_cost = float(pc.get("telemetry_cost_ms", 0.0)) + float(pc.get("balancer_cost_ms", 0.0))
    deployer.overhead = per_request_cost if mode == "platform" else 0.0
    monitor = Monitor(
        fabric,
        sample_period=float(pc.get("sample_period_ms", SAMPLE_PERIOD_MS)),
        flush_period=float(pc.get("flush_period_ms", FLUSH_PERIOD_MS)),
    )
    indicators = [
        DriftIndicator(i["id"], i["subject"], i["metric"], i["comparator"], float(i["threshold"]),
                       float(i["sustain_ms"]), Severity(i["severity"]))
        for i in doc.get("indicators", [])
    ]
    wm = WorkloadManager(
        fabric, decide=lambda d: False,
        sustain=float(pc.get("sustain_ms", DEFAULT_SUSTAIN_MS)),
        check_period=float(pc.get("check_period_ms", DEFAULT_CHECK_PERIOD_MS)),
        indicators=indicators,
    )
    store = FileStateStore(state_dir) if state_dir is not None else MemoryStateStore()
    config = PlatformConfig(
        masters=list(masters),
        master_vm=pc.get("master_vm", "medium"),
        heartbeat_period=float(pc.get("heartbeat_ms", 100.0)),
        heartbeat_misses=int(pc.get("heartbeat_misses", 3)),
        election_window=float(pc.get("election_window_ms", 200.0)),
        checkpoint_period=float(pc.get("checkpoint_period_s", 30.0)) * SECOND,
        checkpoint_retain=int(pc.get("checkpoint_retain", 3)),
        discovery_period=float(pc.get("discovery_period_s", 10.0)) * SECOND,
        follower_start_delay=float(pc.get("follower_start_delay_ms", 900.0)),
        scale_in_cooldown=float(pc.get("scale_in_cooldown_s", 60.0)) * SECOND,
    )
    if "master_stack_delay_ms" in pc:
        config.master_stack_delay = float(pc["master_stack_delay_ms"])
    platform = Platform(fabric, balancer, deployer, monitor, wm, store, config)
    platform.bootstrap()

    app_names = []
    for a in apps_doc:
        manifest = parse_manifest(a["descriptor"])
        settings = AppSettings(
            service_time=a.get("service_time_ms", 100.0),
            elastic=bool(a.get("elasticity", True)) and mode == "platform",
            overload_factor=float(a.get("overload_factor", 1.0)),
            underload_factor=float(a.get("underload_factor", 10.0)),
        )
        platform.register_application(manifest, settings)
        app_names.append(manifest.name)
        for pre in a.get("preallocate", []):
            if pre["provider"] not in known:
                raise ScenarioError(f"undefined provider {pre['provider']!r}")
            platform.add_agent(pre["provider"], pre["vm"])

    for w in workloads:
        if w.application not in app_names:
            raise ScenarioError(f"workload targets undefined application {w.application!r}")

    failures: List[Dict[str, Any]] = []
    clock = fabric.clock
    for act in doc.get("actions", []):
        at = float(act["at_s"]) * SECOND
        if act["action"] == "deploy":
            app = act.get("application")
            if app not in app_names:
                raise ScenarioError(f"deploy of undefined application {app!r}")
            clock.schedule_at(at, platform.deploy, app)
        else:
            target = act.get("target")
            if not target:
                raise ScenarioError("inject_failure needs a target")
            if not (target in ("leader", "follower") or target.startswith("instance:")
                    or target in known or re.match(r"^n\d+-", target)):
                raise ScenarioError(f"undefined failure target {target!r}")

            def fire(target=target):
                node = _resolve_target(platform, target)
                node_obj = fabric.nodes.get(node)
                victims = sorted(i for i in node_obj.hosted_instances) if node_obj else []
                failures.append({"time": fabric.now, "target": target, "node": node, "instances": victims})
                fabric.inject_failure(node)

            clock.schedule_at(at, fire)

    request_id = 0
    for n, w in enumerate(workloads):
        # own stream per workload so control-plane randomness cannot shift it
        for t in w.request_times(random.Random(f"{seed}/{n}")):
            if t >= duration:
                break
            clock.schedule_at(t, balancer.dispatch, w.application, request_id, t)
            request_id += 1

    entry_keys = [balancer.aliases[a] for a in app_names]
    instance_counts: Dict[int, int] = {}

    def count_instances():
        sec = int(round(fabric.now / SECOND)) - 1
        instance_counts[sec] = sum(len(balancer.table.healthy(k)) for k in entry_keys)
        return True

    clock.every(SECOND, count_instances)
    platform.start()
    balancer.start_probing()
    if mode == "platform":
        monitor.start()
        wm.start()
    clock.run(until=duration)

    return _build_result(doc, seed, mode, duration, fabric, balancer, platform, monitor, workloads,
                         failures, instance_counts)


def _empty_result(name: str, seed: int, mode: str, duration: float) -> RunResult:
    report = {
        "scenario": name, "seed": seed, "mode": mode, "duration_s": duration / SECOND,
        "workloads": [], "planned_requests": 0,
        "aggregate": {"total_requests": 0, "ok": 0, "timeouts": 0, "no_backend": 0, "failed": 0,
                      "failed_fraction": 0.0, "mean_response_ms": 0.0, "execution_time_s": 0.0},
        "series": [], "scale_events": [], "failures": [], "recoveries": [], "failovers": [],
        "elasticity": {}, "cost": 0.0,
    }
    return RunResult(report, [], "", [], [])


def _build_result(doc, seed, mode, duration, fabric, balancer, platform, monitor, workloads, failures,
                  instance_counts) -> RunResult:
    outcomes = balancer.outcomes
    n_secs = int(math.ceil(duration / SECOND))
    buckets = [{"second": s, "requests": 0, "ok": 0, "timeouts": 0, "no_backend": 0, "failures": 0,
                "latency_sum": 0.0} for s in range(n_secs)]
    requests = []
    exec_ms = 0.0
    for o in outcomes:
        s = min(int(o.time // SECOND), n_secs - 1)
        b = buckets[s]
        b["requests"] += 1
        b["latency_sum"] += o.latency
        if o.status is Status.OK:
            b["ok"] += 1
            inst = fabric.instances[o.instance_id]
            exec_ms += inst.service_time + inst.overhead
        elif o.status is Status.TIMEOUT:
            b["timeouts"] += 1
        else:
            b["no_backend"] += 1
        requests.append({"time": round(o.time, 6), "app": o.application, "instance": o.instance_id or "",
                         "latency_ms": round(o.latency, 6), "status": o.status.value})
    series = []
    for b in buckets:
        b["failures"] = b["timeouts"] + b["no_backend"]
        b["mean_response_ms"] = round(b["latency_sum"] / b["requests"], 6) if b["requests"] else 0.0
        b["instances"] = instance_counts.get(b["second"], 0)
        series.append({k: v for k, v in b.items() if k != "latency_sum"})

    total = len(outcomes)
    ok = sum(b["ok"] for b in buckets)
    timeouts = sum(b["timeouts"] for b in buckets)
    no_backend = sum(b["no_backend"] for b in buckets)
    failed = timeouts + no_backend
    mean_rt = sum(o.latency for o in outcomes) / total if total else 0.0

    log = fabric.log
    scale_done = [e for e in log.select("scale_out_done")]
    overloads = log.select("overload")
    first_scale = scale_done[0]["time"] if scale_done else None
    elasticity = {
        "overload_episodes": len(overloads),
        "scale_outs": len(scale_done),
        "scale_ins": len(log.select("scale_in_done")),
        "first_scale_out_done_s": None if first_scale is None else first_scale / SECOND,
        "failures_after_scale_out": None if first_scale is None else sum(
            1 for o in outcomes if o.time >= first_scale and o.status is not Status.OK),
        "peak_detection_ms": [round(e["time"] - e["detail"]["since"], 6) for e in overloads],
        "peak_detection_target_ms": PEAK_DETECTION_TARGET_MS,
    }
    window = doc.get("steady_window_s")
    if window:
        lo, hi = window[0] * SECOND, window[1] * SECOND
        sel = [o.latency for o in outcomes if lo <= o.time < hi]
        elasticity["steady_window_s"] = list(window)
        elasticity["steady_mean_response_ms"] = round(sum(sel) / len(sel), 6) if sel else None
        elasticity["steady_failures"] = sum(
            1 for o in outcomes if lo <= o.time < hi and o.status is not Status.OK)

    failovers = []
    for f in failures:
        for iid in f["instances"]:
            detected = [e["time"] for e in log.select("health_changed")
                        if e["detail"]["instance"] == iid and not e["detail"]["healthy"]]
            replaced = [e["time"] for e in log.select("instance_replaced") if e["detail"]["failed"] == iid]
            affected = sum(1 for o in outcomes
                           if o.instance_id == iid and o.time >= f["time"] and o.status is not Status.OK)
            failovers.append({
                "instance": iid, "failed_at": f["time"],
                "detected_at": detected[0] if detected else None,
                "detection_ms": (detected[0] - f["time"]) if detected else None,
                "affected_requests": affected,
                "replaced_at": replaced[0] if replaced else None,
            })

    report = {
        "scenario": doc["name"],
        "seed": seed,
        "mode": mode,
        "duration_s": duration / SECOND,
        "workloads": [w.to_dict() for w in workloads],
        "planned_requests": sum(w.planned_requests for w in workloads),
        "aggregate": {
            "total_requests": total, "ok": ok, "timeouts": timeouts, "no_backend": no_backend,
            "failed": failed, "failed_fraction": _percent_failed(failed, total),
            "mean_response_ms": round(mean_rt, 6), "execution_time_s": round(exec_ms / SECOND, 9),
        },
        "series": series,
        "scale_events": platform.scale_actions,
        "elasticity": elasticity,
        "failures": failures,
        "failovers": failovers,
        "recoveries": [r.to_dict() for r in platform.recoveries],
        "masters": {"leader": platform.leader_id, "followers": list(platform.followers), "term": platform.term},
        "cost": round(fabric.cost(), 9),
    }
    metrics = [
        {"time": round(m.timestamp, 6), "instance": m.instance_id, "response_time_ms": round(m.response_time, 6),
         "request_count": m.request_count, "cpu_load": round(m.cpu_load, 6)}
        for m in monitor.delivered
    ]
    return RunResult(report, series, log.to_ndjson(), requests, metrics)


def measure_recovery(scenario: Union[str, Path, Dict[str, Any]], seed: int = 0) -> Dict[str, Any]:
    """Run a failure script and summarize recovery times in simulated time."""
    res = run_scenario(scenario, seed)
    out = []
    for r in res.report["recoveries"]:
        out.append({
            "kind": r["kind"],
            "failed_master": r["failed_master"],
            "elected": r["elected"],
            "detection_ms": r["detection_ms"],
            "election_ms": r["election_ms"],
            "elect_start_ms": r["elect_start_ms"],
            "redeploy_ms": r["redeploy_ms"],
            "total_ms": r["total_ms"],
            "total_min": None if r["total_ms"] is None else r["total_ms"] / (60 * SECOND),
            "new_follower_provider": r["new_follower_provider"],
            "state_matches_checkpoint": r["state_matches_checkpoint"],
        })
    return {
        "scenario": res.report["scenario"],
        "seed": seed,
        "recoveries": out,
        "failovers": res.report["failovers"],
    }
