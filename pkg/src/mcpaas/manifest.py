"""Annotated application descriptors: parsing, validation, serialization."""

import io
import re
import zipfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

from .fabric import SECOND, VmType

DESCRIPTOR_NAME = "application.composite"
DEFAULT_RULE_WINDOW_MS = 10 * SECOND
CONSTRAINT_NAMES = ("location", "vm", "replication")
PROPERTY_NAMES = CONSTRAINT_NAMES + ("elasticity",)
METRICS = ("ResponseTime", "RequestRate", "CpuLoad")
COMPARATORS = (">=", "<=", ">", "<")


class ManifestError(ValueError):
    pass


class ManifestSyntaxError(ManifestError):
    def __init__(self, message: str, position: Tuple[int, int]):
        super().__init__(f"{message} (line {position[0]}, column {position[1]})")
        self.position = position


class ScaleAction(str, Enum):
    SCALE_OUT = "scale-out"
    SCALE_IN = "scale-in"


@dataclass(frozen=True)
class Constraint:
    name: str
    value: Union[str, VmType, int]

    def __post_init__(self):
        if self.name not in CONSTRAINT_NAMES:
            raise ManifestError(f"unknown constraint {self.name!r}")
        if self.value is None or self.value == "":
            raise ManifestError(f"constraint {self.name} has an empty value")
        if self.name == "replication" and (not isinstance(self.value, int) or self.value < 1):
            raise ManifestError("replication must be an integer >= 1")

    def text(self) -> str:
        if isinstance(self.value, VmType):
            return self.value.label
        return str(self.value)


@dataclass(frozen=True)
class ElasticityRule:
    metric: str
    comparator: str
    threshold: float
    unit: str
    action: ScaleAction
    window_ms: float = DEFAULT_RULE_WINDOW_MS

    def __post_init__(self):
        if self.threshold <= 0:
            raise ManifestError("rule threshold must be strictly positive")
        if self.window_ms <= 0:
            raise ManifestError("rule window must be strictly positive")

    @property
    def condition(self) -> Tuple[str, str, float, str, float]:
        return (self.metric, self.comparator, self.threshold, self.unit, self.window_ms)

    @property
    def limit(self) -> float:
        """Threshold in the metric's canonical unit (ms, requests/s, fraction)."""
        return _canonical(self.metric, self.threshold, self.unit)

    def holds(self, value: float) -> bool:
        return compare(value, self.comparator, self.limit)

    def to_text(self) -> str:
        verb = "out" if self.action is ScaleAction.SCALE_OUT else "in"
        text = f"Scaling {verb} when {self.metric} {self.comparator} {_num(self.threshold)}{self.unit}"
        if self.window_ms != DEFAULT_RULE_WINDOW_MS:
            text += f" over {_num(self.window_ms / SECOND)}s"
        return text


def _num(x: float) -> str:
    return f"{x:g}"


def compare(value: float, comparator: str, limit: float) -> bool:
    if comparator == ">":
        return value > limit
    if comparator == "<":
        return value < limit
    if comparator == ">=":
        return value >= limit
    if comparator == "<=":
        return value <= limit
    raise ValueError(f"unknown comparator {comparator!r}")


_TIME_UNITS = {"ms": 1.0, "s": SECOND, "min": 60 * SECOND}
_METRIC_UNITS = {
    "ResponseTime": {"ms": 1.0, "s": SECOND, "min": 60 * SECOND},
    "RequestRate": {"": 1.0, "/s": 1.0, "rps": 1.0},
    "CpuLoad": {"": 1.0, "%": 0.01},
}


def _canonical(metric: str, value: float, unit: str) -> float:
    return value * _METRIC_UNITS[metric][unit]


_RULE_RE = re.compile(
    r"^Scaling\s+(?P<verb>out|in)\s+when\s+(?P<metric>[A-Za-z_]\w*)\s*"
    r"(?P<cmp>>=|<=|>|<)\s*(?P<num>[-+]?\d+(?:\.\d+)?)\s*(?P<unit>ms|min|s|%|/s|rps)?"
    r"(?:\s+over\s+(?P<wnum>[-+]?\d+(?:\.\d+)?)\s*(?P<wunit>ms|min|s))?$"
)


def parse_elasticity_rule(text: str) -> ElasticityRule:
    """Parse ``("Scaling out"|"Scaling in") when <metric> <cmp> <number><unit>``.

    An optional ``over <duration>`` suffix overrides the 10 s default window.
    """
    norm = " ".join(text.split())
    m = _RULE_RE.match(norm)
    if m is None:
        raise ManifestError(f"elasticity rule does not match the grammar: {norm!r}")
    metric = m["metric"]
    if metric not in METRICS:
        raise ManifestError(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")
    unit = m["unit"] or ""
    if unit not in _METRIC_UNITS[metric]:
        raise ManifestError(f"unit {unit!r} not valid for {metric}")
    threshold = float(m["num"])
    if threshold <= 0:
        raise ManifestError(f"non-positive threshold in rule {norm!r}")
    window = DEFAULT_RULE_WINDOW_MS
    if m["wnum"] is not None:
        window = float(m["wnum"]) * _TIME_UNITS[m["wunit"]]
    action = ScaleAction.SCALE_OUT if m["verb"] == "out" else ScaleAction.SCALE_IN
    return ElasticityRule(metric, m["cmp"], threshold, unit, action, window)


@dataclass(frozen=True)
class Wire:
    source: str
    reference: str
    target: str
    service: str


@dataclass
class ComponentSpec:
    name: str
    contribution: str = ""
    services: List[str] = field(default_factory=list)
    references: List[str] = field(default_factory=list)
    constraints: List[Constraint] = field(default_factory=list)
    elasticity: Optional[ElasticityRule] = None

    def __post_init__(self):
        names = [c.name for c in self.constraints]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ManifestError(f"component {self.name}: duplicate constraint {sorted(dup)[0]}")

    def constraint(self, name: str):
        for c in self.constraints:
            if c.name == name:
                return c.value
        return None

    @property
    def location(self) -> Optional[str]:
        return self.constraint("location")

    @property
    def vm_type(self) -> VmType:
        vm = self.constraint("vm")
        return VmType.SMALL if vm is None else vm

    @property
    def replication(self) -> int:
        n = self.constraint("replication")
        return 1 if n is None else n


@dataclass
class ApplicationManifest:
    name: str
    components: List[ComponentSpec]
    wires: List[Wire] = field(default_factory=list)

    def __post_init__(self):
        if not self.components:
            raise ManifestError(f"application {self.name}: no components")
        seen = set()
        for c in self.components:
            if c.name in seen:
                raise ManifestError(f"duplicate component name {c.name!r}")
            seen.add(c.name)
        by_name = {c.name: c for c in self.components}
        for w in self.wires:
            target = by_name.get(w.target)
            if target is None or w.service not in target.services:
                raise ManifestError(
                    f"dangling wire {w.source}.{w.reference} -> {w.target}/{w.service}"
                )

    def component(self, name: str) -> ComponentSpec:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def entry(self) -> ComponentSpec:
        return self.components[0]


def _parse_constraint(component: str, name: str, text: str) -> Constraint:
    if name == "location":
        return Constraint("location", text)
    if name == "vm":
        try:
            return Constraint("vm", VmType.parse(text))
        except ValueError as e:
            raise ManifestError(f"component {component}: {e}") from None
    try:
        n = int(text)
    except ValueError:
        raise ManifestError(f"component {component}: replication {text!r} is not an integer") from None
    return Constraint("replication", n)


def _parse_component(el: ET.Element, wires: List[Wire]) -> ComponentSpec:
    name = el.get("name")
    if not name:
        raise ManifestError("component without a name")
    spec = {"contribution": "", "services": [], "references": [], "constraints": [], "elasticity": None}
    seen_props = set()
    for child in el:
        tag = child.tag
        if tag == "implementation.contribution":
            spec["contribution"] = child.get("contribution", "")
        elif tag == "service":
            spec["services"].append(child.get("name"))
        elif tag == "reference":
            ref = child.get("name")
            spec["references"].append(ref)
            target = child.get("target")
            if target:
                comp, _, svc = target.partition("/")
                if not svc:
                    raise ManifestError(f"reference {name}.{ref}: target must be component/service")
                wires.append(Wire(name, ref, comp, svc))
        elif tag == "property":
            prop = child.get("name")
            if prop not in PROPERTY_NAMES:
                raise ManifestError(f"component {name}: unknown property {prop!r}")
            if prop in seen_props:
                raise ManifestError(f"component {name}: property {prop!r} given twice")
            seen_props.add(prop)
            value = " ".join((child.text or "").split())
            if not value:
                raise ManifestError(f"component {name}: property {prop!r} is empty")
            if prop == "elasticity":
                spec["elasticity"] = parse_elasticity_rule(value)
            else:
                spec["constraints"].append(_parse_constraint(name, prop, value))
        else:
            raise ManifestError(f"component {name}: unsupported element <{tag}>")
    return ComponentSpec(name=name, **spec)


def parse_manifest(text: str) -> ApplicationManifest:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as e:
        raise ManifestSyntaxError(f"malformed descriptor: {e.msg}", e.position) from None
    if root.tag != "composite":
        raise ManifestError(f"root element must be <composite>, got <{root.tag}>")
    name = root.get("name")
    if not name:
        raise ManifestError("composite without a name")
    components, wires = [], []
    for el in root:
        if el.tag != "component":
            raise ManifestError(f"unsupported element <{el.tag}> in composite")
        components.append(_parse_component(el, wires))
    return ApplicationManifest(name=name, components=components, wires=wires)


def serialize_manifest(manifest: ApplicationManifest) -> str:
    root = ET.Element("composite", name=manifest.name)
    for c in manifest.components:
        el = ET.SubElement(root, "component", name=c.name)
        if c.contribution:
            ET.SubElement(el, "implementation.contribution", contribution=c.contribution)
        for svc in c.services:
            ET.SubElement(el, "service", name=svc)
        for ref in c.references:
            attrs = {"name": ref}
            for w in manifest.wires:
                if w.source == c.name and w.reference == ref:
                    attrs["target"] = f"{w.target}/{w.service}"
            ET.SubElement(el, "reference", attrs)
        for con in c.constraints:
            ET.SubElement(el, "property", name=con.name).text = con.text()
        if c.elasticity is not None:
            ET.SubElement(el, "property", name="elasticity").text = c.elasticity.to_text()
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


@dataclass
class PackageReport:
    ok: bool
    archives: List[str]
    descriptor: bool
    problems: List[str]
    manifest: Optional[ApplicationManifest] = None


def validate_package(archive: Union[str, bytes, io.IOBase]) -> PackageReport:
    """Check a contribution package: nested archives, a descriptor, and references."""
    if isinstance(archive, (bytes, bytearray)):
        archive = io.BytesIO(archive)
    problems: List[str] = []
    manifest = None
    with zipfile.ZipFile(archive) as zf:
        names = [n for n in zf.namelist() if "/" not in n.rstrip("/")]
        archives = sorted(n for n in names if n.lower().endswith(".zip"))
        has_descriptor = DESCRIPTOR_NAME in names
        if not archives:
            problems.append("missing nested contribution archive")
        for n in archives:
            if not zipfile.is_zipfile(io.BytesIO(zf.read(n))):
                problems.append(f"{n} is not a zip archive")
        if not has_descriptor:
            problems.append(f"missing descriptor {DESCRIPTOR_NAME}")
        else:
            try:
                manifest = parse_manifest(zf.read(DESCRIPTOR_NAME).decode("utf-8"))
            except ManifestError as e:
                problems.append(f"invalid descriptor: {e}")
    if manifest is not None:
        for c in manifest.components:
            if c.contribution and c.contribution not in archives:
                problems.append(f"component {c.name} references absent archive {c.contribution}")
    return PackageReport(not problems, archives, has_descriptor, problems, manifest)


def build_package(descriptor: str, archives: Dict[str, bytes]) -> bytes:
    """Assemble a contribution package in memory (used by tooling and tests)."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in sorted(archives.items()):
            zf.writestr(name, data)
        zf.writestr(DESCRIPTOR_NAME, descriptor)
    return buf.getvalue()


def empty_archive() -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w"):
        pass
    return buf.getvalue()
