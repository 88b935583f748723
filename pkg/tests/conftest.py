"""Shared fixtures: provider registries, descriptors and a wired platform."""

from pathlib import Path
from typing import Dict, List, Optional

import pytest

from mcpaas.balancer import LoadBalancer
from mcpaas.controller import AppSettings, MemoryStateStore, Platform, PlatformConfig
from mcpaas.deployer import ServiceDeployer
from mcpaas.fabric import Fabric, ProviderProfile, VmOffer, VmType, load_registry
from mcpaas.telemetry import Monitor
from mcpaas.workload import WorkloadManager

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"

LISTING1 = (SCENARIOS / "listing1.composite").read_text()

_OFFERS = {
    VmType.MICRO: (1, 0.6),
    VmType.SMALL: (1, 1.7),
    VmType.MEDIUM: (2, 3.75),
    VmType.LARGE: (4, 15.0),
}


def make_provider(
    pid: str,
    location: str = "Nowhere",
    prices: Optional[Dict[str, float]] = None,
    display_name: Optional[str] = None,
    provision_delay: float = 54000.0,
    base_latency: float = 20.0,
    monitorable: bool = True,
) -> ProviderProfile:
    prices = prices or {"micro": 0.02, "small": 0.05, "medium": 0.1, "large": 0.2}
    catalog = {}
    for name, price in prices.items():
        t = VmType.parse(name)
        vcpu, ram = _OFFERS[t]
        catalog[t] = VmOffer(vcpu, ram, price)
    return ProviderProfile(pid, display_name or pid, location, catalog, provision_delay, base_latency, monitorable)


def scenario_registry() -> List[ProviderProfile]:
    return load_registry(SCENARIOS / "providers.json")


def build_platform(
    providers: List[ProviderProfile],
    masters: List[str],
    seed: int = 0,
    **config,
) -> Platform:
    fabric = Fabric(providers, seed=seed, latency_jitter=0.0)
    balancer = LoadBalancer(fabric)
    deployer = ServiceDeployer(fabric, balancer)
    monitor = Monitor(fabric)
    wm = WorkloadManager(fabric, decide=lambda d: False)
    cfg = PlatformConfig(masters=masters, **config)
    platform = Platform(fabric, balancer, deployer, monitor, wm, MemoryStateStore(), cfg)
    platform.bootstrap()
    return platform


@pytest.fixture
def registry() -> List[ProviderProfile]:
    return scenario_registry()


@pytest.fixture
def listing1() -> str:
    return LISTING1


@pytest.fixture
def app_settings() -> AppSettings:
    return AppSettings(service_time=10.0, elastic=False)


ACCEPTANCE_LINES: List[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
