"""Leader election among masters by minimum reachable latency."""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Sequence


class Role(str, Enum):
    LEADER = "leader"
    FOLLOWER = "follower"


class NoCandidate(Exception):
    """No reachable master; the control plane is unavailable."""


@dataclass
class RoleState:
    master_id: str
    role: Role
    last_heartbeat: float = 0.0
    reachable_latency: Optional[float] = None  # None: unreachable

    @property
    def reachable(self) -> bool:
        return self.reachable_latency is not None


class ElectionStrategy(Protocol):
    def elect(self, candidates: Sequence[RoleState]) -> str: ...


class MinLatencyElection:
    """Lowest reachable latency wins; ties go to the smaller id."""

    def elect(self, candidates: Sequence[RoleState]) -> str:
        live = [c for c in candidates if c.reachable]
        if not live:
            raise NoCandidate("no reachable master candidate")
        if len(live) == 1:
            return live[0].master_id
        return min(live, key=lambda c: (c.reachable_latency, c.master_id)).master_id


def elect_leader(candidates: Sequence[RoleState], strategy: Optional[ElectionStrategy] = None) -> str:
    return (strategy or MinLatencyElection()).elect(candidates)


def election_duration(candidates: Sequence[RoleState], window: float) -> float:
    """Simulated time for one ping round over the candidates.

    A lone candidate is promoted without a round. Pings slower than the
    window count as unreachable, so the round never exceeds ``window``.
    """
    live = [c for c in candidates if c.reachable]
    if len(live) <= 1:
        return 0.0
    return min(window, max(c.reachable_latency for c in live))
