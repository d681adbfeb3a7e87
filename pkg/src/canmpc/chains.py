"""Message-chain parameter types.

All times are integer ticks of the scenario quantum; the timing engine never
touches floating point. A chain is the recurring sensor-message -> controller
compute -> control-message sequence of one feedback loop. General-purpose
traffic is a chain with I2 = C2 = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

Ticks = int


@dataclass(frozen=True)
class ChainParams:
    """Per-instance parameters: period, prep times, transmission times, priorities.

    ``active=False`` marks a segment during which the chain emits no new
    instances (used for sporadic traffic windows).
    """

    T: Ticks
    I1: Ticks
    C1: Ticks
    I2: Ticks
    C2: Ticks
    P1: int
    P2: int
    active: bool = True

    @property
    def work(self) -> Ticks:
        """Total processing + transmission time of one instance."""
        return self.I1 + self.C1 + self.I2 + self.C2

    def validate(self, where: str) -> None:
        if self.T <= 0:
            raise ConfigError(f"{where}: period T must be positive, got {self.T}")
        if self.C1 <= 0:
            raise ConfigError(f"{where}: C1 must be positive, got {self.C1}")
        for name in ("I1", "I2", "C2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{where}: {name} must be non-negative")
        if self.P1 <= 0 or self.P2 <= 0:
            raise ConfigError(f"{where}: priorities must be positive integers")


@dataclass(frozen=True)
class MessageChainSpec:
    """Static schedule of one message chain.

    ``segments`` maps piecewise-constant parameter epochs: the parameters in
    force at time t are those of the last segment with start <= t. Parameter
    changes take effect at the next instance arrival; an in-flight instance
    keeps the parameters it was created with.
    """

    chain_id: int
    segments: tuple[tuple[Ticks, ChainParams], ...]
    first_arrival: Ticks = 0

    def __post_init__(self) -> None:
        if not self.segments:
            raise ConfigError(f"chain {self.chain_id}: needs at least one segment")
        starts = [s for s, _ in self.segments]
        if starts[0] != 0:
            raise ConfigError(f"chain {self.chain_id}: first segment must start at 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"chain {self.chain_id}: segment starts must be strictly increasing")
        if self.first_arrival < 0:
            raise ConfigError(f"chain {self.chain_id}: first_arrival must be non-negative")
        for start, params in self.segments:
            params.validate(f"chain {self.chain_id} segment at {start}")

    def params_at(self, t: Ticks) -> ChainParams:
        """Parameters in force at absolute time t."""
        current = self.segments[0][1]
        for start, params in self.segments:
            if start <= t:
                current = params
            else:
                break
        return current

    def next_activation_after(self, t: Ticks) -> Ticks | None:
        """Earliest segment start > t whose parameters are active, if any."""
        for start, params in self.segments:
            if start > t and params.active:
                return start
        return None

    def priorities(self) -> set[int]:
        out: set[int] = set()
        for _, params in self.segments:
            out.add(params.P1)
            out.add(params.P2)
        return out


def validate_chain_set(specs: list[MessageChainSpec]) -> None:
    """Cross-chain invariants: unique ids, globally unique priorities."""
    seen_ids: set[int] = set()
    for spec in specs:
        if spec.chain_id in seen_ids:
            raise ConfigError(f"duplicate chain id {spec.chain_id}")
        seen_ids.add(spec.chain_id)
    claimed: dict[int, int] = {}
    for spec in specs:
        for _, params in spec.segments:
            if params.P1 == params.P2:
                raise ConfigError(
                    f"chain {spec.chain_id}: P1 and P2 must differ, both are {params.P1}"
                )
        for prio in spec.priorities():
            owner = claimed.get(prio)
            if owner is not None and owner != spec.chain_id:
                raise ConfigError(
                    f"priority {prio} used by both chain {owner} and chain {spec.chain_id}"
                )
            claimed[prio] = spec.chain_id
