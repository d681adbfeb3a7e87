"""Scenario files: chains, plants, MPC settings, runtime changes.

A scenario is a JSON document with all times in milliseconds; they must be
exact multiples of the quantum. Chains may carry an activity window
(``first_arrival_ms`` / ``active_until_ms``) and a list of runtime parameter
changes that take effect at the next arrival after their timestamp.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Callable

import numpy as np

from .chains import ChainParams, MessageChainSpec, Ticks, validate_chain_set
from .errors import ConfigError
from .mpc import MpcProblem, PlantModel

STRATEGIES = ("worst_case", "timing_model")


def ms_to_ticks(value_ms: float, quantum_us: int, where: str) -> Ticks:
    """Convert a millisecond figure to ticks, requiring exact alignment."""
    us = value_ms * 1000.0
    rounded = round(us)
    if abs(us - rounded) > 1e-6:
        raise ConfigError(f"{where}: {value_ms} ms is not a whole number of microseconds")
    if rounded % quantum_us != 0:
        raise ConfigError(
            f"{where}: {value_ms} ms is not a multiple of the {quantum_us} us quantum")
    return rounded // quantum_us


def ticks_to_ms(ticks: Ticks, quantum_us: int) -> float:
    return ticks * quantum_us / 1000.0


@dataclass(frozen=True)
class LoopSetup:
    """One feedback loop: its plant, initial state, and MPC problem."""

    chain_id: int
    plant: PlantModel
    x0: np.ndarray
    problem: MpcProblem


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    quantum_us: int
    horizon: Ticks
    chains: list[MessageChainSpec]
    loops: list[LoopSetup]
    strategy: str | None
    worst_case_probe: Ticks
    mpc_horizon: Ticks     # prediction horizon in ticks

    def loop(self, chain_id: int) -> LoopSetup:
        for lp in self.loops:
            if lp.chain_id == chain_id:
                return lp
        raise KeyError(chain_id)


def make_reference(spec: dict, where: str) -> Callable[[float], np.ndarray]:
    """Reference trajectory factory: constant, square wave, or sinusoid."""
    kind = spec.get("kind")
    if kind == "constant":
        value = float(spec.get("value", 0.0))
        return lambda t: np.array([value])
    if kind == "square":
        amp = float(spec.get("amplitude", 0.1))
        period = float(spec.get("period_ms", 1000.0)) / 1000.0
        if period <= 0:
            raise ConfigError(f"{where}: square wave period must be positive")
        return lambda t: np.array([amp if (t % period) < period / 2 else -amp])
    if kind == "sine":
        amp = float(spec.get("amplitude", 0.1))
        period = float(spec.get("period_ms", 1000.0)) / 1000.0
        if period <= 0:
            raise ConfigError(f"{where}: sine period must be positive")
        return lambda t: np.array([amp * math.sin(2 * math.pi * t / period)])
    raise ConfigError(f"{where}: unknown reference kind {kind!r}")


_PARAM_KEYS = ("T_ms", "I1_ms", "C1_ms", "I2_ms", "C2_ms", "P1", "P2")


def _params_from(raw: dict, quantum_us: int, where: str, active: bool = True) -> ChainParams:
    for key in ("T_ms", "C1_ms", "P1", "P2"):
        if key not in raw:
            raise ConfigError(f"{where}: missing required field {key!r}")
    return ChainParams(
        T=ms_to_ticks(raw["T_ms"], quantum_us, f"{where}.T_ms"),
        I1=ms_to_ticks(raw.get("I1_ms", 0), quantum_us, f"{where}.I1_ms"),
        C1=ms_to_ticks(raw["C1_ms"], quantum_us, f"{where}.C1_ms"),
        I2=ms_to_ticks(raw.get("I2_ms", 0), quantum_us, f"{where}.I2_ms"),
        C2=ms_to_ticks(raw.get("C2_ms", 0), quantum_us, f"{where}.C2_ms"),
        P1=int(raw["P1"]),
        P2=int(raw["P2"]),
        active=active,
    )


def _build_chain(raw: dict, changes: list[dict], quantum_us: int) -> MessageChainSpec:
    cid = raw.get("id")
    if not isinstance(cid, int):
        raise ConfigError(f"chain entry without integer 'id': {raw}")
    where = f"chains[id={cid}]"
    base = _params_from(raw, quantum_us, where)
    segments: list[tuple[Ticks, ChainParams]] = [(0, base)]
    for idx, change in enumerate(sorted(changes, key=lambda c: c["at_ms"])):
        cwhere = f"runtime_changes[{idx}] for chain {cid}"
        at = ms_to_ticks(change["at_ms"], quantum_us, f"{cwhere}.at_ms")
        if at <= segments[-1][0]:
            raise ConfigError(f"{cwhere}: change times must be strictly increasing")
        prev = segments[-1][1]
        merged = {
            "T_ms": ticks_to_ms(prev.T, quantum_us),
            "I1_ms": ticks_to_ms(prev.I1, quantum_us),
            "C1_ms": ticks_to_ms(prev.C1, quantum_us),
            "I2_ms": ticks_to_ms(prev.I2, quantum_us),
            "C2_ms": ticks_to_ms(prev.C2, quantum_us),
            "P1": prev.P1, "P2": prev.P2,
        }
        overrides = change.get("set", {})
        unknown = set(overrides) - set(_PARAM_KEYS)
        if unknown:
            raise ConfigError(f"{cwhere}: unknown parameter fields {sorted(unknown)}")
        merged.update(overrides)
        segments.append((at, _params_from(merged, quantum_us, cwhere, active=prev.active)))
    if "active_until_ms" in raw:
        until = ms_to_ticks(raw["active_until_ms"], quantum_us, f"{where}.active_until_ms")
        last = segments[-1][1]
        if until <= segments[-1][0]:
            raise ConfigError(f"{where}: active_until_ms must come after the last change")
        segments.append((until, ChainParams(last.T, last.I1, last.C1, last.I2,
                                            last.C2, last.P1, last.P2, active=False)))
    first = ms_to_ticks(raw.get("first_arrival_ms", 0), quantum_us, f"{where}.first_arrival_ms")
    spec = MessageChainSpec(cid, tuple(segments), first)
    if not spec.params_at(first).active:
        raise ConfigError(f"{where}: first arrival falls in an inactive window")
    return spec


def _as_weight(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(size)
    if arr.shape != (size, size):
        raise ConfigError(f"mpc.{name}: expected a scalar or a {size}x{size} matrix")
    return arr


def _build_loops(raw_plants: list[dict], raw_mpc: dict, chains: list[MessageChainSpec],
                 quantum_us: int) -> tuple[list[LoopSetup], Ticks]:
    chain_ids = {c.chain_id for c in chains}
    tp_ms = float(raw_mpc.get("Tp_ms", 100.0))
    tp_ticks = ms_to_ticks(tp_ms, quantum_us, "mpc.Tp_ms")
    default_ref = raw_mpc.get("reference", {"kind": "square", "amplitude": 0.1,
                                            "period_ms": 1000.0})
    loops: list[LoopSetup] = []
    for idx, entry in enumerate(raw_plants):
        where = f"plants[{idx}]"
        cid = entry.get("chain")
        if cid not in chain_ids:
            raise ConfigError(f"{where}: references unknown chain {cid!r}")
        if "pendulum" in entry:
            pd = entry["pendulum"]
            try:
                a, b, c = float(pd["a"]), float(pd["b"]), float(pd["c"])
            except KeyError as miss:
                raise ConfigError(f"{where}.pendulum: missing coefficient {miss}") from None
            plant = PlantModel(A=[[0.0, 1.0], [a, b]], B=[[0.0], [c]], C=[[1.0, 0.0]])
        else:
            try:
                plant = PlantModel(entry["A"], entry["B"], entry["C"])
            except KeyError as miss:
                raise ConfigError(f"{where}: missing matrix {miss}") from None
        x0 = np.asarray(entry.get("x0", np.zeros(plant.n)), dtype=float)
        if x0.shape != (plant.n,):
            raise ConfigError(f"{where}.x0: expected {plant.n} entries")
        ref_spec = entry.get("reference", default_ref)
        problem = MpcProblem(
            Q1=_as_weight(raw_mpc.get("Q1", 1.0), plant.p, "Q1"),
            Q2=_as_weight(raw_mpc.get("Q2", 0.01), plant.m, "Q2"),
            Q3=_as_weight(raw_mpc.get("Q3", 0.0), plant.n, "Q3"),
            Tp=tp_ms / 1000.0,
            u_min=np.full(plant.m, float(raw_mpc.get("u_min", -math.inf))),
            u_max=np.full(plant.m, float(raw_mpc.get("u_max", math.inf))),
            reference=make_reference(ref_spec, f"{where}.reference"),
        )
        loops.append(LoopSetup(cid, plant, x0, problem))
    return loops, tp_ticks


def nominal_specs(cfg: ScenarioConfig) -> list[MessageChainSpec]:
    """The message set as it stands at time zero: chains already present,
    restricted to their initial parameters (runtime changes unknown offline)."""
    out = []
    for spec in cfg.chains:
        if spec.first_arrival != 0:
            continue
        out.append(MessageChainSpec(spec.chain_id, (spec.segments[0],), 0))
    return out


def _default_probe(chains: list[MessageChainSpec]) -> Ticks:
    periods = [c.segments[0][1].T for c in chains if c.first_arrival == 0]
    if not periods:
        return 0
    return 2 * math.lcm(*periods)


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a scenario file; errors name the offending field."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file is not valid JSON: {exc}") from None
    return parse_scenario(raw)


def parse_scenario(raw: dict) -> ScenarioConfig:
    quantum_us = raw.get("quantum_us", 1)
    if not isinstance(quantum_us, int) or quantum_us <= 0:
        raise ConfigError("quantum_us must be a positive integer")
    if "horizon_ms" not in raw:
        raise ConfigError("missing horizon_ms")
    horizon = ms_to_ticks(raw["horizon_ms"], quantum_us, "horizon_ms")

    changes_by_chain: dict[int, list[dict]] = {}
    for idx, change in enumerate(raw.get("runtime_changes", [])):
        if "chain" not in change or "at_ms" not in change:
            raise ConfigError(f"runtime_changes[{idx}]: needs 'chain' and 'at_ms'")
        changes_by_chain.setdefault(change["chain"], []).append(change)

    chains = [_build_chain(entry, changes_by_chain.get(entry.get("id"), []), quantum_us)
              for entry in raw.get("chains", [])]
    known = {c.chain_id for c in chains}
    for cid in changes_by_chain:
        if cid not in known:
            raise ConfigError(f"runtime_changes: unknown chain {cid}")
    validate_chain_set(chains)

    loops, tp_ticks = _build_loops(raw.get("plants", []), raw.get("mpc", {}),
                                   chains, quantum_us)

    strategy = raw.get("strategy")
    if strategy is not None and strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")

    if "worst_case_probe_ms" in raw.get("mpc", {}):
        probe = ms_to_ticks(raw["mpc"]["worst_case_probe_ms"], quantum_us,
                            "mpc.worst_case_probe_ms")
    else:
        probe = _default_probe(chains)

    return ScenarioConfig(
        name=str(raw.get("name", "scenario")),
        quantum_us=quantum_us,
        horizon=horizon,
        chains=chains,
        loops=loops,
        strategy=strategy,
        worst_case_probe=probe,
        mpc_horizon=tp_ticks,
    )


def bundled_scenario_path(name: str = "three_pendulums.json"):
    """Path to a scenario shipped with the package."""
    return resources.files("canmpc.data").joinpath(name)
