"""Hybrid timing engine for message chains on a CAN.

The engine tracks, per chain, the triple (d, r, o): time until the next
instance arrives, least remaining work of the active instance, and elapsed
delay of the active instance (frozen once it completes). Between significant
moments every state flows linearly; at a significant moment the engine applies
discrete jumps: transmission completions, preparation completions, instance
arrivals, and bus arbitration.

An instance walks seven stages, derived from the residue r and the bus owner:

    S1 prep sensor   (r decreasing)      C1+I2+C2 <  r <= I1+C1+I2+C2
    S2 wait sensor   (r frozen)          r == C1+I2+C2
    S3 tx sensor     (r decreasing, on bus)
    S4 prep control  (r decreasing)      C2 <  r <= I2+C2
    S5 wait control  (r frozen)          r == C2
    S6 tx control    (r decreasing, on bus)
    S7 done          (r == 0, o frozen)

Zero-length stages (general-purpose traffic with I2 = C2 = 0) are traversed
instantaneously; the corresponding events share a timestamp. Deadline misses
abort the stale instance, emit a DEADLINE_MISS event, and reset the chain, so
the model stays total on unschedulable inputs.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .chains import ChainParams, MessageChainSpec, Ticks
from .errors import ModelCorruptionError, PreconditionError
from .events import EventKind, EventTrace, TimedEvent


class Stage(enum.Enum):
    S1_PREP_SENSOR = 1
    S2_WAIT_SENSOR = 2
    S3_TX_SENSOR = 3
    S4_PREP_CONTROL = 4
    S5_WAIT_CONTROL = 5
    S6_TX_CONTROL = 6
    S7_DONE = 7


_PREP_STAGES = (Stage.S1_PREP_SENSOR, Stage.S4_PREP_CONTROL)
_WAIT_STAGES = (Stage.S2_WAIT_SENSOR, Stage.S5_WAIT_CONTROL)


@dataclass
class ChainState:
    """Dynamic state of one chain.

    ``d`` is None for a dormant chain with no pending arrival (inactive
    segment and no future activation). ``params`` are frozen at instance
    creation: a mid-instance segment change only affects the next arrival.
    """

    d: Ticks | None
    r: Ticks
    o: Ticks
    k: int
    params: ChainParams

    def copy(self) -> "ChainState":
        return ChainState(self.d, self.r, self.o, self.k, self.params)


@dataclass
class BusState:
    """Full timing state: per-chain states, bus owner (0 = idle), and time."""

    now: Ticks
    bus_id: int
    states: dict[int, ChainState]

    def copy(self) -> "BusState":
        return BusState(self.now, self.bus_id, {n: s.copy() for n, s in self.states.items()})


def stage_of(state: ChainState, params: ChainParams | None = None,
             is_on_bus: bool = False) -> Stage:
    """Stage of a chain, derived from its residue and bus occupancy.

    Boundary values belong to the waiting/done stages: r == C1+I2+C2 is
    S2, r == C2 is S5, r == 0 is S7.
    """
    p = params if params is not None else state.params
    r = state.r
    tail = p.I2 + p.C2
    if is_on_bus:
        if tail < r <= p.C1 + tail:
            return Stage.S3_TX_SENSOR
        if 0 < r <= p.C2:
            return Stage.S6_TX_CONTROL
        raise ModelCorruptionError(f"residue {r} is outside both transmission ranges")
    if r == 0:
        return Stage.S7_DONE
    if r == p.C2:
        return Stage.S5_WAIT_CONTROL
    if r < p.C2:
        raise ModelCorruptionError(f"residue {r} below C2={p.C2} off the bus")
    if r <= tail:
        return Stage.S4_PREP_CONTROL
    if r == p.C1 + tail:
        return Stage.S2_WAIT_SENSOR
    if r < p.C1 + tail:
        raise ModelCorruptionError(f"residue {r} in the sensor-transmission range off the bus")
    if r <= p.work:
        return Stage.S1_PREP_SENSOR
    raise ModelCorruptionError(f"residue {r} exceeds total work {p.work}")


def _flow_unchecked(bus: BusState, s: Ticks) -> None:
    """Advance all states by s ticks assuming no jump occurs strictly inside."""
    if s == 0:
        return
    for n, st in bus.states.items():
        on_bus = bus.bus_id == n
        if st.r > 0:
            st.o += s
            stage = stage_of(st, is_on_bus=on_bus)
            if stage in _PREP_STAGES or on_bus:
                st.r -= s
        if st.d is not None:
            st.d -= s
    bus.now += s


def flow(bus: BusState, s: Ticks) -> BusState:
    """Pure flow of the state vector by s ticks.

    d decreases at unit rate; r decreases only in the preparing/transmitting
    stages; o increases while the active instance is unfinished. Raises if s
    would step over a significant moment.
    """
    if s < 0:
        raise PreconditionError("flow requires s >= 0")
    bound, _ = next_significant_moment(bus)
    if bound is not None and s > bound:
        raise PreconditionError(f"flow of {s} ticks exceeds the significant-moment bound {bound}")
    out = bus.copy()
    _flow_unchecked(out, s)
    return out


def next_significant_moment(bus: BusState) -> tuple[Ticks | None, list[TimedEvent]]:
    """Ticks until the next jump, and the trigger events occurring there.

    Three candidates are combined: remaining occupancy of the bus owner,
    the earliest preparation completion, and the earliest instance arrival.
    Returns (None, []) when nothing is pending (all chains dormant forever).
    """
    best: Ticks | None = None

    # Remaining bus occupancy of the transmitting chain.
    if bus.bus_id != 0:
        st = bus.states[bus.bus_id]
        p = st.params
        tail = p.I2 + p.C2
        remaining = st.r - tail if st.r - p.C2 > 0 else st.r
        best = remaining

    # Remaining preparation of chains in S1/S4; waiting chains are excluded
    # (their residue is frozen, arbitration handles them).
    for n in sorted(bus.states):
        st = bus.states[n]
        if bus.bus_id == n or st.r == 0:
            continue
        p = st.params
        stage = stage_of(st, is_on_bus=False)
        if stage is Stage.S1_PREP_SENSOR:
            remaining = st.r - (p.C1 + p.I2 + p.C2)
        elif stage is Stage.S4_PREP_CONTROL:
            remaining = st.r - p.C2
        else:
            continue
        if best is None or remaining < best:
            best = remaining

    # Earliest arrival.
    for st in bus.states.values():
        if st.d is not None and (best is None or st.d < best):
            best = st.d

    if best is None:
        return None, []

    at = bus.now + best
    causes: list[TimedEvent] = []
    if bus.bus_id != 0:
        st = bus.states[bus.bus_id]
        p = st.params
        remaining = st.r - (p.I2 + p.C2) if st.r - p.C2 > 0 else st.r
        if remaining == best:
            sub = 1 if st.r - p.C2 > 0 else 2
            kind = EventKind.SENSOR_TX_END if sub == 1 else EventKind.CONTROL_TX_END
            causes.append(TimedEvent(at, kind, bus.bus_id, st.k))
    for n in sorted(bus.states):
        st = bus.states[n]
        if bus.bus_id == n or st.r == 0:
            continue
        stage = stage_of(st, is_on_bus=False)
        if stage is Stage.S1_PREP_SENSOR:
            if st.r - (st.params.C1 + st.params.I2 + st.params.C2) == best:
                causes.append(TimedEvent(at, EventKind.PREP_END, n, st.k, sub=1))
        elif stage is Stage.S4_PREP_CONTROL:
            if st.r - st.params.C2 == best:
                causes.append(TimedEvent(at, EventKind.PREP_END, n, st.k, sub=2))
    for n in sorted(bus.states):
        st = bus.states[n]
        if st.d == best:
            causes.append(TimedEvent(at, EventKind.ARRIVAL, n, st.k + 1))
    return best, causes


def arbitrate(bus: BusState) -> int:
    """Chain granted the idle bus: smallest applicable priority among waiters.

    Chains waiting for the sensor slot contend with P1, chains waiting for the
    control slot with P2. Returns 0 when no chain is waiting.
    """
    if bus.bus_id != 0:
        raise PreconditionError("arbitrate requires an idle bus")
    winner = 0
    winner_prio: int | None = None
    for n in sorted(bus.states):
        st = bus.states[n]
        if st.r == 0:
            continue
        stage = stage_of(st, is_on_bus=False)
        if stage is Stage.S2_WAIT_SENSOR:
            prio = st.params.P1
        elif stage is Stage.S5_WAIT_CONTROL:
            prio = st.params.P2
        else:
            continue
        if winner_prio is None or prio < winner_prio:
            winner, winner_prio = n, prio
        elif prio == winner_prio:
            raise ModelCorruptionError(f"duplicate priority {prio} between chains {winner} and {n}")
    return winner


def _grant(bus: BusState, emitted: list[TimedEvent]) -> None:
    winner = arbitrate(bus)
    if winner == 0:
        return
    st = bus.states[winner]
    sub = 1 if stage_of(st, is_on_bus=False) is Stage.S2_WAIT_SENSOR else 2
    bus.bus_id = winner
    emitted.append(TimedEvent(bus.now, EventKind.BUS_GRANT, winner, st.k, sub=sub))


def apply_jumps(bus: BusState, causes: list[TimedEvent],
                specs: dict[int, MessageChainSpec]) -> list[TimedEvent]:
    """Process all coincident jumps at the current instant, in place.

    Fixed order: transmission completions, preparation completions, arrivals
    (deadline-miss check first), then arbitration; same-kind triggers by
    ascending chain id. Zero-length stages cascade within the same instant.
    Returns the emitted events.
    """
    now = bus.now
    emitted: list[TimedEvent] = []

    def finish_control(st: ChainState, n: int) -> None:
        if st.r != 0:
            raise ModelCorruptionError(f"chain {n}: control completion with residue {st.r}")
        emitted.append(TimedEvent(now, EventKind.CONTROL_TX_END, n, st.k))

    # 1. Transmission completion frees the bus.
    for cause in causes:
        if cause.kind not in (EventKind.SENSOR_TX_END, EventKind.CONTROL_TX_END):
            continue
        n = cause.chain
        if bus.bus_id != n:
            raise ModelCorruptionError(f"completion for chain {n} but bus owner is {bus.bus_id}")
        st = bus.states[n]
        bus.bus_id = 0
        if cause.kind is EventKind.SENSOR_TX_END:
            p = st.params
            if st.r != p.I2 + p.C2:
                raise ModelCorruptionError(f"chain {n}: sensor completion with residue {st.r}")
            emitted.append(TimedEvent(now, EventKind.SENSOR_TX_END, n, st.k))
            if p.I2 == 0:
                emitted.append(TimedEvent(now, EventKind.PREP_END, n, st.k, sub=2))
                if p.C2 == 0:
                    finish_control(st, n)
        else:
            finish_control(st, n)

    # 2. Preparation completions (the residue already sits on the boundary).
    for cause in sorted((c for c in causes if c.kind is EventKind.PREP_END),
                        key=lambda c: c.chain):
        st = bus.states[cause.chain]
        emitted.append(TimedEvent(now, EventKind.PREP_END, cause.chain, st.k, sub=cause.sub))
        if cause.sub == 2 and st.params.C2 == 0:
            finish_control(st, cause.chain)

    # 3. Arrivals: abort a stale instance, then reset per the new segment.
    for cause in sorted((c for c in causes if c.kind is EventKind.ARRIVAL),
                        key=lambda c: c.chain):
        n = cause.chain
        st = bus.states[n]
        if st.d != 0:
            raise ModelCorruptionError(f"chain {n}: arrival cause with deadline {st.d}")
        if st.r > 0:
            emitted.append(TimedEvent(now, EventKind.DEADLINE_MISS, n, st.k))
            if bus.bus_id == n:
                bus.bus_id = 0
            st.r = 0
        p = specs[n].params_at(now)
        if p.active:
            st.k += 1
            st.params = p
            st.d = p.T
            st.r = p.work
            st.o = 0
            emitted.append(TimedEvent(now, EventKind.ARRIVAL, n, st.k))
            if p.I1 == 0:
                emitted.append(TimedEvent(now, EventKind.PREP_END, n, st.k, sub=1))
        else:
            nxt = specs[n].next_activation_after(now)
            st.d = None if nxt is None else nxt - now

    # 4. Arbitration over the waiting chains.
    if bus.bus_id == 0:
        _grant(bus, emitted)
    return emitted


def initial_state(specs: list[MessageChainSpec], now: Ticks = 0) -> BusState:
    """State with every chain dormant and its first arrival pending."""
    states: dict[int, ChainState] = {}
    for spec in specs:
        if spec.first_arrival < now:
            raise PreconditionError(
                f"chain {spec.chain_id}: first arrival {spec.first_arrival} is before {now}")
        states[spec.chain_id] = ChainState(
            d=spec.first_arrival - now, r=0, o=0, k=0,
            params=spec.params_at(spec.first_arrival))
    return BusState(now=now, bus_id=0, states=states)


def simulate_hybrid(specs: list[MessageChainSpec], from_state: BusState,
                    until: Ticks, probe=None) -> tuple[BusState, EventTrace]:
    """Run the hybrid model over [from_state.now, until].

    Jumps at t <= until are processed; the returned state is flowed exactly to
    ``until``. ``probe(state, causes)``, when given, is called at every
    significant moment after flowing and before the jumps, i.e. on the
    left-limit state. Deterministic: identical inputs give identical traces.
    """
    if until < from_state.now:
        raise PreconditionError("simulation horizon ends before it starts")
    spec_map = {s.chain_id: s for s in specs}
    if set(spec_map) != set(from_state.states):
        raise PreconditionError("state and spec chain sets differ")
    bus = from_state.copy()
    trace: EventTrace = []

    # A state built from observations may pair an idle bus with waiting
    # chains; a real bus grants immediately, so normalize before flowing.
    if bus.bus_id == 0:
        _grant(bus, trace)

    zero_steps = 0
    while True:
        step, causes = next_significant_moment(bus)
        if step is None or bus.now + step > until:
            _flow_unchecked(bus, until - bus.now)
            break
        if step == 0:
            # Only the very first moment of a run may coincide with `now`;
            # after a jump the engine always makes progress.
            zero_steps += 1
            if zero_steps > 1:
                raise ModelCorruptionError(f"no progress at t={bus.now}")
        else:
            zero_steps = 0
        _flow_unchecked(bus, step)
        if probe is not None:
            probe(bus, causes)
        trace.extend(apply_jumps(bus, causes, spec_map))
        if bus.now == until:
            break
    return bus, trace
