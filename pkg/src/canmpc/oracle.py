"""Brute-force reference simulator and trace comparison.

The oracle advances global time one quantum at a time and re-derives what
happens from the protocol rules alone: arrivals start instances, preparation
consumes node-local time unconditionally, ready messages contend for the bus
whenever it is free, the lowest priority value wins, and transmission is
non-preemptive. It shares only the event vocabulary and the chain-parameter
records with the hybrid engine, none of its formulas. Deliberately naive:
cost is proportional to horizon / quantum.
"""
from __future__ import annotations

from dataclasses import dataclass

from .chains import MessageChainSpec, Ticks
from .events import EventKind, EventTrace, TimedEvent

# Phase codes of the per-chain state machine.
_PREP1, _WAIT1, _TX1, _PREP2, _WAIT2, _TX2, _DONE = range(7)

_NEVER = -1


def simulate_oracle(specs: list[MessageChainSpec], until: Ticks) -> EventTrace:
    """Tick-by-tick trace over [0, until] with the same event vocabulary
    and tie order as the hybrid engine: completions, preparation ends,
    arrivals, then arbitration, ascending chain id within a kind."""
    order = sorted(range(len(specs)), key=lambda i: specs[i].chain_id)
    chains = [specs[i] for i in order]
    n = len(chains)
    ids = [c.chain_id for c in chains]

    phase = [_DONE] * n
    rem = [0] * n            # ticks left in the current prep phase
    k = [0] * n
    arrive = [c.first_arrival if c.first_arrival <= until else _NEVER for c in chains]
    # per-instance parameters, frozen at arrival
    pI1 = [0] * n
    pI2 = [0] * n
    pC1 = [0] * n
    pC2 = [0] * n
    pP1 = [0] * n
    pP2 = [0] * n

    bus = -1                 # index into the chain arrays, -1 = idle
    tx_rem = 0
    events: EventTrace = []
    append = events.append
    rng = range(n)

    for t in range(0, until + 1):
        # 1. end of transmission
        if bus >= 0 and tx_rem == 0:
            i = bus
            bus = -1
            if phase[i] == _TX1:
                append(TimedEvent(t, EventKind.SENSOR_TX_END, ids[i], k[i]))
                if pI2[i] > 0:
                    phase[i] = _PREP2
                    rem[i] = pI2[i]
                else:
                    append(TimedEvent(t, EventKind.PREP_END, ids[i], k[i], sub=2))
                    if pC2[i] > 0:
                        phase[i] = _WAIT2
                    else:
                        append(TimedEvent(t, EventKind.CONTROL_TX_END, ids[i], k[i]))
                        phase[i] = _DONE
            else:
                append(TimedEvent(t, EventKind.CONTROL_TX_END, ids[i], k[i]))
                phase[i] = _DONE

        # 2. end of preparation
        for i in rng:
            p = phase[i]
            if (p == _PREP1 or p == _PREP2) and rem[i] == 0:
                if p == _PREP1:
                    append(TimedEvent(t, EventKind.PREP_END, ids[i], k[i], sub=1))
                    phase[i] = _WAIT1
                else:
                    append(TimedEvent(t, EventKind.PREP_END, ids[i], k[i], sub=2))
                    if pC2[i] > 0:
                        phase[i] = _WAIT2
                    else:
                        append(TimedEvent(t, EventKind.CONTROL_TX_END, ids[i], k[i]))
                        phase[i] = _DONE

        # 3. arrivals: a stale instance is aborted, then the new one starts
        for i in rng:
            if arrive[i] != t:
                continue
            if phase[i] != _DONE:
                append(TimedEvent(t, EventKind.DEADLINE_MISS, ids[i], k[i]))
                if bus == i:
                    bus = -1
            p = chains[i].params_at(t)
            if p.active:
                k[i] += 1
                pI1[i], pC1[i], pI2[i], pC2[i] = p.I1, p.C1, p.I2, p.C2
                pP1[i], pP2[i] = p.P1, p.P2
                append(TimedEvent(t, EventKind.ARRIVAL, ids[i], k[i]))
                if p.I1 > 0:
                    phase[i] = _PREP1
                    rem[i] = p.I1
                else:
                    append(TimedEvent(t, EventKind.PREP_END, ids[i], k[i], sub=1))
                    phase[i] = _WAIT1
                arrive[i] = t + p.T
            else:
                phase[i] = _DONE
                nxt = chains[i].next_activation_after(t)
                arrive[i] = _NEVER if nxt is None else nxt

        # 4. arbitration
        if bus < 0:
            best = -1
            best_prio = 0
            for i in rng:
                p = phase[i]
                if p == _WAIT1:
                    prio = pP1[i]
                elif p == _WAIT2:
                    prio = pP2[i]
                else:
                    continue
                if best < 0 or prio < best_prio:
                    best, best_prio = i, prio
            if best >= 0:
                if phase[best] == _WAIT1:
                    append(TimedEvent(t, EventKind.BUS_GRANT, ids[best], k[best], sub=1))
                    phase[best] = _TX1
                    tx_rem = pC1[best]
                else:
                    append(TimedEvent(t, EventKind.BUS_GRANT, ids[best], k[best], sub=2))
                    phase[best] = _TX2
                    tx_rem = pC2[best]
                bus = best

        if t == until:
            break

        # advance one quantum
        if bus >= 0:
            tx_rem -= 1
        for i in rng:
            p = phase[i]
            if p == _PREP1 or p == _PREP2:
                rem[i] -= 1

    return events


@dataclass(frozen=True)
class Discrepancy:
    """One difference between two traces."""

    reason: str              # "time_shift" | "missing" | "extra" | "order"
    kind: EventKind
    chain: int
    k: int
    sub: int
    at_a: Ticks | None
    at_b: Ticks | None

    @property
    def delta(self) -> Ticks | None:
        if self.at_a is None or self.at_b is None:
            return None
        return self.at_b - self.at_a

    def __str__(self) -> str:
        label = f"{self.kind.value}(chain={self.chain}, k={self.k}, sub={self.sub})"
        if self.reason == "time_shift":
            return f"{label} shifted by {self.delta} ticks ({self.at_a} -> {self.at_b})"
        if self.reason == "missing":
            return f"{label} at {self.at_a} missing from second trace"
        if self.reason == "extra":
            return f"{label} at {self.at_b} only in second trace"
        return f"{label} ordered differently around t={self.at_a}"


def diff_traces(a: EventTrace, b: EventTrace) -> list[Discrepancy]:
    """Ordered mismatches between two traces; empty iff the traces are equal.

    Events are matched by identity (kind, chain, k, sub); a matched pair at
    different times is a shift, unmatched events are missing/extra. Identical
    multisets emitted in a different sequence are reported as an order
    discrepancy.
    """
    if a == b:
        return []
    times_a = {e.key(): e.at for e in a}
    times_b = {e.key(): e.at for e in b}
    out: list[Discrepancy] = []
    for e in a:
        tb = times_b.get(e.key())
        if tb is None:
            out.append(Discrepancy("missing", e.kind, e.chain, e.k, e.sub, e.at, None))
        elif tb != e.at:
            out.append(Discrepancy("time_shift", e.kind, e.chain, e.k, e.sub, e.at, tb))
    for e in b:
        if e.key() not in times_a:
            out.append(Discrepancy("extra", e.kind, e.chain, e.k, e.sub, None, e.at))
    if not out:
        first = next(i for i, (x, y) in enumerate(zip(a, b)) if x != y)
        e = a[first]
        out.append(Discrepancy("order", e.kind, e.chain, e.k, e.sub, e.at, e.at))
    out.sort(key=lambda d: (d.at_a if d.at_a is not None else d.at_b, d.chain, d.k))
    return out
