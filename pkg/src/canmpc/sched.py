"""Schedulability tests and the constant worst-case delay baseline.

A chain is instantaneously schedulable when its remaining work fits before its
next arrival (r <= d). Checking this at the left limit of every significant
moment certifies a whole window, because d - r is non-increasing between
moments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .chains import MessageChainSpec, Ticks
from .errors import PreconditionError, SchedulabilityError
from .events import EventKind
from .hybrid import BusState, ChainState, initial_state, simulate_hybrid


@dataclass(frozen=True)
class SchedVerdict:
    schedulable: bool
    first_violation: tuple[int, Ticks] | None   # (chain_id, time)
    margin: Ticks | float                       # min of d - r; +inf when vacuous

    def __str__(self) -> str:
        if self.schedulable:
            return f"schedulable (margin {self.margin})"
        chain, at = self.first_violation
        return f"NOT schedulable: chain {chain} misses at t={at} (margin {self.margin})"


def instantaneous_check(state: ChainState) -> bool:
    """r <= d at one instant; dormant chains are trivially schedulable."""
    return state.d is None or state.r <= state.d


def window_check(specs: list[MessageChainSpec], from_state: BusState,
                 until: Ticks) -> SchedVerdict:
    """Evaluate the instantaneous test at every significant moment's left limit."""
    margin: Ticks | float = math.inf
    violation: tuple[int, Ticks] | None = None

    def probe(state: BusState, causes) -> None:
        nonlocal margin, violation
        for n in sorted(state.states):
            st = state.states[n]
            if st.d is None:
                continue
            m = st.d - st.r
            if m < margin:
                margin = m
            if m < 0 and violation is None:
                violation = (n, state.now)

    simulate_hybrid(specs, from_state, until, probe=probe)
    return SchedVerdict(schedulable=violation is None,
                        first_violation=violation, margin=margin)


def worst_case_delay(specs: list[MessageChainSpec], chain_id: int,
                     probe_horizon: Ticks) -> Ticks:
    """Largest observed sampling-to-completion delay over a probe run.

    Runs the nominal message set from time zero and takes the maximum of
    gamma - alpha over the chain's instances completing within the horizon.
    Serves as the constant delay of the offline baseline strategy.
    """
    _, trace = simulate_hybrid(specs, initial_state(specs), probe_horizon)
    alphas: dict[int, Ticks] = {}
    worst: Ticks | None = None
    for event in trace:
        if event.kind is EventKind.DEADLINE_MISS:
            raise SchedulabilityError(
                f"deadline miss for chain {event.chain} at t={event.at}: "
                "the baseline needs a schedulable nominal set")
        if event.chain != chain_id:
            continue
        if event.kind is EventKind.ARRIVAL:
            alphas[event.k] = event.at
        elif event.kind is EventKind.CONTROL_TX_END and event.k in alphas:
            delay = event.at - alphas[event.k]
            if worst is None or delay > worst:
                worst = delay
    if worst is None:
        raise PreconditionError(
            f"chain {chain_id} completes no instance within {probe_horizon} ticks")
    return worst
