"""Closed-loop co-simulation: plants, bus, observers, and MPC controllers.

Message lengths do not depend on the control values, so the bus schedule of a
run is fixed by the scenario alone. The harness therefore simulates the bus
once and replays its event trace: each arrival samples the plant, each sensor
reception triggers the loop's controller (observer update, delay prediction,
MPC solve), and each control reception applies the stored first command to the
actuator, which holds it until the next one.

Two delay-prediction strategies are supported: a constant worst-case delay
probed offline on the nominal message set, and online prediction through the
timing model driven by the observer estimates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chains import MessageChainSpec, Ticks
from .errors import PreconditionError, SchedulabilityError
from .events import EventKind, EventTrace, TimedEvent
from .hybrid import initial_state, simulate_hybrid
from .mpc import (ControlPolicy, DelaySchedule, PlantModel, apply_first_move,
                  discretize_segment, predict_delays, solve_mpc)
from .observer import BusObserver
from .scenario import LoopSetup, ScenarioConfig, nominal_specs, ticks_to_ms
from .sched import worst_case_delay

SIGNAL_STEP_US = 1000   # sampling of the emitted signal traces


@dataclass
class InstanceRecord:
    chain_id: int
    k: int
    alpha: Ticks
    beta: Ticks | None = None
    gamma: Ticks | None = None
    predicted_delta: Ticks | None = None

    @property
    def delta(self) -> Ticks | None:
        return None if self.gamma is None else self.gamma - self.alpha


@dataclass
class LoopResult:
    chain_id: int
    tracking_cost: float = 0.0
    records: list[InstanceRecord] = field(default_factory=list)
    # (time, command, plant state at that time); the state anchors the signal
    # replay, which would otherwise amplify roundoff over long unstable runs
    actuations: list[tuple[Ticks, np.ndarray, np.ndarray]] = field(default_factory=list)
    unconverged_solves: int = 0
    epsilons: list[tuple[int, Ticks]] = field(default_factory=list)  # (k, alpha_hat - alpha)


@dataclass
class RunReport:
    strategy: str
    horizon: Ticks
    quantum_us: int
    loops: dict[int, LoopResult]
    trace: EventTrace
    deadline_misses: list[TimedEvent]
    prediction_failures: int
    signals: dict[int, np.ndarray]          # per loop: columns t_sec, y..., ref..., u...
    hybrid_wall_s: float | None = None
    oracle_wall_s: float | None = None

    @property
    def schedulable(self) -> bool:
        return not self.deadline_misses


class _Plant:
    """Exact piecewise propagation of one loop's plant."""

    def __init__(self, setup: LoopSetup, quantum_us: int):
        self.setup = setup
        self.quantum_us = quantum_us
        self.x = setup.x0.copy()
        self.t = 0
        self.u = np.zeros(setup.plant.m)
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def advance_to(self, t: Ticks) -> None:
        if t < self.t:
            raise PreconditionError("plant cannot integrate backwards")
        if t == self.t:
            return
        h_us = (t - self.t) * self.quantum_us
        step = self._cache.get(h_us)
        if step is None:
            step = discretize_segment(self.setup.plant, h_us * 1e-6)
            self._cache[h_us] = step
        Ad, Bd = step
        self.x = Ad @ self.x + Bd @ self.u
        self.t = t


def _wc_schedule(chain_id: int, t0: Ticks, horizon: Ticks, T_nom: Ticks,
                 delta_wc: Ticks, work: Ticks, quantum_us: int) -> DelaySchedule:
    arrivals = []
    a = t0
    while a < t0 + horizon:
        arrivals.append(a)
        a += T_nom
    return DelaySchedule(chain_id, t0, horizon, tuple(arrivals),
                         tuple(delta_wc for _ in arrivals),
                         lower_bound=min(work, delta_wc), quantum_us=quantum_us,
                         fallbacks=0)


def run_closed_loop(cfg: ScenarioConfig, strategy: str | None = None) -> RunReport:
    """Simulate the whole scenario under one delay-prediction strategy."""
    strategy = strategy or cfg.strategy or "timing_model"
    if strategy not in ("worst_case", "timing_model"):
        raise PreconditionError(f"unknown strategy {strategy!r}")
    quantum_us = cfg.quantum_us
    qsec = quantum_us * 1e-6

    _, trace = simulate_hybrid(cfg.chains, initial_state(cfg.chains), cfg.horizon)

    observer = BusObserver(cfg.chains)
    plants = {lp.chain_id: _Plant(lp, quantum_us) for lp in cfg.loops}
    loops = {lp.chain_id: LoopResult(lp.chain_id) for lp in cfg.loops}
    for res in loops.values():
        plant = plants[res.chain_id]
        res.actuations.append((0, np.zeros(plant.setup.plant.m), plant.x.copy()))

    nominal = nominal_specs(cfg)
    nominal_by_id = {s.chain_id: s for s in nominal}
    wc_delay: dict[int, Ticks] = {}
    if strategy == "worst_case":
        for lp in cfg.loops:
            if lp.chain_id not in nominal_by_id:
                raise PreconditionError(
                    f"loop chain {lp.chain_id} absent from the nominal set")
            wc_delay[lp.chain_id] = worst_case_delay(nominal, lp.chain_id,
                                                     cfg.worst_case_probe)

    samples: dict[int, dict[int, np.ndarray]] = {lp.chain_id: {} for lp in cfg.loops}
    pending: dict[int, dict[int, np.ndarray]] = {lp.chain_id: {} for lp in cfg.loops}
    records: dict[int, dict[int, InstanceRecord]] = {lp.chain_id: {} for lp in cfg.loops}
    last_policy: dict[int, np.ndarray] = {}
    misses: list[TimedEvent] = []
    prediction_failures = 0
    bus_owner = 0

    def trigger_controller(chain_id: int, k: int, at: Ticks) -> None:
        nonlocal prediction_failures
        lp = cfg.loop(chain_id)
        res = loops[chain_id]
        rec = records[chain_id].get(k)
        x_sample = samples[chain_id].pop(k, None)
        if rec is None or x_sample is None:
            return  # instance predates the run window
        if strategy == "worst_case":
            nom = nominal_by_id[chain_id].segments[0][1]
            t0 = at - nom.I1 - nom.C1
            schedule = _wc_schedule(chain_id, t0, cfg.mpc_horizon, nom.T,
                                    wc_delay[chain_id], nom.work, quantum_us)
        else:
            bus_state, _ = observer.estimated_bus_state(at, bus_owner)
            t0 = observer.chain_estimate(chain_id, at).alpha_hat
            try:
                schedule = predict_delays(cfg.chains, bus_state, chain_id, t0,
                                          cfg.mpc_horizon, quantum_us=quantum_us)
            except SchedulabilityError:
                prediction_failures += 1
                pending[chain_id][k] = plants[chain_id].u.copy()
                return
        mu0 = None
        prev = last_policy.get(chain_id)
        if prev is not None and len(prev) > 1:
            shifted = prev[1:]
            pad = np.repeat(shifted[-1:], schedule.K - len(shifted), axis=0) \
                if schedule.K > len(shifted) else np.empty((0, shifted.shape[1]))
            mu0 = np.concatenate([shifted, pad])[:schedule.K]
        policy = solve_mpc(lp.plant, lp.problem, x_sample, schedule,
                           u_prev=plants[chain_id].u, t0_abs_sec=t0 * qsec, mu0=mu0)
        if not policy.converged:
            res.unconverged_solves += 1
        last_policy[chain_id] = policy.values
        mu1, _ = apply_first_move(policy, schedule)
        pending[chain_id][k] = mu1
        rec.predicted_delta = schedule.delays[0]

    idx = 0
    n_events = len(trace)
    while idx < n_events:
        at = trace[idx].at
        group_end = idx
        while group_end < n_events and trace[group_end].at == at:
            group_end += 1
        group = trace[idx:group_end]
        # broadcast effects first: receptions and the bus owner are known to
        # every node the instant they happen
        triggers: list[TimedEvent] = []
        for ev in group:
            observer.observe(ev)
            if ev.kind is EventKind.BUS_GRANT:
                bus_owner = ev.chain
            elif ev.kind in (EventKind.SENSOR_TX_END, EventKind.CONTROL_TX_END):
                if bus_owner == ev.chain:
                    bus_owner = 0
                if ev.chain in loops:
                    triggers.append(ev)
            elif ev.kind is EventKind.ARRIVAL and ev.chain in loops:
                plant = plants[ev.chain]
                plant.advance_to(ev.at)
                samples[ev.chain][ev.k] = plant.x.copy()
                records[ev.chain][ev.k] = InstanceRecord(ev.chain, ev.k, ev.at)
                loops[ev.chain].records.append(records[ev.chain][ev.k])
            elif ev.kind is EventKind.DEADLINE_MISS:
                misses.append(ev)
        for ev in triggers:
            rec = records[ev.chain].get(ev.k)
            if ev.kind is EventKind.SENSOR_TX_END:
                if rec is not None:
                    rec.beta = ev.at
                trigger_controller(ev.chain, ev.k, ev.at)
            else:
                plant = plants[ev.chain]
                plant.advance_to(ev.at)
                command = pending[ev.chain].pop(ev.k, None)
                if command is not None:
                    plant.u = command
                    loops[ev.chain].actuations.append((ev.at, command.copy(), plant.x.copy()))
                if rec is not None:
                    rec.gamma = ev.at
        idx = group_end

    # estimation-error log against the true sampling instants
    for lp in cfg.loops:
        true_alpha = {r.k: r.alpha for r in loops[lp.chain_id].records}
        estimates = observer.alpha_estimates(lp.chain_id)
        betas = [r for r in loops[lp.chain_id].records if r.beta is not None]
        for est, rec in zip(estimates, betas):
            loops[lp.chain_id].epsilons.append((rec.k, est.alpha_hat - true_alpha[rec.k]))

    signals = _signal_tables(cfg, loops)
    for lp in cfg.loops:
        loops[lp.chain_id].tracking_cost = _tracking_cost(cfg.loop(lp.chain_id),
                                                          signals[lp.chain_id])
    return RunReport(strategy=strategy, horizon=cfg.horizon, quantum_us=quantum_us,
                     loops=loops, trace=trace, deadline_misses=misses,
                     prediction_failures=prediction_failures, signals=signals)


def _signal_tables(cfg: ScenarioConfig, loops: dict[int, LoopResult]) -> dict[int, np.ndarray]:
    """Per-loop table [t_sec, y..., ref..., u...] on the signal grid.

    Each inter-actuation stretch is replayed from the plant state recorded at
    run time, so roundoff never compounds across the whole run on an unstable
    plant."""
    out: dict[int, np.ndarray] = {}
    quantum_us = cfg.quantum_us
    step_ticks = max(1, SIGNAL_STEP_US // quantum_us)
    for lp in cfg.loops:
        res = loops[lp.chain_id]
        anchors = res.actuations
        rows = []
        plant = _Plant(lp, quantum_us)
        for idx, (t_a, u_a, x_a) in enumerate(anchors):
            t_end = anchors[idx + 1][0] if idx + 1 < len(anchors) else cfg.horizon + 1
            first_grid = -(-t_a // step_ticks) * step_ticks   # ceil to the grid
            plant.x = x_a.copy()
            plant.t = t_a
            plant.u = u_a
            for t in range(first_grid, min(t_end, cfg.horizon + 1), step_ticks):
                plant.advance_to(t)
                y = lp.plant.C @ plant.x
                ref = np.atleast_1d(lp.problem.reference(t * quantum_us * 1e-6))
                rows.append(np.concatenate(([t * quantum_us * 1e-6], y, ref, plant.u)))
        out[lp.chain_id] = np.array(rows)
    return out


def _tracking_cost(lp: LoopSetup, table: np.ndarray) -> float:
    """Whole-run tracking + control integral on the signal grid (trapezoid)."""
    t = table[:, 0]
    p, m = lp.plant.p, lp.plant.m
    y = table[:, 1:1 + p]
    ref = table[:, 1 + p:1 + 2 * p]
    u = table[:, 1 + 2 * p:1 + 2 * p + m]
    err = ref - y
    integrand = (np.einsum("ip,pq,iq->i", err, lp.problem.Q1, err)
                 + np.einsum("im,mq,iq->i", u, lp.problem.Q2, u))
    return float(np.trapezoid(integrand, t))


@dataclass
class ComparisonReport:
    report_wc: RunReport
    report_tm: RunReport
    cost_ratio: dict[int, float]     # timing_model cost / worst_case cost per loop


def compare_strategies(cfg: ScenarioConfig) -> ComparisonReport:
    """Run both strategies on the identical scenario and compare tracking costs."""
    report_wc = run_closed_loop(cfg, strategy="worst_case")
    report_tm = run_closed_loop(cfg, strategy="timing_model")
    ratio: dict[int, float] = {}
    for cid, wc_res in report_wc.loops.items():
        tm_res = report_tm.loops[cid]
        if wc_res.tracking_cost > 0:
            ratio[cid] = tm_res.tracking_cost / wc_res.tracking_cost
        else:
            ratio[cid] = math.inf if tm_res.tracking_cost > 0 else 1.0
    return ComparisonReport(report_wc, report_tm, ratio)
