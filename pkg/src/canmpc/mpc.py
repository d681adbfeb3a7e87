"""Event-triggered MPC with delay constraints taken from the timing model.

The control of one loop is piecewise constant: command mu[j] applies from the
completion of instance j's control message to the completion of the next one.
Predicting those completion instants online turns the controller design into a
finite-dimensional convex quadratic program over [mu[1] .. mu[K]], solved by
projected gradient descent under box constraints on u.

Delay prediction runs the hybrid timing model forward from the (estimated)
bus state: the delay of instance j is the frozen delay state read just before
the next instance arrives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .chains import MessageChainSpec, Ticks
from .errors import PreconditionError, SchedulabilityError
from .events import EventKind
from .hybrid import BusState, simulate_hybrid


@dataclass(frozen=True)
class PlantModel:
    """Continuous LTI plant: dx/dt = A x + B u, y = C x."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
            raise PreconditionError(
                f"inconsistent plant dimensions A{A.shape} B{B.shape} C{C.shape}")
        for name, mat in (("A", A), ("B", B), ("C", C)):
            if not np.all(np.isfinite(mat)):
                raise PreconditionError(f"plant matrix {name} has non-finite entries")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


def _check_psd(name: str, q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if not np.allclose(q, q.T, atol=1e-12):
        raise PreconditionError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(q).min() < -1e-10:
        raise PreconditionError(f"{name} must be positive semidefinite")
    return q


@dataclass(frozen=True)
class MpcProblem:
    """Weights, horizon, constraint sets, and reference of one loop's MPC.

    ``reference`` maps absolute time in seconds to the p-vector the output
    should track. State bounds, when given, are enforced as a quadratic soft
    penalty with weight ``x_penalty``; input bounds are exact.
    """

    Q1: np.ndarray
    Q2: np.ndarray
    Q3: np.ndarray
    Tp: float
    u_min: np.ndarray
    u_max: np.ndarray
    reference: Callable[[float], np.ndarray]
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    x_penalty: float = 1e3
    quad_step_us: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "Q1", _check_psd("Q1", self.Q1))
        object.__setattr__(self, "Q2", _check_psd("Q2", self.Q2))
        object.__setattr__(self, "Q3", _check_psd("Q3", self.Q3))
        lo = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        hi = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        if np.any(lo > hi):
            raise PreconditionError("u_min exceeds u_max")
        object.__setattr__(self, "u_min", lo)
        object.__setattr__(self, "u_max", hi)
        if self.Tp <= 0:
            raise PreconditionError("prediction horizon must be positive")
        if self.quad_step_us <= 0:
            raise PreconditionError("quadrature step must be positive")


@dataclass(frozen=True)
class DelaySchedule:
    """Per-instance delays and actuation boundaries within one horizon.

    ``arrivals[j]`` is the (estimated) sampling instant of instance j and
    ``delays[j]`` its sampling-to-actuation delay, both in ticks; the policy's
    j-th command applies from arrivals[j] + delays[j]. ``fallbacks`` counts
    trailing instances whose completion fell beyond the horizon and reused the
    last fully predicted delay (or the no-contention bound).
    """

    chain_id: int
    t0: Ticks
    horizon: Ticks
    arrivals: tuple[Ticks, ...]
    delays: tuple[Ticks, ...]
    lower_bound: Ticks
    quantum_us: int = 1
    fallbacks: int = 0

    def __post_init__(self):
        if len(self.arrivals) != len(self.delays) or not self.arrivals:
            raise PreconditionError("schedule needs matching, non-empty arrival/delay lists")
        bounds = self.boundaries()
        if any(b >= c for b, c in zip(bounds, bounds[1:])):
            raise PreconditionError(f"actuation boundaries not increasing: {bounds}")
        if any(d < self.lower_bound for d in self.delays):
            raise PreconditionError("a delay undercuts the no-contention lower bound")

    @property
    def K(self) -> int:
        return len(self.arrivals)

    def boundaries(self) -> list[Ticks]:
        return [a + d for a, d in zip(self.arrivals, self.delays)]

    def boundary_offsets_us(self) -> list[int]:
        """Actuation instants relative to t0, in microseconds."""
        return [(b - self.t0) * self.quantum_us for b in self.boundaries()]


@dataclass(frozen=True)
class ControlPolicy:
    """Solved piecewise-constant commands mu[1..K] (row j is command j+...)."""

    values: np.ndarray          # shape (K, m)
    cost: float
    converged: bool
    iterations: int
    cost_history: tuple[float, ...] = ()

    @property
    def K(self) -> int:
        return self.values.shape[0]


def predict_delays(specs: list[MessageChainSpec], bus_estimate: BusState,
                   chain_id: int, t0: Ticks, horizon: Ticks,
                   quantum_us: int = 1) -> DelaySchedule:
    """Delays of every instance of ``chain_id`` sampled in [t0, t0+horizon).

    Runs the hybrid model from the given (typically estimated) state and reads
    the delay state just before each subsequent arrival; an instance whose
    completion falls past the horizon reuses the last fully predicted delay,
    or the no-contention bound when there is none. Any predicted deadline miss
    is surfaced as a schedulability error.
    """
    if chain_id not in bus_estimate.states:
        raise PreconditionError(f"no estimated state for chain {chain_id}")
    until = t0 + horizon
    if until < bus_estimate.now:
        raise PreconditionError("prediction horizon ends before the current time")
    sub_specs = [s for s in specs if s.chain_id in bus_estimate.states]

    closures: list[tuple[Ticks, Ticks, Ticks]] = []

    def probe(state: BusState, causes) -> None:
        for cause in causes:
            if cause.kind is EventKind.ARRIVAL and cause.chain == chain_id:
                st = state.states[chain_id]
                closures.append((state.now, st.o, st.r))

    final, trace = simulate_hybrid(sub_specs, bus_estimate, until, probe=probe)

    for event in trace:
        if event.kind is EventKind.DEADLINE_MISS:
            raise SchedulabilityError(
                f"predicted deadline miss for chain {event.chain} at t={event.at}")
    for _, _, residue in closures:
        if residue > 0:
            raise SchedulabilityError(f"chain {chain_id} predicted to miss its deadline")

    arrivals = [t0] + [e.at for e in trace
                       if e.kind is EventKind.ARRIVAL and e.chain == chain_id]
    arrivals = [a for a in arrivals if a < until]
    work = bus_estimate.states[chain_id].params.work

    delays: list[Ticks] = []
    fallbacks = 0
    for j, _ in enumerate(arrivals):
        if j < len(closures):
            delays.append(closures[j][1])
        else:
            st = final.states[chain_id]
            if st.r == 0 and st.o >= work:
                delays.append(st.o)
            else:
                delays.append(delays[-1] if delays else work)
                fallbacks += 1
    return DelaySchedule(chain_id, t0, horizon, tuple(arrivals), tuple(delays),
                         lower_bound=work, quantum_us=quantum_us, fallbacks=fallbacks)


def discretize_segment(plant: PlantModel, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization over a step of h seconds.

    Uses the augmented-matrix exponential exp([[A,B],[0,0]] h), whose top
    blocks are Ad and the input integral Bd; accurate to machine precision
    (well inside 1e-10 relative).
    """
    if h <= 0:
        raise PreconditionError("discretization step must be positive")
    n, m = plant.n, plant.m
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = plant.A * h
    aug[:n, n:] = plant.B * h
    E = expm(aug)
    Ad, Bd = E[:n, :n], E[:n, n:]
    if not (np.all(np.isfinite(Ad)) and np.all(np.isfinite(Bd))):
        raise PreconditionError("non-finite discretization (step too large for this plant)")
    return Ad, Bd


class _CostModel:
    """Shared quadrature grid and propagators behind cost and solver.

    The grid is the union of uniform quadrature steps and the actuation
    boundaries, built in integer microseconds so coincident points dedupe
    exactly. Within a cell the control is constant and the state propagates
    exactly via the discretized dynamics, so the trapezoid sum is a quadratic
    function of the commands.
    """

    def __init__(self, plant: PlantModel, problem: MpcProblem,
                 schedule: DelaySchedule, t0_abs_sec: float):
        self.plant, self.problem = plant, problem
        tp_us = round(problem.Tp * 1e6)
        bounds = [b for b in schedule.boundary_offsets_us() if 0 < b < tp_us]
        pts = set(range(0, tp_us + 1, problem.quad_step_us))
        pts.add(tp_us)
        pts.update(bounds)
        self.grid_us = sorted(pts)
        self.K = schedule.K
        offsets = schedule.boundary_offsets_us()
        # control index per cell: 0 = held previous command, j = mu[j]
        self.cell_ctrl: list[int] = []
        for left in self.grid_us[:-1]:
            idx = 0
            for j, b in enumerate(offsets, start=1):
                if b <= left:
                    idx = j
            self.cell_ctrl.append(idx)
        self.t0_abs = t0_abs_sec
        self._disc: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        # trapezoid weights per grid point, in seconds
        hs = np.diff(np.asarray(self.grid_us, dtype=float)) * 1e-6
        w = np.zeros(len(self.grid_us))
        w[:-1] += hs / 2
        w[1:] += hs / 2
        self.weights = w
        self.cell_h = hs
        self.lambdas = np.array(
            [np.atleast_1d(problem.reference(self.t0_abs + g * 1e-6))
             for g in self.grid_us], dtype=float)

    def _step(self, h_us: int) -> tuple[np.ndarray, np.ndarray]:
        got = self._disc.get(h_us)
        if got is None:
            got = discretize_segment(self.plant, h_us * 1e-6)
            self._disc[h_us] = got
        return got

    def trajectory(self, mu: np.ndarray, x0: np.ndarray,
                   u_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """States at grid points and the control vector of each cell."""
        n_pts = len(self.grid_us)
        xs = np.zeros((n_pts, self.plant.n))
        us = np.zeros((len(self.cell_ctrl), self.plant.m))
        xs[0] = x0
        for c in range(n_pts - 1):
            idx = self.cell_ctrl[c]
            u = u_prev if idx == 0 else mu[idx - 1]
            us[c] = u
            Ad, Bd = self._step(self.grid_us[c + 1] - self.grid_us[c])
            xs[c + 1] = Ad @ xs[c] + Bd @ u
        return xs, us

    def cost_of_trajectory(self, xs: np.ndarray, us: np.ndarray) -> float:
        pb = self.problem
        err = self.lambdas - xs @ self.plant.C.T
        j = float(np.einsum("i,ij,jk,ik->", self.weights, err, pb.Q1, err))
        j += float(np.einsum("i,ij,jk,ik->", self.cell_h, us, pb.Q2, us))
        j += float(xs[-1] @ pb.Q3 @ xs[-1])
        j += self._penalty(xs)
        return j

    def _penalty(self, xs: np.ndarray) -> float:
        pb = self.problem
        if pb.x_min is None and pb.x_max is None:
            return 0.0
        v = 0.0
        if pb.x_max is not None:
            over = np.maximum(0.0, xs - np.asarray(pb.x_max, dtype=float))
            v += float(self.weights @ np.sum(over * over, axis=1))
        if pb.x_min is not None:
            under = np.maximum(0.0, np.asarray(pb.x_min, dtype=float) - xs)
            v += float(self.weights @ np.sum(under * under, axis=1))
        return pb.x_penalty * v

    def _penalty_grad(self, xs: np.ndarray, sens: np.ndarray) -> np.ndarray:
        pb = self.problem
        dims = sens.shape[2]
        if pb.x_min is None and pb.x_max is None:
            return np.zeros(dims)
        resid = np.zeros_like(xs)
        if pb.x_max is not None:
            resid += np.maximum(0.0, xs - np.asarray(pb.x_max, dtype=float))
        if pb.x_min is not None:
            resid -= np.maximum(0.0, np.asarray(pb.x_min, dtype=float) - xs)
        return 2.0 * pb.x_penalty * np.einsum("i,ij,ijl->l", self.weights, resid, sens)

    def quadratic(self, x0: np.ndarray, u_prev: np.ndarray):
        """J as const + g.mu + mu.H.mu/2 plus the state-sensitivity stack.

        Valid for the quadratic part of the cost; the soft state penalty is
        handled separately through the same sensitivities.
        """
        plant, pb = self.plant, self.problem
        K, m, dims = self.K, plant.m, self.K * plant.m
        base_x, base_u = self.trajectory(np.zeros((K, m)), x0, u_prev)
        n_pts = len(self.grid_us)
        sens = np.zeros((n_pts, plant.n, dims))
        u_sens = np.zeros((len(self.cell_ctrl), m, dims))
        zero_x = np.zeros(plant.n)
        zero_u = np.zeros(m)
        for l in range(dims):
            mu = np.zeros((K, m))
            mu[l // m, l % m] = 1.0
            xs, us = self.trajectory(mu, zero_x, zero_u)
            sens[:, :, l] = xs
            u_sens[:, :, l] = us

        err0 = self.lambdas - base_x @ plant.C.T           # (pts, p)
        V = np.einsum("pk,ikl->ipl", plant.C, sens)        # (pts, p, dims)
        H = 2.0 * np.einsum("i,ipl,pq,iqr->lr", self.weights, V, pb.Q1, V)
        g = -2.0 * np.einsum("i,ipl,pq,iq->l", self.weights, V, pb.Q1, err0)
        const = float(np.einsum("i,ip,pq,iq->", self.weights, err0, pb.Q1, err0))

        H += 2.0 * np.einsum("c,cml,mq,cqr->lr", self.cell_h, u_sens, pb.Q2, u_sens)
        g += 2.0 * np.einsum("c,cml,mq,cq->l", self.cell_h, u_sens, pb.Q2, base_u)
        const += float(np.einsum("c,cm,mq,cq->", self.cell_h, base_u, pb.Q2, base_u))

        SN = sens[-1]                                      # (n, dims)
        H += 2.0 * SN.T @ pb.Q3 @ SN
        g += 2.0 * SN.T @ pb.Q3 @ base_x[-1]
        const += float(base_x[-1] @ pb.Q3 @ base_x[-1])
        return H, g, const, base_x, sens


def evaluate_cost(plant: PlantModel, problem: MpcProblem, x0: np.ndarray,
                  policy: ControlPolicy | np.ndarray, schedule: DelaySchedule,
                  u_prev: np.ndarray | None = None,
                  t0_abs_sec: float = 0.0) -> float:
    """Tracking + control cost of a policy over the horizon.

    Trapezoid quadrature on the uniform grid refined with the actuation
    boundaries; the state is propagated exactly across each cell.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    mu = policy.values if isinstance(policy, ControlPolicy) else np.asarray(policy, dtype=float)
    mu = mu.reshape(schedule.K, plant.m)
    if u_prev is None:
        u_prev = np.zeros(plant.m)
    model = _CostModel(plant, problem, schedule, t0_abs_sec)
    xs, us = model.trajectory(mu, x0, np.atleast_1d(np.asarray(u_prev, dtype=float)))
    return model.cost_of_trajectory(xs, us)


def cost_gradient(plant: PlantModel, problem: MpcProblem, x0: np.ndarray,
                  policy: ControlPolicy | np.ndarray, schedule: DelaySchedule,
                  u_prev: np.ndarray | None = None,
                  t0_abs_sec: float = 0.0) -> np.ndarray:
    """Analytic gradient of evaluate_cost with respect to the flat commands."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    mu = policy.values if isinstance(policy, ControlPolicy) else np.asarray(policy, dtype=float)
    flat = mu.reshape(-1)
    if u_prev is None:
        u_prev = np.zeros(plant.m)
    model = _CostModel(plant, problem, schedule, t0_abs_sec)
    H, g, _, base_x, sens = model.quadratic(x0, np.atleast_1d(np.asarray(u_prev, dtype=float)))
    grad = H @ flat + g
    if problem.x_min is not None or problem.x_max is not None:
        xs = base_x + sens @ flat
        grad = grad + model._penalty_grad(xs, sens)
    return grad


def solve_mpc(plant: PlantModel, problem: MpcProblem, x0: np.ndarray,
              schedule: DelaySchedule, u_prev: np.ndarray | None = None,
              t0_abs_sec: float = 0.0, tol: float = 1e-8,
              max_iters: int = 10_000, keep_history: bool = False,
              mu0: np.ndarray | None = None) -> ControlPolicy:
    """Minimize the horizon cost over box-constrained commands.

    Projected gradient descent on the (convex quadratic + convex penalty)
    objective, diagonally rescaled, stepped by 1/L with an exact line search
    along the feasible direction, so the iterate cost is non-increasing.
    Stops when the projected-gradient residual drops to ``tol`` relative to
    the initial gradient magnitude (so the rule is invariant to cost scaling)
    or after ``max_iters`` iterations, returning the best iterate with a
    convergence flag either way.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if u_prev is None:
        u_prev = np.zeros(plant.m)
    u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
    K, m = schedule.K, plant.m
    dims = K * m
    model = _CostModel(plant, problem, schedule, t0_abs_sec)
    H, g, const, base_x, sens = model.quadratic(x0, u_prev)
    lo = np.tile(problem.u_min, K)
    hi = np.tile(problem.u_max, K)
    penalized = problem.x_min is not None or problem.x_max is not None

    def grad_of(mu_flat: np.ndarray) -> np.ndarray:
        grad = H @ mu_flat + g
        if penalized:
            xs = base_x + sens @ mu_flat
            grad = grad + model._penalty_grad(xs, sens)
        return grad

    def cost_of(mu_flat: np.ndarray) -> float:
        j = const + g @ mu_flat + 0.5 * mu_flat @ H @ mu_flat
        if penalized:
            xs = base_x + sens @ mu_flat
            j += model._penalty(xs)
        return float(j)

    # Lipschitz bound of the gradient, including the penalty curvature.
    eigs = np.linalg.eigvalsh((H + H.T) / 2)
    lip = float(max(eigs.max(), 0.0))
    if penalized:
        M = np.einsum("i,ijl,ijr->lr", model.weights, sens, sens)
        lip += 2.0 * problem.x_penalty * float(np.linalg.eigvalsh((M + M.T) / 2).max())

    start = np.zeros(dims) if mu0 is None else np.asarray(mu0, dtype=float).reshape(dims)
    mu = np.clip(start, lo, hi)
    if lip == 0.0:
        # cost independent of the commands: any feasible point is optimal
        values = mu.reshape(K, m)
        return ControlPolicy(values, cost_of(mu), True, 0,
                             (cost_of(mu),) if keep_history else ())

    # Diagonal rescaling evens out the huge curvature spread between early
    # and late horizon segments of unstable plants; the box is axis-aligned,
    # so projection commutes with the rescaling.
    scale = np.sqrt(np.maximum(np.diag(H), lip * 1e-12))
    Hs = H / np.outer(scale, scale)
    lip_s = float(np.linalg.eigvalsh((Hs + Hs.T) / 2).max())
    if penalized:
        Ms = M / np.outer(scale, scale)
        lip_s += 2.0 * problem.x_penalty * float(np.linalg.eigvalsh((Ms + Ms.T) / 2).max())
    step = (1.0 / lip_s) / (scale * scale)

    history: list[float] = []
    best_mu = mu.copy()
    best_cost = cost_of(mu)
    converged = False
    iters = 0
    last_improvement = 0
    threshold = tol * max(1.0, float(np.max(np.abs(grad_of(mu)))))
    for iters in range(1, max_iters + 1):
        grad = grad_of(mu)
        residual = float(np.max(np.abs(mu - np.clip(mu - grad, lo, hi))))
        if keep_history:
            history.append(cost_of(mu))
        if residual <= threshold:
            converged = True
            break
        cand = np.clip(mu - step * grad, lo, hi)
        direction = cand - mu
        # exact line search along the feasible projected-gradient direction;
        # the 1/L candidate (alpha = 1) already guarantees descent
        slope = float(grad @ direction)
        curv = float(direction @ H @ direction)
        alpha = 1.0
        if curv > 0.0 and slope < 0.0 and not penalized:
            pos = direction > 0
            neg = direction < 0
            alpha_max = np.inf
            if pos.any():
                alpha_max = min(alpha_max, float(np.min((hi[pos] - mu[pos]) / direction[pos])))
            if neg.any():
                alpha_max = min(alpha_max, float(np.min((lo[neg] - mu[neg]) / direction[neg])))
            alpha = min(max(-slope / curv, 1.0), max(alpha_max, 1.0))
        mu = mu + alpha * direction
        c = cost_of(mu)
        if c < best_cost - abs(best_cost) * 1e-14:
            best_cost, best_mu = c, mu.copy()
            last_improvement = iters
        elif c < best_cost:
            best_cost, best_mu = c, mu.copy()
        if iters - last_improvement > 100:
            # stalled at the precision floor; further iterations cannot
            # improve the returned iterate
            break
    else:
        iters = max_iters

    final_cost = cost_of(mu)
    if final_cost <= best_cost:
        best_cost, best_mu = final_cost, mu
    if keep_history:
        history.append(best_cost)
    return ControlPolicy(best_mu.reshape(K, m), best_cost, converged, iters,
                         tuple(history))


def apply_first_move(policy: ControlPolicy,
                     schedule: DelaySchedule) -> tuple[np.ndarray, Ticks | None]:
    """First command of the policy and the predicted instant it is replaced.

    The caller holds the returned command constant until the next control
    message actually completes; the returned boundary is the model's estimate
    of that instant (None when the horizon holds a single instance).
    """
    if policy.K == 0:
        raise PreconditionError("empty control policy")
    bounds = schedule.boundaries()
    hold_until = bounds[1] if len(bounds) > 1 else None
    return policy.values[0].copy(), hold_until
