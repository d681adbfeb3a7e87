"""Chain-state estimation from bus-observable reception events.

A controller node sees every message on the bus, so it can timestamp the end
of each sensor transmission (beta) and control transmission (gamma), but it
cannot see sampling instants (alpha). The observer estimates alpha as

    alpha_hat[k] = min(alpha_hat[k-1] + T[k-1], beta[k] - C1[k] - I1[k])

seeded from the first observed beta. The estimation error is non-negative and
non-increasing over instances. From alpha_hat and the receptions it
reconstructs (d, r, o) estimates for every chain it has seen at least once;
chains never observed are reported as unknown rather than guessed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .chains import ChainParams, MessageChainSpec, Ticks
from .errors import ObservationError, PreconditionError
from .events import EventKind, TimedEvent
from .hybrid import BusState, ChainState


@dataclass(frozen=True)
class ObservedReception:
    """Reception times of one observed instance; gamma may still be pending."""

    chain_id: int
    k: int                    # 0-based count of observed instances
    beta: Ticks
    gamma: Ticks | None = None


@dataclass(frozen=True)
class AlphaEstimate:
    """Estimated sampling instant of one observed instance."""

    chain_id: int
    k: int
    alpha_hat: Ticks
    params: ChainParams       # parameters attributed to the instance


@dataclass(frozen=True)
class StateEstimate:
    """Reconstructed (d, r, o) of a chain's active instance at a query time.

    ``d_hat`` is None for a chain that is dormant with no upcoming activation.
    """

    d_hat: Ticks | None
    r_hat: Ticks
    o_hat: Ticks
    alpha_hat: Ticks
    params: ChainParams
    k_guess: int


def update_alpha(prev: AlphaEstimate | None, beta_k: Ticks,
                 params_k: ChainParams, chain_id: int | None = None) -> AlphaEstimate:
    """Fold one observed sensor-reception time into the alpha estimate."""
    direct = beta_k - params_k.C1 - params_k.I1
    if direct < 0:
        raise ObservationError(
            f"beta={beta_k} earlier than the minimum sensor latency "
            f"{params_k.C1 + params_k.I1}")
    if prev is None:
        if chain_id is None:
            raise PreconditionError("chain_id required for the first estimate")
        return AlphaEstimate(chain_id, 0, direct, params_k)
    predicted = prev.alpha_hat + prev.params.T
    return AlphaEstimate(prev.chain_id, prev.k + 1, min(predicted, direct), params_k)


def estimate_states(now: Ticks, alpha_hat: Ticks, params: ChainParams,
                    beta: Ticks | None, gamma: Ticks | None) -> tuple[Ticks, Ticks, Ticks]:
    """(d_hat, r_hat, o_hat) of the active instance at time ``now``.

    Three regimes: nothing received yet (only the sensor prep can have run,
    bounded by I1), sensor received (control prep runs from beta, bounded by
    I2), or both received (residue zero, delay frozen at gamma - alpha_hat).
    """
    if now < alpha_hat:
        raise PreconditionError(f"query at {now} precedes alpha_hat={alpha_hat}")
    d_hat = alpha_hat + params.T - now
    if d_hat < 0:
        raise ObservationError("stale estimate: the active instance was not rolled forward")
    if gamma is not None:
        if beta is None:
            raise ObservationError("gamma observed without beta")
        return d_hat, 0, gamma - alpha_hat
    if beta is not None:
        r_hat = params.I2 + params.C2 - min(now - beta, params.I2)
        return d_hat, r_hat, now - alpha_hat
    r_hat = params.work - min(now - alpha_hat, params.I1)
    return d_hat, r_hat, now - alpha_hat


def estimated_schedulable(d_hat: Ticks, r_hat: Ticks) -> bool:
    """Instantaneous schedulability on the estimated states."""
    return r_hat <= d_hat


@dataclass
class _ChainLog:
    receptions: list[ObservedReception] = field(default_factory=list)
    alphas: list[AlphaEstimate] = field(default_factory=list)


class BusObserver:
    """Stateful observer over the full reception stream of a bus.

    Pure function of the observation sequence: replaying the same events
    yields the same estimates. One observer per controller node; all nodes
    see the same broadcasts, so their estimates coincide.
    """

    def __init__(self, specs: list[MessageChainSpec]):
        self._specs = {s.chain_id: s for s in specs}
        self._logs: dict[int, _ChainLog] = {s.chain_id: _ChainLog() for s in specs}

    def observe(self, event: TimedEvent) -> None:
        """Consume one trace event; only receptions matter."""
        if event.kind is EventKind.SENSOR_TX_END:
            self._on_beta(event.chain, event.at)
        elif event.kind is EventKind.CONTROL_TX_END:
            self._on_gamma(event.chain, event.at)

    def _on_beta(self, chain_id: int, at: Ticks) -> None:
        log = self._logs[chain_id]
        spec = self._specs[chain_id]
        prev = log.alphas[-1] if log.alphas else None
        if prev is None:
            params = spec.params_at(at)
        else:
            # best available time proxy for the instance's parameter lookup
            params = spec.params_at(prev.alpha_hat + prev.params.T)
        est = update_alpha(prev, at, params, chain_id=chain_id)
        log.alphas.append(est)
        log.receptions.append(ObservedReception(chain_id, est.k, beta=at))

    def _on_gamma(self, chain_id: int, at: Ticks) -> None:
        log = self._logs[chain_id]
        if not log.receptions:
            return  # control message of an instance that predates this observer
        last = log.receptions[-1]
        if last.gamma is None:
            log.receptions[-1] = ObservedReception(chain_id, last.k, last.beta, gamma=at)

    def alpha_estimates(self, chain_id: int) -> list[AlphaEstimate]:
        return list(self._logs[chain_id].alphas)

    def receptions(self, chain_id: int) -> list[ObservedReception]:
        return list(self._logs[chain_id].receptions)

    def chain_estimate(self, chain_id: int, now: Ticks) -> StateEstimate | None:
        """Estimate for the chain's active instance, or None if never seen.

        The last finalized estimate is rolled forward through provisional
        arrivals (alpha_hat + T steps, honoring activity windows) until it
        covers ``now``; rolled instances have no receptions yet.
        """
        log = self._logs[chain_id]
        if not log.alphas:
            return None
        spec = self._specs[chain_id]
        est = log.alphas[-1]
        rec = log.receptions[-1]
        alpha, params, rolls = est.alpha_hat, est.params, 0
        while True:
            nxt = alpha + params.T
            if nxt > now:
                break
            q = spec.params_at(nxt)
            if not q.active:
                start = spec.next_activation_after(nxt)
                if start is None or start > now:
                    gap = None if start is None else start - now
                    o_frozen = (rec.gamma - est.alpha_hat) if (rolls == 0 and rec.gamma is not None) else 0
                    return StateEstimate(d_hat=gap, r_hat=0, o_hat=o_frozen,
                                         alpha_hat=alpha, params=params,
                                         k_guess=est.k + 1 + rolls)
                nxt = start
                q = spec.params_at(start)
            alpha, params = nxt, q
            rolls += 1
        beta = rec.beta if rolls == 0 else None
        gamma = rec.gamma if rolls == 0 else None
        d_hat, r_hat, o_hat = estimate_states(now, alpha, params, beta, gamma)
        return StateEstimate(d_hat, r_hat, o_hat, alpha, params, est.k + 1 + rolls)

    def estimated_bus_state(self, now: Ticks, bus_id: int) -> tuple[BusState, list[MessageChainSpec]]:
        """Estimated state vector over the chains observed so far.

        ``bus_id`` is the broadcast-known transmitting chain. A transmitting
        chain whose estimate still says "preparing" (possible while the alpha
        error is large) is snapped to the start-of-transmission residue. If
        the transmitter has never been observed it is left out and the bus
        reported idle; the first reception from it repairs future predictions.
        """
        states: dict[int, ChainState] = {}
        included: list[MessageChainSpec] = []
        for chain_id, spec in self._specs.items():
            est = self.chain_estimate(chain_id, now)
            if est is None:
                continue
            states[chain_id] = ChainState(d=est.d_hat, r=est.r_hat, o=est.o_hat,
                                          k=est.k_guess, params=est.params)
            included.append(spec)
        if bus_id != 0 and bus_id in states:
            st = states[bus_id]
            cap = st.params.C1 + st.params.I2 + st.params.C2
            if st.r > cap:
                st.r = cap
        effective = bus_id if bus_id in states else 0
        return BusState(now=now, bus_id=effective, states=states), included
