"""Concurrent-user load generator.

Closed-loop mode models interactive users: each waits for its previous
transaction to commit at its submission endpoint (or time out) before sending
the next, so latency growth feeds back into offered load. Open-loop mode
submits at a fixed aggregate rate regardless of outcome, for saturation
sweeps.

Users ramp in stages at a configured spawn rate; accounts are pre-funded at
genesis so rejected transfers never confound chaos results unless scarce
funding is explicitly enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .ledger import AccountState, Transaction, create_account
from .metrics import MetricsCollector
from .sim import EventKind, RngStream, SimEvent, Simulation


class ProfileInfeasible(Exception):
    pass


@dataclass(frozen=True)
class StageSpec:
    users: int
    spawn_rate: float  # users per second
    hold_ms: int  # 0 = hold until horizon


@dataclass
class LoadProfile:
    mode: str = "closed"  # closed | open
    stages: list[StageSpec] = field(default_factory=lambda: [StageSpec(10, 5.0, 0)])
    think_min_ms: int = 500
    think_max_ms: int = 1500
    response_timeout_ms: int = 10000
    retry_backoff_ms: int = 1000
    workers: int = 3
    rate_tps: float = 0.0
    amount_min: int = 1
    amount_max: int = 10
    scarce_funding: bool = False
    initial_balance: int = 10**6

    def max_users(self) -> int:
        return max((s.users for s in self.stages), default=0)


def spawn_times(stages: list[StageSpec]) -> list[tuple[int, int, bool]]:
    """Flatten stages into (tick, user_id, activate) transitions.

    Users ramp linearly at each stage's spawn rate; ramp-down deactivates the
    highest ids first.
    """
    out: list[tuple[int, int, bool]] = []
    t = 0.0
    current = 0
    for stage in stages:
        delta = stage.users - current
        if delta != 0:
            if stage.spawn_rate <= 0:
                raise ProfileInfeasible("spawn_rate must be positive when user count changes")
            step = 1000.0 / stage.spawn_rate
            for i in range(abs(delta)):
                t += step
                if delta > 0:
                    out.append((int(round(t)), current + i, True))
                else:
                    out.append((int(round(t)), current - 1 - i, False))
        current = stage.users
        t += stage.hold_ms
    return out


def ramp_end_ms(stages: list[StageSpec]) -> int:
    """Tick at which the final stage's target user count is first reached."""
    transitions = spawn_times(stages)
    return transitions[-1][0] if transitions else 0


@dataclass
class _UserAgent:
    user_id: int
    account_a: str
    account_b: str
    active: bool = False
    endpoint_offset: int = 0
    inflight_tx: str | None = None
    timeout_event: SimEvent | None = None


class WorkloadDriver:
    """Simulated users inside the event loop; workers shard endpoints only."""

    def __init__(
        self,
        sim: Simulation,
        profile: LoadProfile,
        rng: RngStream,
        n_validators: int,
        metrics: MetricsCollector,
        submit: Callable[[str, Transaction, int], None],
    ) -> None:
        self.sim = sim
        self.profile = profile
        self.rng = rng
        self.n = n_validators
        self.metrics = metrics
        self.submit_cb = submit
        self.users: dict[int, _UserAgent] = {}
        self._tx_seq = 0
        self._tx_owner: dict[str, int] = {}
        self._open_endpoint = 0

    # -- genesis ------------------------------------------------------------

    def build_genesis_state(self) -> AccountState:
        state = AccountState()
        balance = self.profile.initial_balance
        if self.profile.mode == "open":
            state = create_account(state, "pool-a", max(balance, 10**9))
            state = create_account(state, "pool-b", 0)
            return state
        for uid in range(self.profile.max_users()):
            agent = _UserAgent(uid, f"u{uid}-a", f"u{uid}-b")
            self.users[uid] = agent
            state = create_account(state, agent.account_a, balance)
            state = create_account(state, agent.account_b, balance)
        return state

    # -- startup ---------------------------------------------------------------

    def start(self) -> None:
        if self.profile.mode == "open":
            if self.profile.rate_tps <= 0:
                raise ProfileInfeasible("open-loop mode needs rate_tps > 0")
            self._schedule_open_submission(0.0)
            return
        for tick, uid, activate in spawn_times(self.profile.stages):
            action = "activate" if activate else "deactivate"
            self.sim.schedule(
                tick, EventKind.USER_ACTION, f"u{uid}", action,
                fn=lambda ev, u=uid, a=activate: self._on_transition(u, a),
            )

    def _on_transition(self, uid: int, activate: bool) -> None:
        agent = self.users[uid]
        agent.active = activate
        if activate and agent.inflight_tx is None:
            self._schedule_next(uid, self.sim.now)

    # -- closed loop --------------------------------------------------------------

    def _schedule_next(self, uid: int, now: int) -> None:
        think = self.rng.uniform_int(self.profile.think_min_ms, self.profile.think_max_ms)
        self.sim.schedule(
            now + think, EventKind.USER_ACTION, f"u{uid}", "submit",
            fn=lambda ev, u=uid: self._submit(u),
        )

    def _endpoint(self, agent: _UserAgent) -> int:
        return (agent.user_id + agent.endpoint_offset) % self.n

    def _submit(self, uid: int) -> None:
        agent = self.users[uid]
        if not agent.active or agent.inflight_tx is not None:
            return
        now = self.sim.now
        amount = self.rng.uniform_int(self.profile.amount_min, self.profile.amount_max)
        tx = Transaction(self._next_tx_id(), agent.account_a, agent.account_b, amount, now)
        endpoint = self._endpoint(agent)
        agent.inflight_tx = tx.tx_id
        self._tx_owner[tx.tx_id] = uid
        self.metrics.on_submit(tx.tx_id, f"u{uid}", endpoint, now)
        self.sim.record("submit", f"u{uid}", f"tx={tx.tx_id} endpoint=n{endpoint} amount={amount}")
        agent.timeout_event = self.sim.schedule(
            now + self.profile.response_timeout_ms, EventKind.USER_ACTION, f"u{uid}",
            f"response_timeout tx={tx.tx_id}",
            fn=lambda ev, u=uid, t=tx.tx_id: self._on_timeout(u, t),
        )
        self.submit_cb(f"u{uid}", tx, endpoint)

    def _next_tx_id(self) -> str:
        tx_id = f"t{self._tx_seq}"
        self._tx_seq += 1
        return tx_id

    def on_committed_at_endpoint(self, tx_id: str, now: int) -> None:
        """Ack for the closed loop: the user's endpoint committed its transaction."""
        uid = self._tx_owner.get(tx_id)
        if uid is None:
            return
        agent = self.users.get(uid)
        if agent is None or agent.inflight_tx != tx_id:
            return
        agent.inflight_tx = None
        if agent.timeout_event is not None:
            agent.timeout_event.cancel()
            agent.timeout_event = None
        if agent.active:
            self._schedule_next(uid, now)

    def on_rejected(self, tx_id: str, now: int) -> None:
        """Submission refused up front (e.g. no leader known); retry later."""
        self.metrics.on_reject(tx_id)
        uid = self._tx_owner.get(tx_id)
        if uid is None:
            return
        agent = self.users.get(uid)
        if agent is None or agent.inflight_tx != tx_id:
            return
        agent.inflight_tx = None
        if agent.timeout_event is not None:
            agent.timeout_event.cancel()
            agent.timeout_event = None
        agent.endpoint_offset += 1
        self.sim.record("reject", f"u{uid}", f"tx={tx_id}")
        if agent.active:
            self.sim.schedule(
                now + self.profile.retry_backoff_ms, EventKind.USER_ACTION, f"u{uid}", "retry",
                fn=lambda ev, u=uid: self._submit(u),
            )

    def _on_timeout(self, uid: int, tx_id: str) -> None:
        agent = self.users[uid]
        if agent.inflight_tx != tx_id:
            return
        self.metrics.on_request_timeout()
        self.sim.record("timeout", f"u{uid}", f"tx={tx_id}")
        agent.inflight_tx = None
        agent.timeout_event = None
        agent.endpoint_offset += 1
        if agent.active:
            self._submit(uid)

    # -- open loop ---------------------------------------------------------------

    def _schedule_open_submission(self, ideal_t: float) -> None:
        interval = 1000.0 / self.profile.rate_tps
        next_t = ideal_t + interval
        self.sim.schedule(
            max(self.sim.now, int(round(next_t))), EventKind.USER_ACTION, "open", "submit",
            fn=lambda ev, t=next_t: self._open_submit(t),
        )

    def _open_submit(self, ideal_t: float) -> None:
        now = self.sim.now
        amount = self.rng.uniform_int(self.profile.amount_min, self.profile.amount_max)
        tx = Transaction(self._next_tx_id(), "pool-a", "pool-b", amount, now)
        endpoint = self._open_endpoint % self.n
        self._open_endpoint += 1
        self.metrics.on_submit(tx.tx_id, "open", endpoint, now)
        self.sim.record("submit", "open", f"tx={tx.tx_id} endpoint=n{endpoint} amount={amount}")
        self.submit_cb("open", tx, endpoint)
        self._schedule_open_submission(ideal_t)
