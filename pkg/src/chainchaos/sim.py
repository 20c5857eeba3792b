"""Deterministic discrete-event core: virtual clock, ordered event queue, seeded
random streams, and the append-only event log used by the offline verifier.

All simulated time is integer milliseconds. Events are dispatched in strict
(fire_at, insertion sequence) order, so two runs of the same scenario with the
same seed produce byte-identical logs.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable


class SimError(Exception):
    """Base class for simulator contract violations."""


class SchedulingInPast(SimError):
    pass


class UnknownStream(SimError):
    pass


class EventKind(str, Enum):
    MESSAGE_DELIVERY = "MessageDelivery"
    TIMER = "Timer"
    USER_ACTION = "UserAction"
    FAULT_TRANSITION = "FaultTransition"
    METRICS_TICK = "MetricsTick"


# A log record is (tick, sequence, kind, node, detail). Dispatched events and
# supplementary action records (sends, commits, proposals, ...) share one
# monotone sequence counter so the log is totally ordered.
LogRecord = tuple[int, int, str, str, str]


@dataclass
class SimEvent:
    fire_at: int
    sequence: int
    kind: EventKind
    node: str
    detail: str
    fn: Callable[["SimEvent"], None] | None = None
    payload: Any = None
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


class Simulation:
    """Single-threaded event loop over virtual time.

    The loop owns the clock; handlers run only from :meth:`run_until` and may
    schedule further events (including at the current tick).
    """

    def __init__(self) -> None:
        self.now: int = 0
        self._seq = 0
        self._heap: list[tuple[int, int, SimEvent]] = []
        self.log: list[LogRecord] = []

    def _next_seq(self) -> int:
        seq = self._seq
        self._seq += 1
        return seq

    def schedule(
        self,
        fire_at: int,
        kind: EventKind,
        node: str = "-",
        detail: str = "",
        fn: Callable[[SimEvent], None] | None = None,
        payload: Any = None,
    ) -> SimEvent:
        if fire_at < self.now:
            raise SchedulingInPast(f"fire_at={fire_at} < now={self.now}")
        ev = SimEvent(fire_at, self._next_seq(), kind, node, detail, fn, payload)
        heapq.heappush(self._heap, (ev.fire_at, ev.sequence, ev))
        return ev

    def record(self, kind: str, node: str, detail: str) -> None:
        """Append a supplementary record (an action, not a dispatched event)."""
        self.log.append((self.now, self._next_seq(), kind, node, detail))

    def run_until(self, t_end: int) -> list[LogRecord]:
        """Dispatch every pending event with fire_at <= t_end, in order.

        Cancelled events are skipped silently. On return the clock equals
        t_end even if the queue was empty.
        """
        if t_end < self.now:
            raise SchedulingInPast(f"t_end={t_end} < now={self.now}")
        while self._heap and self._heap[0][0] <= t_end:
            _, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.now = ev.fire_at
            self.log.append((self.now, ev.sequence, ev.kind.value, ev.node, ev.detail))
            if ev.fn is not None:
                ev.fn(ev)
        self.now = t_end
        return self.log

    def pending_count(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)


def export_event_log(log: list[LogRecord]) -> str:
    """Serialize the log as newline-delimited `tick,sequence,kind,node,detail`."""
    return "\n".join(f"{t},{s},{k},{n},{d}" for t, s, k, n, d in log) + "\n"


def _derive_seed(master_seed: int, stream_id: str) -> int:
    digest = hashlib.blake2b(
        f"{master_seed}:{stream_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


class RngStream:
    """One deterministic random stream, isolated from all other streams."""

    def __init__(self, stream_id: str, seed: int) -> None:
        self.stream_id = stream_id
        self._rng = random.Random(seed)

    def uniform01(self) -> float:
        return self._rng.random()

    def uniform_int(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi], both ends inclusive."""
        if lo > hi:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return self._rng.randint(lo, hi)

    def bernoulli(self, p: float) -> bool:
        return self._rng.random() < p

    def choice(self, seq):
        return seq[self.uniform_int(0, len(seq) - 1)]


class RngHub:
    """Registry of named deterministic streams derived from one master seed.

    Draws on one stream never perturb another, so adding a fault does not
    shift workload arrival times.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self._streams: dict[str, RngStream] = {}

    def register(self, stream_id: str) -> RngStream:
        if stream_id in self._streams:
            raise SimError(f"stream {stream_id!r} already registered")
        stream = RngStream(stream_id, _derive_seed(self.seed, stream_id))
        self._streams[stream_id] = stream
        return stream

    def stream(self, stream_id: str) -> RngStream:
        try:
            return self._streams[stream_id]
        except KeyError:
            raise UnknownStream(stream_id) from None
