"""Simulated point-to-point network with scripted fault injection.

Every send is filtered through the active fault set: node pauses drop the
message outright, loss faults drop it probabilistically, delay faults stretch
the delivery latency, and corrupt faults rewrite one semantic field of the
payload (a byzantine stand-in: each broadcast copy is corrupted
independently, so different receivers see different messages).

Fault evaluation order is fixed (pause, loss, delay, corrupt) so combined
faults compose deterministically.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable

from . import clique, pbft, raft
from .engine import ClientSubmit, SyncBlocks, SyncRequest, TxForward, TxGossip
from .ledger import Block, Transaction, content_digest
from .sim import EventKind, RngStream, SimEvent, Simulation


class NetError(Exception):
    pass


class UnknownNode(NetError):
    pass


class MalformedWindow(NetError):
    pass


class FaultKind(str, Enum):
    DELAY = "delay"
    LOSS = "loss"
    CORRUPT = "corrupt"
    PAUSE = "pause"


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    start: int
    end: int
    mean_ms: int = 0
    jitter_ms: int = 0
    drop_probability: float = 0.0
    corrupt_probability: float = 0.0
    nodes: tuple[int, ...] = ()

    def validate(self) -> None:
        if self.start >= self.end:
            raise MalformedWindow(f"window [{self.start},{self.end}) is empty or inverted")
        if self.mean_ms < 0 or self.jitter_ms < 0:
            raise MalformedWindow("delay parameters must be non-negative")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise MalformedWindow("drop_probability outside [0,1]")
        if not 0.0 <= self.corrupt_probability <= 1.0:
            raise MalformedWindow("corrupt_probability outside [0,1]")
        if self.kind in (FaultKind.CORRUPT, FaultKind.PAUSE) and not self.nodes:
            raise MalformedWindow(f"{self.kind.value} fault needs affected nodes")

    def active_at(self, t: int) -> bool:
        return self.start <= t < self.end

    def describe(self) -> str:
        core = f"{self.kind.value} window=[{self.start},{self.end})"
        if self.kind == FaultKind.DELAY:
            return f"{core} mean_ms={self.mean_ms} jitter_ms={self.jitter_ms}"
        if self.kind == FaultKind.LOSS:
            return f"{core} drop_probability={self.drop_probability:g}"
        if self.kind == FaultKind.CORRUPT:
            nodes = ";".join(str(n) for n in self.nodes)
            return f"{core} corrupt_probability={self.corrupt_probability:g} nodes={nodes}"
        nodes = ";".join(str(n) for n in self.nodes)
        return f"{core} nodes={nodes}"


@dataclass(frozen=True)
class NetworkConfig:
    base_latency_ms: int = 5
    base_jitter_ms: int = 0


@dataclass
class Message:
    src: Any  # validator id (int) or client label (str)
    dst: int
    payload: Any
    sent_at: int
    corrupted: bool = False


# ---------------------------------------------------------------------------
# Payload corruption
#
# Mutations keep the payload structurally valid for its protocol family but
# flip one semantic field; digests are never recomputed afterwards, which is
# what lets receivers detect the damage.


def _mutate_digest(digest: str, rng: RngStream) -> str:
    salt = rng.uniform_int(0, 2**31)
    out = content_digest("corrupt", digest, salt)
    while out == digest:
        out = content_digest("corrupt", out, salt)
    return out


def _mutate_int(value: int, rng: RngStream) -> int:
    return value + 1 + rng.uniform_int(0, 3)


def _mutate_tx_amount(tx: Transaction, rng: RngStream) -> Transaction:
    return replace(tx, amount=tx.amount + 1 + rng.uniform_int(0, 9))


def _mutate_block_tx(block: Block, rng: RngStream) -> Block:
    if not block.transactions:
        return replace(block, digest=_mutate_digest(block.digest, rng))
    idx = rng.uniform_int(0, len(block.transactions) - 1)
    txs = list(block.transactions)
    txs[idx] = _mutate_tx_amount(txs[idx], rng)
    return replace(block, transactions=tuple(txs))


def _mutate_block_digest(block: Block, rng: RngStream) -> Block:
    return replace(block, digest=_mutate_digest(block.digest, rng))


# type -> list of (site name, mutator(payload, rng) -> payload')
_SITES: dict[type, list[tuple[str, Callable[[Any, RngStream], Any]]]] = {
    pbft.PrePrepare: [
        ("digest", lambda p, r: replace(p, digest=_mutate_digest(p.digest, r))),
        ("view", lambda p, r: replace(p, view=_mutate_int(p.view, r))),
        ("block_tx_amount", lambda p, r: replace(p, block=_mutate_block_tx(p.block, r))),
    ],
    pbft.Prepare: [
        ("digest", lambda p, r: replace(p, digest=_mutate_digest(p.digest, r))),
        ("view", lambda p, r: replace(p, view=_mutate_int(p.view, r))),
    ],
    pbft.CommitVote: [
        ("digest", lambda p, r: replace(p, digest=_mutate_digest(p.digest, r))),
        ("view", lambda p, r: replace(p, view=_mutate_int(p.view, r))),
    ],
    pbft.ViewChange: [
        ("new_view", lambda p, r: replace(p, new_view=_mutate_int(p.new_view, r))),
    ],
    raft.RequestVote: [
        ("term", lambda p, r: replace(p, term=_mutate_int(p.term, r))),
        ("last_log_term", lambda p, r: replace(p, last_log_term=_mutate_int(p.last_log_term, r))),
    ],
    raft.VoteReply: [
        ("term", lambda p, r: replace(p, term=_mutate_int(p.term, r))),
        ("granted", lambda p, r: replace(p, granted=not p.granted)),
    ],
    raft.AppendEntries: [
        ("prev_term", lambda p, r: replace(p, prev_term=_mutate_int(p.prev_term, r))),
        ("leader_commit", lambda p, r: replace(p, leader_commit=_mutate_int(p.leader_commit, r))),
        ("entry_block", lambda p, r: _mutate_append_entry(p, r)),
    ],
    raft.AppendReply: [
        ("match_index", lambda p, r: replace(p, match_index=_mutate_int(p.match_index, r))),
        ("success", lambda p, r: replace(p, success=not p.success)),
    ],
    clique.NewBlock: [
        ("block_digest", lambda p, r: replace(p, block=_mutate_block_digest(p.block, r))),
        ("block_tx_amount", lambda p, r: replace(p, block=_mutate_block_tx(p.block, r))),
    ],
    TxGossip: [("tx_amount", lambda p, r: replace(p, tx=_mutate_tx_amount(p.tx, r)))],
    TxForward: [("tx_amount", lambda p, r: replace(p, tx=_mutate_tx_amount(p.tx, r)))],
    SyncRequest: [("have_height", lambda p, r: replace(p, have_height=_mutate_int(p.have_height, r)))],
    SyncBlocks: [("block_digest", lambda p, r: _mutate_sync_blocks(p, r))],
}


def _mutate_append_entry(payload: "raft.AppendEntries", rng: RngStream):
    if not payload.entries:
        return replace(payload, leader_commit=_mutate_int(payload.leader_commit, rng))
    idx = rng.uniform_int(0, len(payload.entries) - 1)
    entries = list(payload.entries)
    term, block = entries[idx]
    entries[idx] = (term, _mutate_block_tx(block, rng))
    return replace(payload, entries=tuple(entries))


def _mutate_sync_blocks(payload: SyncBlocks, rng: RngStream):
    if not payload.blocks:
        return payload
    idx = rng.uniform_int(0, len(payload.blocks) - 1)
    blocks = list(payload.blocks)
    blocks[idx] = _mutate_block_digest(blocks[idx], rng)
    return replace(payload, blocks=tuple(blocks))


def corrupt_payload(payload: Any, rng: RngStream) -> tuple[Any, str]:
    """Return a corrupted copy of `payload` and the name of the mutated site.

    Deterministic given the stream state; the output always differs from the
    input and stays within the same message family.
    """
    sites = _SITES.get(type(payload))
    if not sites:
        raise NetError(f"no corruption sites for {type(payload).__name__}")
    name, mutator = sites[rng.uniform_int(0, len(sites) - 1)]
    mutated = mutator(payload, rng)
    if mutated == payload:  # empty-payload edge; force a different site
        name, mutator = sites[0]
        mutated = mutator(payload, rng)
    return mutated, name


class ChaosNetwork:
    """Routes messages between nodes, applying the active fault set.

    `deliver` is the harness callback invoked when a message survives to its
    delivery tick; `on_pause_change` fires at pause/resume transitions so the
    harness can re-arm engine timers.
    """

    def __init__(
        self,
        sim: Simulation,
        config: NetworkConfig,
        node_ids: range,
        rng_net: RngStream,
        rng_corrupt: RngStream,
        deliver: Callable[[Message], None],
        on_pause_change: Callable[[int, bool, int], None] | None = None,
        faults_affect_clients: bool = False,
    ) -> None:
        self.sim = sim
        self.config = config
        self.node_ids = node_ids
        self.rng_net = rng_net
        self.rng_corrupt = rng_corrupt
        self.deliver = deliver
        self.on_pause_change = on_pause_change
        self.faults_affect_clients = faults_affect_clients
        self.paused: set[int] = set()
        self.schedule: list[FaultSpec] = []
        self.sent_count = 0
        self.dropped_count = 0
        self.delivered_count = 0
        self.corrupted_count = 0

    # -- fault schedule -------------------------------------------------------

    def set_fault_schedule(self, schedule: list[FaultSpec]) -> None:
        for spec in schedule:
            spec.validate()
            for node in spec.nodes:
                if node not in self.node_ids:
                    raise UnknownNode(str(node))
        self.schedule = list(schedule)
        for i, spec in enumerate(schedule):
            self.sim.schedule(
                spec.start, EventKind.FAULT_TRANSITION, "-",
                f"begin {spec.describe()}",
                fn=lambda ev, s=spec: self._fault_begin(s),
            )
            self.sim.schedule(
                spec.end, EventKind.FAULT_TRANSITION, "-",
                f"end {spec.describe()}",
                fn=lambda ev, s=spec: self._fault_end(s),
            )

    def active_faults(self, t: int, kind: FaultKind | None = None) -> list[FaultSpec]:
        return [
            s for s in self.schedule
            if s.active_at(t) and (kind is None or s.kind == kind)
        ]

    def _fault_begin(self, spec: FaultSpec) -> None:
        if spec.kind == FaultKind.PAUSE:
            for node in spec.nodes:
                self.pause_node(node)

    def _fault_end(self, spec: FaultSpec) -> None:
        if spec.kind == FaultKind.PAUSE:
            for node in spec.nodes:
                self.resume_node(node)

    # -- pause / resume ---------------------------------------------------------

    def pause_node(self, node: int) -> None:
        if node not in self.node_ids:
            raise UnknownNode(str(node))
        if node in self.paused:
            return
        self.paused.add(node)
        self.sim.record("pause", f"n{node}", "paused")
        if self.on_pause_change:
            self.on_pause_change(node, True, self.sim.now)

    def resume_node(self, node: int) -> None:
        if node not in self.node_ids:
            raise UnknownNode(str(node))
        if node not in self.paused:
            return
        self.paused.discard(node)
        self.sim.record("resume", f"n{node}", "resumed")
        if self.on_pause_change:
            self.on_pause_change(node, False, self.sim.now)

    def is_paused(self, node: int) -> bool:
        return node in self.paused

    # -- send path -------------------------------------------------------------

    def send(self, msg: Message) -> None:
        now = self.sim.now
        if msg.dst not in self.node_ids:
            raise UnknownNode(str(msg.dst))
        src_is_validator = isinstance(msg.src, int)
        src_label = f"n{msg.src}" if src_is_validator else str(msg.src)
        kind = type(msg.payload).__name__
        self.sent_count += 1
        if (src_is_validator and msg.src in self.paused) or msg.dst in self.paused:
            self.dropped_count += 1
            self.sim.record("drop", src_label, f"dst=n{msg.dst} type={kind} reason=paused")
            return
        chaos_applies = self.faults_affect_clients or src_is_validator
        if chaos_applies:
            for spec in self.active_faults(now, FaultKind.LOSS):
                if self.rng_net.bernoulli(spec.drop_probability):
                    self.dropped_count += 1
                    self.sim.record("drop", src_label, f"dst=n{msg.dst} type={kind} reason=loss")
                    return
        latency = self.config.base_latency_ms
        if self.config.base_jitter_ms:
            latency += self.rng_net.uniform_int(0, self.config.base_jitter_ms)
        if chaos_applies:
            for spec in self.active_faults(now, FaultKind.DELAY):
                extra = spec.mean_ms
                if spec.jitter_ms:
                    extra += self.rng_net.uniform_int(-spec.jitter_ms, spec.jitter_ms)
                latency += max(0, extra)
            if src_is_validator:
                for spec in self.active_faults(now, FaultKind.CORRUPT):
                    if msg.src in spec.nodes and self.rng_net.bernoulli(spec.corrupt_probability):
                        msg.payload, site = corrupt_payload(msg.payload, self.rng_corrupt)
                        msg.corrupted = True
                        self.corrupted_count += 1
                        self.sim.record(
                            "corrupt", src_label, f"dst=n{msg.dst} type={kind} site={site}"
                        )
                        break
        self.sim.record("send", src_label, f"dst=n{msg.dst} type={kind} corrupted={int(msg.corrupted)}")
        self.sim.schedule(
            now + latency,
            EventKind.MESSAGE_DELIVERY,
            f"n{msg.dst}",
            f"src={src_label} type={kind} corrupted={int(msg.corrupted)}",
            fn=lambda ev, m=msg: self._deliver(m),
        )

    def _deliver(self, msg: Message) -> None:
        # Pause drops in-flight traffic too: a crashed process has no buffers.
        if msg.dst in self.paused:
            self.dropped_count += 1
            self.sim.record("drop", f"n{msg.dst}", f"type={type(msg.payload).__name__} reason=paused_recv")
            return
        self.delivered_count += 1
        self.deliver(msg)
