"""Raft engine: randomized leader election, log replication, majority commit.

Crash fault-tolerant only; under payload corruption there is no safety
guarantee, but invalid blocks are still detected at commit time and surfaced
as log notes rather than crashes.

Blocks are the log entries (index == block height, genesis as sentinel 0), so
success-rate accounting lines up with the other engines.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any

from .engine import (
    Action,
    Broadcast,
    CancelTimer,
    ClientReject,
    CommitBlock,
    ConsensusNode,
    LogNote,
    ProposalCreated,
    Send,
    SetTimer,
    TxForward,
)
from .ledger import Block, GENESIS, Transaction, assemble_block, take_valid, validate_block


class Role(str, Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


@dataclass(frozen=True)
class RequestVote:
    term: int
    candidate: int
    last_log_index: int
    last_log_term: int


@dataclass(frozen=True)
class VoteReply:
    term: int
    granted: bool


@dataclass(frozen=True)
class AppendEntries:
    term: int
    leader: int
    prev_index: int
    prev_term: int
    entries: tuple[tuple[int, Block], ...]
    leader_commit: int


@dataclass(frozen=True)
class AppendReply:
    term: int
    success: bool
    match_index: int


RAFT_PROTOCOL_PAYLOADS = (RequestVote, VoteReply, AppendEntries, AppendReply)

MAX_ENTRIES_PER_MESSAGE = 20


@dataclass
class RaftConfig:
    election_timeout_min_ms: int = 600
    election_timeout_max_ms: int = 1200
    heartbeat_interval_ms: int = 150
    block_interval_ms: int = 500


class RaftNode(ConsensusNode):
    name = "raft"

    def __init__(self, node_id, validators, chain, rng, block_size, config: RaftConfig,
                 allow_empty_blocks: bool = False) -> None:
        super().__init__(node_id, validators, chain, rng, block_size, allow_empty_blocks)
        self.config = config
        self.role = Role.FOLLOWER
        self.current_term = 0
        self.voted_for: int | None = None
        self.leader_id: int | None = None
        # log[0] is a genesis sentinel; entry index == block height
        self.log: list[tuple[int, Block]] = [(0, GENESIS)]
        self.commit_index = 0
        self.next_index: dict[int, int] = {}
        self.match_index: dict[int, int] = {}
        self.votes: set[int] = set()
        self._log_tx_ids: set[str] = set()

    # -- helpers ---------------------------------------------------------------

    @property
    def last_index(self) -> int:
        return len(self.log) - 1

    @property
    def last_term(self) -> int:
        return self.log[-1][0]

    def _arm_election(self, now: int) -> SetTimer:
        timeout = self.rng.uniform_int(
            self.config.election_timeout_min_ms, self.config.election_timeout_max_ms
        )
        return SetTimer("election", now + timeout)

    def _entries_for(self, peer: int) -> AppendEntries:
        nxt = self.next_index.get(peer, self.last_index + 1)
        entries = tuple(self.log[nxt : nxt + MAX_ENTRIES_PER_MESSAGE])
        return AppendEntries(
            term=self.current_term,
            leader=self.node_id,
            prev_index=nxt - 1,
            prev_term=self.log[nxt - 1][0],
            entries=entries,
            leader_commit=self.commit_index,
        )

    def _step_down(self, term: int, now: int, leader: int | None = None) -> list[Action]:
        was_leader = self.role == Role.LEADER
        self.role = Role.FOLLOWER
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
        self.leader_id = leader
        self.votes = set()
        actions: list[Action] = []
        if was_leader:
            actions += [CancelTimer("heartbeat"), CancelTimer("interval")]
        actions.append(self._arm_election(now))
        return actions

    # -- lifecycle ---------------------------------------------------------------

    def on_start(self, now: int) -> list[Action]:
        if self.role == Role.LEADER:
            return [
                SetTimer("heartbeat", now + self.config.heartbeat_interval_ms),
                SetTimer("interval", now + self.config.block_interval_ms),
            ]
        return [self._arm_election(now)]

    def on_client_tx(self, tx: Transaction, now: int) -> list[Action]:
        if self.role == Role.LEADER:
            self.mempool_add(tx)
            return self._try_append(now, force_any=False)
        if self.leader_id is not None:
            return [Send(self.leader_id, TxForward(tx))]
        return [ClientReject(tx, "no_leader")]

    def on_timer(self, label: str, now: int) -> list[Action]:
        if label == "election":
            if self.role == Role.LEADER:
                return []
            return self._start_election(now)
        if label == "heartbeat" and self.role == Role.LEADER:
            actions: list[Action] = [
                Send(p, self._entries_for(p)) for p in self.validators.others(self.node_id)
            ]
            actions.append(SetTimer("heartbeat", now + self.config.heartbeat_interval_ms))
            return actions
        if label == "interval" and self.role == Role.LEADER:
            actions = self._try_append(now)
            actions.append(SetTimer("interval", now + self.config.block_interval_ms))
            return actions
        return []

    def on_message(self, src: int, payload: Any, now: int) -> list[Action]:
        if isinstance(payload, TxForward):
            if self.role == Role.LEADER:
                self.mempool_add(payload.tx)
                return self._try_append(now, force_any=False)
            return []  # one-hop forwarding only; client timeout covers the rest
        if isinstance(payload, RequestVote):
            return self._on_request_vote(src, payload, now)
        if isinstance(payload, VoteReply):
            return self._on_vote_reply(src, payload, now)
        if isinstance(payload, AppendEntries):
            return self._on_append_entries(src, payload, now)
        if isinstance(payload, AppendReply):
            return self._on_append_reply(src, payload, now)
        return []

    def on_resume(self, now: int) -> list[Action]:
        return self.on_start(now)

    # -- elections ---------------------------------------------------------------

    def _start_election(self, now: int) -> list[Action]:
        self.current_term += 1
        self.role = Role.CANDIDATE
        self.voted_for = self.node_id
        self.votes = {self.node_id}
        self.leader_id = None
        actions: list[Action] = [
            LogNote(f"candidate term={self.current_term}"),
            Broadcast(RequestVote(self.current_term, self.node_id, self.last_index, self.last_term)),
            self._arm_election(now),
        ]
        if len(self.votes) >= self.validators.majority:
            actions += self._become_leader(now)
        return actions

    def _on_request_vote(self, src: int, msg: RequestVote, now: int) -> list[Action]:
        actions: list[Action] = []
        if msg.term > self.current_term:
            actions += self._step_down(msg.term, now)
        if msg.term < self.current_term:
            return actions + [Send(src, VoteReply(self.current_term, False))]
        up_to_date = msg.last_log_term > self.last_term or (
            msg.last_log_term == self.last_term and msg.last_log_index >= self.last_index
        )
        grant = (
            self.role != Role.LEADER
            and self.voted_for in (None, msg.candidate)
            and up_to_date
        )
        if grant:
            self.voted_for = msg.candidate
            actions.append(self._arm_election(now))
        actions.append(Send(src, VoteReply(self.current_term, grant)))
        return actions

    def _on_vote_reply(self, src: int, msg: VoteReply, now: int) -> list[Action]:
        if msg.term > self.current_term:
            return self._step_down(msg.term, now)
        if self.role != Role.CANDIDATE or msg.term != self.current_term or not msg.granted:
            return []
        self.votes.add(src)
        if len(self.votes) >= self.validators.majority:
            return self._become_leader(now)
        return []

    def _become_leader(self, now: int) -> list[Action]:
        self.role = Role.LEADER
        self.leader_id = self.node_id
        self.next_index = {p: self.last_index + 1 for p in self.validators.others(self.node_id)}
        self.match_index = {p: 0 for p in self.validators.others(self.node_id)}
        actions: list[Action] = [LogNote(f"leader term={self.current_term}")]
        actions += [Send(p, self._entries_for(p)) for p in self.validators.others(self.node_id)]
        actions += [
            SetTimer("heartbeat", now + self.config.heartbeat_interval_ms),
            SetTimer("interval", now + self.config.block_interval_ms),
        ]
        return actions

    # -- replication ---------------------------------------------------------------

    def _can_append(self) -> bool:
        # One uncommitted self-proposed block at a time, except that a fresh
        # leader may build on an uncommitted tail inherited from older terms
        # (committing the new entry commits the tail with it).
        return self.commit_index == self.last_index or self.last_term < self.current_term

    def _try_append(self, now: int, force_any: bool = True) -> list[Action]:
        if self.role != Role.LEADER or not self._can_append():
            return []
        skip = self.chain.committed_tx_ids | self._log_tx_ids
        pending = take_valid(
            [tx for tx in self.mempool.values() if tx.tx_id not in skip],
            self.chain.state,
            set(),
            self.block_size,
        )
        if not pending:
            return []
        if not force_any and len(pending) < self.block_size:
            return []
        parent = self.log[-1][1]
        block = assemble_block(
            pending, parent, self.node_id, now, self.block_size,
            allow_empty=self.allow_empty_blocks,
        )
        self.log.append((self.current_term, block))
        self._log_tx_ids.update(tx.tx_id for tx in block.transactions)
        actions: list[Action] = [ProposalCreated(block)]
        actions += [Send(p, self._entries_for(p)) for p in self.validators.others(self.node_id)]
        return actions

    def _on_append_entries(self, src: int, msg: AppendEntries, now: int) -> list[Action]:
        if msg.term < self.current_term:
            return [Send(src, AppendReply(self.current_term, False, self.commit_index))]
        actions: list[Action] = []
        if msg.term > self.current_term or self.role != Role.FOLLOWER:
            actions += self._step_down(msg.term, now, leader=msg.leader)
        else:
            self.leader_id = msg.leader
            actions.append(self._arm_election(now))
        if msg.prev_index > self.last_index or self.log[msg.prev_index][0] != msg.prev_term:
            actions.append(Send(src, AppendReply(self.current_term, False, self.commit_index)))
            return actions
        for i, (term, block) in enumerate(msg.entries):
            idx = msg.prev_index + 1 + i
            if idx <= self.last_index and self.log[idx][0] == term:
                continue
            if idx <= self.commit_index:
                # A conflict below the commit point can only come from a
                # corrupted message; refuse rather than rewrite history.
                actions.append(LogNote(f"refuse_overwrite index={idx}"))
                actions.append(Send(src, AppendReply(self.current_term, False, self.commit_index)))
                return actions
            for dropped_term, dropped in self.log[idx:]:
                self._log_tx_ids.difference_update(t.tx_id for t in dropped.transactions)
            del self.log[idx:]
            self.log.append((term, block))
            self._log_tx_ids.update(t.tx_id for t in block.transactions)
        match = msg.prev_index + len(msg.entries)
        if msg.leader_commit > self.commit_index:
            self.commit_index = min(msg.leader_commit, self.last_index)
            actions += self._apply_commits(now)
        actions.append(Send(src, AppendReply(self.current_term, True, match)))
        return actions

    def _on_append_reply(self, src: int, msg: AppendReply, now: int) -> list[Action]:
        if msg.term > self.current_term:
            return self._step_down(msg.term, now)
        if self.role != Role.LEADER or msg.term != self.current_term:
            return []
        if msg.success:
            self.match_index[src] = max(self.match_index.get(src, 0), msg.match_index)
            self.next_index[src] = self.match_index[src] + 1
            actions = self._advance_commit(now)
            if self.next_index[src] <= self.last_index:
                actions.append(Send(src, self._entries_for(src)))
            return actions
        # Rejected: back off, using the follower's commit index as a floor.
        self.next_index[src] = max(1, min(self.next_index[src] - 1, msg.match_index + 1))
        return [Send(src, self._entries_for(src))]

    def _advance_commit(self, now: int) -> list[Action]:
        for n in range(self.last_index, self.commit_index, -1):
            if self.log[n][0] != self.current_term:
                continue
            acks = 1 + sum(1 for m in self.match_index.values() if m >= n)
            if acks >= self.validators.majority:
                self.commit_index = n
                actions = self._apply_commits(now)
                actions += self._try_append(now, force_any=False)
                return actions
        return []

    def _apply_commits(self, now: int) -> list[Action]:
        actions: list[Action] = []
        while self.chain.height < self.commit_index:
            block = self.log[self.chain.height + 1][1]
            verdict = validate_block(
                block, self.chain.head, self.chain.state,
                authorized=lambda p: p in self.validators.ids,
            )
            if not verdict:
                actions.append(
                    LogNote(f"invalid_committed_entry height={block.height} reason={verdict.reason}")
                )
                break
            self.chain.append(block, now)
            self.mempool_purge_committed(block)
            self._log_tx_ids.difference_update(t.tx_id for t in block.transactions)
            actions.append(CommitBlock(block))
        return actions
