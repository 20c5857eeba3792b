"""Practical Byzantine Fault Tolerance engine.

Three-phase voting (pre-prepare, prepare, commit) over one height at a time,
with round-robin primaries, exponential-backoff view changes, and a small
chain-sync side channel so nodes that missed a round can catch up instead of
stalling forever.

Quorum sizes come from ValidatorSet: commits need n - f distinct matching
votes, prepares need n - f - 1 (the primary's pre-prepare standing in as its
prepare). Tallies are sets of voter ids, so duplicate votes are idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .engine import (
    Action,
    Broadcast,
    CommitBlock,
    CancelTimer,
    ConsensusNode,
    LogNote,
    MAX_SYNC_BLOCKS,
    ProposalCreated,
    Send,
    SetTimer,
    SyncBlocks,
    SyncRequest,
    TxGossip,
)
from .ledger import (
    Block,
    EmptyProposalForbidden,
    Transaction,
    assemble_block,
    block_digest,
    validate_block,
)


class NotPrimary(Exception):
    pass


@dataclass(frozen=True)
class PrePrepare:
    view: int
    height: int
    digest: str
    block: Block
    head: int


@dataclass(frozen=True)
class Prepare:
    view: int
    height: int
    digest: str
    head: int


@dataclass(frozen=True)
class CommitVote:
    view: int
    height: int
    digest: str
    head: int


@dataclass(frozen=True)
class ViewChange:
    new_view: int
    head: int


PBFT_PROTOCOL_PAYLOADS = (PrePrepare, Prepare, CommitVote, ViewChange)

SYNC_COOLDOWN_MS = 250


@dataclass
class PbftConfig:
    progress_timeout_ms: int = 2000
    block_interval_ms: int = 500


class PbftNode(ConsensusNode):
    name = "pbft"

    def __init__(self, node_id, validators, chain, rng, block_size, config: PbftConfig,
                 allow_empty_blocks: bool = False) -> None:
        super().__init__(node_id, validators, chain, rng, block_size, allow_empty_blocks)
        self.config = config
        self.view = 0
        self.fail_streak = 0
        # (view, height) -> proposed block (digest checked against content on receipt)
        self.preprepares: dict[tuple[int, int], Block] = {}
        # (view, height, digest) -> distinct voter ids
        self.prepare_votes: dict[tuple[int, int, str], set[int]] = {}
        self.commit_votes: dict[tuple[int, int, str], set[int]] = {}
        self.sent_commit: set[tuple[int, int, str]] = set()
        self.view_change_votes: dict[int, set[int]] = {}
        self.view_evidence: dict[int, set[int]] = {}
        self.own_vc_target = 0
        # pre-prepares for heights we have not reached yet, bounded
        self.future_buffer: dict[tuple[int, int], tuple[int, PrePrepare]] = {}
        self._progress_armed = False
        self._last_sync_at = -(10**9)

    # -- helpers -------------------------------------------------------------

    def primary(self, view: int) -> int:
        return view % self.validators.n

    @property
    def commit_quorum(self) -> int:
        return self.validators.bft_quorum

    @property
    def prepare_quorum(self) -> int:
        return self.validators.bft_quorum - 1

    def _arm_progress(self, now: int) -> list[Action]:
        if self._progress_armed:
            return []
        self._progress_armed = True
        timeout = self.config.progress_timeout_ms * (2 ** self.fail_streak)
        return [SetTimer("progress", now + timeout)]

    def _work_pending(self) -> bool:
        return bool(self.mempool_cut()) or (self.view, self.chain.height + 1) in self.preprepares

    def _sync_check(self, src: int, peer_head: int, now: int) -> list[Action]:
        if peer_head > self.chain.height and now - self._last_sync_at >= SYNC_COOLDOWN_MS:
            self._last_sync_at = now
            return [Send(src, SyncRequest(self.chain.height))]
        return []

    def _note_view_evidence(self, src: int, view: int) -> list[Action]:
        """Adopt a higher view once f+1 distinct peers are demonstrably in it."""
        if view <= self.view:
            return []
        self.view_evidence.setdefault(view, set()).add(src)
        if len(self.view_evidence[view]) >= self.validators.f + 1:
            return self._adopt_view(view)
        return []

    def _adopt_view(self, view: int) -> list[Action]:
        self.view = view
        self.own_vc_target = max(self.own_vc_target, view)
        for v in [v for v in self.view_change_votes if v <= view]:
            del self.view_change_votes[v]
        for v in [v for v in self.view_evidence if v <= view]:
            del self.view_evidence[v]
        return [LogNote(f"view_adopt view={view} primary=n{self.primary(view)}")]

    # -- lifecycle -----------------------------------------------------------

    def on_start(self, now: int) -> list[Action]:
        actions: list[Action] = [SetTimer("interval", now + self.config.block_interval_ms)]
        if self._work_pending():
            self._progress_armed = False
            actions += self._arm_progress(now)
        return actions

    def on_client_tx(self, tx: Transaction, now: int) -> list[Action]:
        actions: list[Action] = []
        if self.mempool_add(tx):
            actions.append(Broadcast(TxGossip(tx)))
            actions += self._maybe_propose(now, force_any=False)
            if self._work_pending():
                actions += self._arm_progress(now)
        return actions

    def on_timer(self, label: str, now: int) -> list[Action]:
        if label == "interval":
            actions: list[Action] = [SetTimer("interval", now + self.config.block_interval_ms)]
            actions += self._maybe_propose(now, force_any=True)
            if self._work_pending():
                actions += self._arm_progress(now)
            return actions
        if label == "progress":
            return self._start_view_change(now)
        return []

    def on_message(self, src: int, payload: Any, now: int) -> list[Action]:
        if isinstance(payload, TxGossip):
            actions = []
            if self.mempool_add(payload.tx):
                actions = self._maybe_propose(now, force_any=False)
                if self._work_pending():
                    actions += self._arm_progress(now)
            return actions
        if isinstance(payload, PrePrepare):
            return self._on_preprepare(src, payload, now)
        if isinstance(payload, Prepare):
            return self._on_prepare(src, payload, now)
        if isinstance(payload, CommitVote):
            return self._on_commit_vote(src, payload, now)
        if isinstance(payload, ViewChange):
            return self._on_view_change_msg(src, payload, now)
        if isinstance(payload, SyncRequest):
            return self._on_sync_request(src, payload)
        if isinstance(payload, SyncBlocks):
            return self._on_sync_blocks(payload, now)
        return []

    # -- proposing -----------------------------------------------------------

    def propose(self, now: int) -> list[Action]:
        """Broadcast a pre-prepare for the next height. Primary only."""
        if self.primary(self.view) != self.node_id:
            raise NotPrimary(f"n{self.node_id} is not primary of view {self.view}")
        pending = self.mempool_cut()
        block = assemble_block(
            pending, self.chain.head, self.node_id, now, self.block_size,
            allow_empty=self.allow_empty_blocks,
        )
        height = block.height
        self.preprepares[(self.view, height)] = block
        # The primary's pre-prepare doubles as its prepare vote.
        key = (self.view, height, block.digest)
        self.prepare_votes.setdefault(key, set()).add(self.node_id)
        actions: list[Action] = [
            ProposalCreated(block),
            Broadcast(PrePrepare(self.view, height, block.digest, block, self.chain.height)),
        ]
        actions += self._arm_progress(now)
        actions += self._check_prepared(self.view, height, block.digest, now)
        return actions

    def _maybe_propose(self, now: int, force_any: bool) -> list[Action]:
        if self.primary(self.view) != self.node_id:
            return []
        if (self.view, self.chain.height + 1) in self.preprepares:
            return []  # proposal already in flight for this view
        pending = self.mempool_cut()
        if not pending:
            return []
        if not force_any and len(pending) < self.block_size:
            return []
        try:
            return self.propose(now)
        except EmptyProposalForbidden:
            return []

    # -- phase handlers --------------------------------------------------------

    def _on_preprepare(self, src: int, pp: PrePrepare, now: int) -> list[Action]:
        actions = self._sync_check(src, pp.head, now)
        actions += self._note_view_evidence(src, pp.view)
        if pp.view != self.view:
            return actions
        if src != self.primary(pp.view) or pp.block.proposer != src:
            return actions
        expected = block_digest(
            pp.block.height, pp.block.parent_ref, pp.block.proposer, pp.block.transactions
        )
        if pp.digest != pp.block.digest or pp.block.digest != expected:
            return actions  # corrupted in flight; tallies nothing
        if pp.height <= self.chain.height:
            return actions
        if pp.height > self.chain.height + 1:
            if len(self.future_buffer) < 2 * self.block_size:
                self.future_buffer[(pp.view, pp.height)] = (src, pp)
            return actions
        if (pp.view, pp.height) in self.preprepares:
            return actions
        self.preprepares[(pp.view, pp.height)] = pp.block
        key = (pp.view, pp.height, pp.digest)
        self.prepare_votes.setdefault(key, set()).add(self.primary(pp.view))
        self.prepare_votes[key].add(self.node_id)
        actions.append(Broadcast(Prepare(pp.view, pp.height, pp.digest, self.chain.height)))
        actions += self._arm_progress(now)
        actions += self._check_prepared(pp.view, pp.height, pp.digest, now)
        return actions

    def _on_prepare(self, src: int, msg: Prepare, now: int) -> list[Action]:
        actions = self._sync_check(src, msg.head, now)
        actions += self._note_view_evidence(src, msg.view)
        key = (msg.view, msg.height, msg.digest)
        self.prepare_votes.setdefault(key, set()).add(src)
        actions += self._check_prepared(msg.view, msg.height, msg.digest, now)
        return actions

    def _check_prepared(self, view: int, height: int, digest: str, now: int) -> list[Action]:
        key = (view, height, digest)
        if key in self.sent_commit:
            return []
        block = self.preprepares.get((view, height))
        if block is None or block.digest != digest:
            return []
        if len(self.prepare_votes.get(key, ())) < self.prepare_quorum:
            return []
        self.sent_commit.add(key)
        self.commit_votes.setdefault(key, set()).add(self.node_id)
        actions: list[Action] = [Broadcast(CommitVote(view, height, digest, self.chain.height))]
        actions += self._check_committed(view, height, digest, now)
        return actions

    def _on_commit_vote(self, src: int, msg: CommitVote, now: int) -> list[Action]:
        actions = self._sync_check(src, msg.head, now)
        actions += self._note_view_evidence(src, msg.view)
        key = (msg.view, msg.height, msg.digest)
        self.commit_votes.setdefault(key, set()).add(src)
        actions += self._check_committed(msg.view, msg.height, msg.digest, now)
        return actions

    def _check_committed(self, view: int, height: int, digest: str, now: int) -> list[Action]:
        key = (view, height, digest)
        if len(self.commit_votes.get(key, ())) < self.commit_quorum:
            return []
        if height != self.chain.height + 1:
            return []
        block = self.preprepares.get((view, height))
        if block is None or block.digest != digest:
            return []
        verdict = validate_block(
            block, self.chain.head, self.chain.state,
            authorized=lambda p: p == self.primary(view),
        )
        if not verdict:
            # Quorum formed over a block the ledger rejects: abandon the
            # proposal; the view-change path will re-propose the payload.
            del self.preprepares[(view, height)]
            return [LogNote(f"abandon height={height} digest={digest} reason={verdict.reason}")]
        return self._commit(block, now)

    def _commit(self, block: Block, now: int) -> list[Action]:
        self.chain.append(block, now)
        self.mempool_purge_committed(block)
        self.fail_streak = 0
        self._progress_armed = False
        actions: list[Action] = [CommitBlock(block), CancelTimer("progress")]
        height = block.height
        for key in [k for k in self.preprepares if k[1] <= height]:
            del self.preprepares[key]
        for key in [k for k in self.prepare_votes if k[1] <= height]:
            del self.prepare_votes[key]
        for key in [k for k in self.commit_votes if k[1] <= height]:
            del self.commit_votes[key]
        self.sent_commit = {k for k in self.sent_commit if k[1] > height}
        actions += self._replay_buffered(now)
        actions += self._recheck_commit_tallies(now)
        actions += self._maybe_propose(now, force_any=False)
        if self._work_pending():
            actions += self._arm_progress(now)
        return actions

    def _replay_buffered(self, now: int) -> list[Action]:
        actions: list[Action] = []
        target = self.chain.height + 1
        for key in sorted(k for k in self.future_buffer if k[1] == target):
            src, pp = self.future_buffer.pop(key)
            actions += self._on_preprepare(src, pp, now)
        return actions

    def _recheck_commit_tallies(self, now: int) -> list[Action]:
        target = self.chain.height + 1
        for (view, height, digest) in sorted(self.commit_votes):
            if height == target:
                actions = self._check_committed(view, height, digest, now)
                if actions:
                    return actions
        return []

    # -- view changes ----------------------------------------------------------

    def _start_view_change(self, now: int) -> list[Action]:
        self._progress_armed = False
        self.fail_streak += 1
        target = max(self.view + 1, self.own_vc_target + 1)
        self.own_vc_target = target
        self.view_change_votes.setdefault(target, set()).add(self.node_id)
        timeout = self.config.progress_timeout_ms * (2 ** self.fail_streak)
        actions: list[Action] = [
            LogNote(f"view_change target={target} timeout={timeout}"),
            Broadcast(ViewChange(target, self.chain.height)),
        ]
        actions += self._arm_progress(now)
        actions += self._try_adopt_from_votes(target, now)
        return actions

    def _on_view_change_msg(self, src: int, msg: ViewChange, now: int) -> list[Action]:
        actions = self._sync_check(src, msg.head, now)
        if msg.new_view <= self.view:
            return actions
        votes = self.view_change_votes.setdefault(msg.new_view, set())
        votes.add(src)
        # Join once f+1 peers want the same new view, even before our timer fires.
        if len(votes) >= self.validators.f + 1 and self.own_vc_target < msg.new_view:
            self.own_vc_target = msg.new_view
            votes.add(self.node_id)
            actions.append(Broadcast(ViewChange(msg.new_view, self.chain.height)))
        actions += self._try_adopt_from_votes(msg.new_view, now)
        return actions

    def _try_adopt_from_votes(self, target: int, now: int) -> list[Action]:
        votes = self.view_change_votes.get(target, set())
        if target <= self.view or len(votes) < 2 * self.validators.f + 1:
            return []
        actions = self._adopt_view(target)
        if self.primary(target) == self.node_id:
            actions += self._maybe_propose(now, force_any=True)
        if self._work_pending():
            actions += self._arm_progress(now)
        return actions

    # -- chain sync --------------------------------------------------------------

    def _on_sync_request(self, src: int, msg: SyncRequest) -> list[Action]:
        if self.chain.height <= msg.have_height:
            return []
        lo = msg.have_height + 1
        blocks = tuple(self.chain.blocks[lo : lo + MAX_SYNC_BLOCKS])
        return [Send(src, SyncBlocks(blocks))]

    def _on_sync_blocks(self, msg: SyncBlocks, now: int) -> list[Action]:
        actions: list[Action] = []
        for block in msg.blocks:
            if block.height != self.chain.height + 1:
                continue
            verdict = validate_block(
                block, self.chain.head, self.chain.state,
                authorized=lambda p: p in self.validators.ids,
            )
            if not verdict:
                actions.append(LogNote(f"sync_reject height={block.height} reason={verdict.reason}"))
                break
            actions += self._commit(block, now)
        return actions
