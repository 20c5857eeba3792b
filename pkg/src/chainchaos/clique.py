"""Clique-style proof-of-authority engine.

Signers take turns on a fixed period: the in-turn signer (height mod n)
proposes on schedule with fork weight 2, out-of-turn signers back off with a
randomized delay and weight 1, and no signer may appear twice in any window
of floor(n/2)+1 consecutive blocks. Nodes keep a small fork tree above their
committed chain and adopt the heaviest branch (ties broken by smaller
digest); a block is committed once buried under `confirmation_depth`
descendants, which stands in for PoA probabilistic finality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .engine import (
    Action,
    Broadcast,
    CancelTimer,
    CommitBlock,
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
    AccountState,
    Block,
    Transaction,
    Validity,
    apply_transaction,
    assemble_block,
    take_valid,
    validate_block,
)


class NotAuthorizedSigner(Exception):
    pass


class RecentlySigned(Exception):
    pass


@dataclass(frozen=True)
class NewBlock:
    block: Block
    head: int


CLIQUE_PROTOCOL_PAYLOADS = (NewBlock,)

SYNC_COOLDOWN_MS = 500


@dataclass
class CliqueConfig:
    period_ms: int = 1000
    confirmation_depth: int = 2
    # Floor under the out-of-turn backoff so an in-turn block always lands
    # (one network hop) before any backup timer can fire; keeps fault-free
    # runs fork-free.
    out_of_turn_min_delay_ms: int = 100


@dataclass
class _TreeEntry:
    block: Block
    state_after: AccountState
    cum_weight: int


class CliqueNode(ConsensusNode):
    name = "clique"

    def __init__(self, node_id, validators, chain, rng, block_size, config: CliqueConfig,
                 allow_empty_blocks: bool = False) -> None:
        super().__init__(node_id, validators, chain, rng, block_size, allow_empty_blocks)
        self.config = config
        # Uncommitted blocks above the committed head, keyed by digest.
        self.tree: dict[str, _TreeEntry] = {}
        self.head_digest: str = chain.head.digest
        self._committed_digests: set[str] = {b.digest for b in chain.blocks}
        self._proposal_parent: str | None = None
        self._last_sync_at = -(10**9)

    # -- signer schedule ----------------------------------------------------

    def in_turn_signer(self, height: int) -> int:
        return height % self.validators.n

    def _signer_window(self) -> int:
        return self.validators.n // 2 + 1

    def _recent_signers(self, parent_digest: str) -> set[int]:
        """Proposers of the last window-1 blocks ending at `parent_digest`."""
        recent: set[int] = set()
        need = self._signer_window() - 1
        digest = parent_digest
        while need > 0:
            if digest in self.tree:
                block = self.tree[digest].block
            else:
                idx = self._committed_index(digest)
                if idx is None or idx == 0:
                    break
                block = self.chain.blocks[idx]
            recent.add(block.proposer)
            digest = block.parent_ref
            need -= 1
        return recent

    def _committed_index(self, digest: str) -> int | None:
        if digest not in self._committed_digests:
            return None
        for i in range(len(self.chain.blocks) - 1, -1, -1):
            if self.chain.blocks[i].digest == digest:
                return i
        return None

    def _weight(self, block: Block) -> int:
        return 2 if block.proposer == self.in_turn_signer(block.height) else 1

    # -- head selection -------------------------------------------------------

    def _head_entry(self) -> tuple[Block, AccountState, int]:
        if self.head_digest in self.tree:
            e = self.tree[self.head_digest]
            return e.block, e.state_after, e.block.height
        return self.chain.head, self.chain.state, self.chain.height

    def _best_tip(self) -> str:
        if not self.tree:
            return self.chain.head.digest
        parents = {e.block.parent_ref for e in self.tree.values()}
        tips = [d for d in self.tree if d not in parents]
        return min(tips, key=lambda d: (-self.tree[d].cum_weight, d))

    def _path_from_committed(self, tip_digest: str) -> list[str]:
        path: list[str] = []
        digest = tip_digest
        while digest in self.tree:
            path.append(digest)
            digest = self.tree[digest].block.parent_ref
        path.reverse()
        return path

    # -- lifecycle ---------------------------------------------------------------

    def on_start(self, now: int) -> list[Action]:
        return self._schedule_proposal(now)

    def on_client_tx(self, tx: Transaction, now: int) -> list[Action]:
        if self.mempool_add(tx):
            return [Broadcast(TxGossip(tx))]
        return []

    def _tx_ids_on_path(self, tip_digest: str) -> set[str]:
        ids: set[str] = set()
        digest = tip_digest
        while digest in self.tree:
            block = self.tree[digest].block
            ids.update(tx.tx_id for tx in block.transactions)
            digest = block.parent_ref
        return ids

    def on_timer(self, label: str, now: int) -> list[Action]:
        if label != "propose":
            return []
        head_block, head_state, _ = self._head_entry()
        if self._proposal_parent != head_block.digest:
            return []  # stale timer; head moved and rescheduling raced
        # Exclude transactions anywhere on the canonical path, committed or
        # still awaiting burial, so consecutive blocks never repeat them.
        taken = self.chain.committed_tx_ids | self._tx_ids_on_path(head_block.digest)
        pending = take_valid(self.mempool.values(), head_state, taken, self.block_size)
        if not pending and not self.allow_empty_blocks:
            return [SetTimer("propose", now + self.config.period_ms)]
        block = assemble_block(
            pending, head_block, self.node_id, now, self.block_size,
            allow_empty=self.allow_empty_blocks,
        )
        actions: list[Action] = [
            ProposalCreated(block),
            Broadcast(NewBlock(block, self.chain.height)),
        ]
        self._insert(block, head_state)
        actions += self._adopt(now)
        return actions

    def on_message(self, src: int, payload: Any, now: int) -> list[Action]:
        if isinstance(payload, TxGossip):
            self.mempool_add(payload.tx)
            return []
        if isinstance(payload, NewBlock):
            return self._on_new_block(src, payload, now)
        if isinstance(payload, SyncRequest):
            return self._on_sync_request(src, payload)
        if isinstance(payload, SyncBlocks):
            return self._on_sync_blocks(payload, now)
        return []

    # -- proposing ------------------------------------------------------------------

    def propose(self, now: int) -> list[Action]:
        """Immediate proposal on the current head; raises if ineligible."""
        if self.node_id not in self.validators.ids:
            raise NotAuthorizedSigner(str(self.node_id))
        head_block, head_state, _ = self._head_entry()
        if self.node_id in self._recent_signers(head_block.digest):
            raise RecentlySigned(f"n{self.node_id} signed within the last window")
        self._proposal_parent = head_block.digest
        return self.on_timer("propose", now)

    def _schedule_proposal(self, now: int) -> list[Action]:
        head_block, _, head_height = self._head_entry()
        target = head_height + 1
        self._proposal_parent = head_block.digest
        recent = self._recent_signers(head_block.digest)
        if self.node_id in recent:
            self._proposal_parent = None
            return [CancelTimer("propose")]
        in_turn = self.in_turn_signer(target)
        if self.node_id == in_turn:
            return [SetTimer("propose", now + self.config.period_ms)]
        eligible = [s for s in self.validators.ids if s != in_turn and s not in recent]
        backoff = self.config.out_of_turn_min_delay_ms + self.rng.uniform_int(
            0, 500 * max(1, len(eligible))
        )
        return [SetTimer("propose", now + self.config.period_ms + backoff)]

    # -- block acceptance ---------------------------------------------------------------

    def _validate_incoming(self, block: Block) -> Validity:
        if block.proposer not in self.validators.ids:
            return Validity(False, "UnauthorizedProposer")
        if block.parent_ref == self.chain.head.digest:
            parent, state = self.chain.head, self.chain.state
        elif block.parent_ref in self.tree:
            entry = self.tree[block.parent_ref]
            parent, state = entry.block, entry.state_after
        else:
            return Validity(False, "UnknownParent")
        if block.proposer in self._recent_signers(parent.digest):
            return Validity(False, "RecentlySigned")
        seen = self.chain.committed_tx_ids | self._tx_ids_on_path(parent.digest)
        if any(tx.tx_id in seen for tx in block.transactions):
            return Validity(False, "TxRejected")
        return validate_block(block, parent, state)

    def _on_new_block(self, src: int, msg: NewBlock, now: int) -> list[Action]:
        actions: list[Action] = []
        if msg.head > self.chain.height + len(self.tree) and now - self._last_sync_at >= SYNC_COOLDOWN_MS:
            self._last_sync_at = now
            actions.append(Send(src, SyncRequest(self.chain.height)))
        block = msg.block
        if block.digest in self.tree or block.digest in self._committed_digests:
            return actions
        verdict = self._validate_incoming(block)
        if verdict.reason == "UnknownParent":
            if now - self._last_sync_at >= SYNC_COOLDOWN_MS:
                self._last_sync_at = now
                actions.append(Send(src, SyncRequest(self.chain.height)))
            return actions
        if not verdict:
            actions.append(
                LogNote(f"reject_block height={block.height} digest={block.digest} reason={verdict.reason}")
            )
            return actions
        parent_state = (
            self.tree[block.parent_ref].state_after
            if block.parent_ref in self.tree
            else self.chain.state
        )
        self._insert(block, parent_state)
        actions += self._adopt(now)
        return actions

    def _insert(self, block: Block, parent_state: AccountState) -> None:
        state_after = parent_state
        for tx in block.transactions:
            state_after = apply_transaction(state_after, tx)
        parent_cum = (
            self.tree[block.parent_ref].cum_weight if block.parent_ref in self.tree else 0
        )
        self.tree[block.digest] = _TreeEntry(block, state_after, parent_cum + self._weight(block))

    def _adopt(self, now: int) -> list[Action]:
        best = self._best_tip()
        if best == self.head_digest:
            return []
        self.head_digest = best
        actions: list[Action] = []
        if best in self.tree:
            tip_height = self.tree[best].block.height
            commit_upto = tip_height - self.config.confirmation_depth
            for digest in self._path_from_committed(best):
                block = self.tree[digest].block
                if block.height <= commit_upto:
                    self.chain.append(block, now)
                    self._committed_digests.add(block.digest)
                    self.mempool_purge_committed(block)
                    actions.append(CommitBlock(block))
            self._prune()
        actions += self._schedule_proposal(now)
        return actions

    def _prune(self) -> None:
        """Keep only descendants of the committed head; rebase branch weights."""
        keep: dict[str, _TreeEntry] = {}
        frontier = [self.chain.head.digest]
        while frontier:
            parent = frontier.pop()
            for digest, entry in self.tree.items():
                if entry.block.parent_ref == parent and digest not in keep:
                    keep[digest] = entry
                    frontier.append(digest)
        self.tree = keep
        for digest in sorted(keep, key=lambda d: keep[d].block.height):
            entry = keep[digest]
            parent_cum = (
                keep[entry.block.parent_ref].cum_weight
                if entry.block.parent_ref in keep
                else 0
            )
            entry.cum_weight = parent_cum + self._weight(entry.block)
        if self.head_digest not in self.tree and self.head_digest != self.chain.head.digest:
            self.head_digest = self._best_tip()

    def canonical_tail_digests(self) -> list[str]:
        return self._path_from_committed(self.head_digest)

    # -- chain sync ---------------------------------------------------------------------

    def _on_sync_request(self, src: int, msg: SyncRequest) -> list[Action]:
        blocks: list[Block] = []
        if self.chain.height > msg.have_height:
            blocks.extend(self.chain.blocks[msg.have_height + 1 :])
        for digest in self._path_from_committed(self.head_digest):
            blocks.append(self.tree[digest].block)
        blocks = blocks[:MAX_SYNC_BLOCKS]
        if not blocks:
            return []
        return [Send(src, SyncBlocks(tuple(blocks)))]

    def _on_sync_blocks(self, msg: SyncBlocks, now: int) -> list[Action]:
        actions: list[Action] = []
        for block in msg.blocks:
            if block.height <= self.chain.height or block.digest in self.tree:
                continue
            verdict = self._validate_incoming(block)
            if not verdict:
                if verdict.reason != "UnknownParent":
                    actions.append(
                        LogNote(f"reject_block height={block.height} digest={block.digest} reason={verdict.reason}")
                    )
                break
            parent_state = (
                self.tree[block.parent_ref].state_after
                if block.parent_ref in self.tree
                else self.chain.state
            )
            self._insert(block, parent_state)
        actions += self._adopt(now)
        return actions
