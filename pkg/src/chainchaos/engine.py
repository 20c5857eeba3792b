"""Uniform consensus-engine contract.

Engines are state machines driven entirely by the event loop: every handler
returns a list of actions (sends, commits, timer ops) and performs no I/O of
its own, so protocol behaviour is replayable and testable without a network.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Union

from .ledger import Block, ChainCopy, Transaction, take_valid
from .sim import RngStream


class EngineError(Exception):
    pass


class MalformedPayload(EngineError):
    """Raised when an inbound payload cannot be interpreted; the message is
    ignored and logged, never fatal."""


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class Send:
    dst: int
    payload: Any


@dataclass(frozen=True)
class Broadcast:
    payload: Any


@dataclass(frozen=True)
class CommitBlock:
    block: Block


@dataclass(frozen=True)
class SetTimer:
    label: str
    fire_at: int


@dataclass(frozen=True)
class CancelTimer:
    label: str


@dataclass(frozen=True)
class ProposalCreated:
    block: Block


@dataclass(frozen=True)
class ClientReject:
    tx: Transaction
    reason: str


@dataclass(frozen=True)
class LogNote:
    """Structured marker written into the event log (leader elections, view
    adoptions, rejected blocks); the offline verifier reads these."""

    detail: str


Action = Union[
    Send, Broadcast, CommitBlock, SetTimer, CancelTimer, ProposalCreated, ClientReject, LogNote
]


# ---------------------------------------------------------------------------
# Shared payloads (transaction transport and chain catch-up)


@dataclass(frozen=True)
class ClientSubmit:
    tx: Transaction


@dataclass(frozen=True)
class TxGossip:
    tx: Transaction


@dataclass(frozen=True)
class TxForward:
    tx: Transaction


@dataclass(frozen=True)
class SyncRequest:
    have_height: int


@dataclass(frozen=True)
class SyncBlocks:
    blocks: tuple[Block, ...]


# Payload families excluded from per-block protocol-message accounting.
TRANSPORT_PAYLOADS = (ClientSubmit, TxGossip, TxForward, SyncRequest, SyncBlocks)


@dataclass(frozen=True)
class ValidatorSet:
    """Static validator membership and the quorum arithmetic derived from it.

    The byzantine commit quorum is n - f. For n = 3f+1 that equals the classic
    2f+1, and for the in-between sizes (n = 3f+2, 3f+3) it is the smallest
    quorum for which any two quorums still intersect in at least f+1 members,
    which is what makes commits irrevocable across view changes.
    """

    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("need at least one validator")

    @property
    def ids(self) -> range:
        return range(self.n)

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    @property
    def bft_quorum(self) -> int:
        return self.n - self.f

    def others(self, node_id: int) -> list[int]:
        return [i for i in self.ids if i != node_id]


MAX_SYNC_BLOCKS = 200


class ConsensusNode(ABC):
    """Per-node engine instance: owns its chain copy, mempool and rng stream.

    Handlers mutate only their own state and express all effects as actions.
    The harness never delivers to a paused node, so handlers may assume the
    node is live.
    """

    name = "abstract"

    def __init__(
        self,
        node_id: int,
        validators: ValidatorSet,
        chain: ChainCopy,
        rng: RngStream,
        block_size: int,
        allow_empty_blocks: bool = False,
    ) -> None:
        self.node_id = node_id
        self.validators = validators
        self.chain = chain
        self.rng = rng
        self.block_size = block_size
        self.allow_empty_blocks = allow_empty_blocks
        # FIFO mempool keyed by tx id for cheap dedupe.
        self.mempool: "OrderedDict[str, Transaction]" = OrderedDict()

    # -- mempool helpers ----------------------------------------------------

    def mempool_add(self, tx: Transaction) -> bool:
        if tx.tx_id in self.mempool or tx.tx_id in self.chain.committed_tx_ids:
            return False
        self.mempool[tx.tx_id] = tx
        return True

    def mempool_cut(self) -> list[Transaction]:
        """Front slice of the mempool that applies cleanly on the local head."""
        return take_valid(
            self.mempool.values(), self.chain.state, self.chain.committed_tx_ids, self.block_size
        )

    def mempool_purge_committed(self, block: Block) -> None:
        for tx in block.transactions:
            self.mempool.pop(tx.tx_id, None)

    # -- lifecycle ----------------------------------------------------------

    @abstractmethod
    def on_start(self, now: int) -> list[Action]:
        """Arm initial timers. Called once at simulation start."""

    @abstractmethod
    def on_message(self, src: int, payload: Any, now: int) -> list[Action]:
        ...

    @abstractmethod
    def on_timer(self, label: str, now: int) -> list[Action]:
        ...

    @abstractmethod
    def on_client_tx(self, tx: Transaction, now: int) -> list[Action]:
        """A client submitted a transaction at this node's endpoint."""

    def on_resume(self, now: int) -> list[Action]:
        """Rejoin after a pause with pre-pause state; default re-arms as at start."""
        return self.on_start(now)

    def canonical_tail_digests(self) -> list[str]:
        """Digests of blocks on the canonical chain but not yet committed.

        Empty for instant-finality engines; depth-based engines report their
        head path here so end-of-run success-rate accounting does not punish
        blocks that are merely awaiting burial.
        """
        return []
