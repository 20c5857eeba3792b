"""Asset-transfer ledger: accounts, transactions, block assembly and
validation, and the per-node committed chain copy.

Balances and amounts are non-negative integers; transfers conserve total
supply. Block digests are deterministic content hashes (detection of in-flight
corruption is in scope, cryptographic strength is not).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence


class LedgerError(Exception):
    pass


class InsufficientFunds(LedgerError):
    pass


class UnknownAccount(LedgerError):
    pass


class DuplicateAccount(LedgerError):
    pass


class EmptyProposalForbidden(LedgerError):
    pass


class ChainError(LedgerError):
    """Committed-chain invariant violation (non-consecutive height, bad parent)."""


def content_digest(*parts) -> str:
    joined = "|".join(str(p) for p in parts)
    return hashlib.blake2b(joined.encode(), digest_size=8).hexdigest()


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    from_account: str
    to_account: str
    amount: int
    created_at: int

    def __post_init__(self) -> None:
        if self.amount < 0:
            raise ValueError("amount must be non-negative")
        if self.from_account == self.to_account:
            raise ValueError("self-transfer is not a transaction")


def _tx_fingerprint(tx: Transaction) -> str:
    return f"{tx.tx_id}:{tx.from_account}:{tx.to_account}:{tx.amount}"


def block_digest(
    height: int, parent_ref: str, proposer: int, transactions: Sequence[Transaction]
) -> str:
    return content_digest(
        height, parent_ref, proposer, *(_tx_fingerprint(t) for t in transactions)
    )


@dataclass(frozen=True)
class Block:
    height: int
    parent_ref: str
    proposer: int
    transactions: tuple[Transaction, ...]
    proposed_at: int
    digest: str

    @staticmethod
    def make(
        height: int,
        parent_ref: str,
        proposer: int,
        transactions: Sequence[Transaction],
        proposed_at: int,
    ) -> "Block":
        txs = tuple(transactions)
        return Block(
            height=height,
            parent_ref=parent_ref,
            proposer=proposer,
            transactions=txs,
            proposed_at=proposed_at,
            digest=block_digest(height, parent_ref, proposer, txs),
        )


# Well-known genesis: height 0, no proposer, fixed digest on every chain.
GENESIS = Block.make(0, "0" * 16, -1, (), 0)


class AccountState:
    """Account -> balance map. Mutating helpers return new states."""

    __slots__ = ("balances",)

    def __init__(self, balances: dict[str, int] | None = None) -> None:
        self.balances: dict[str, int] = dict(balances) if balances else {}

    def copy(self) -> "AccountState":
        return AccountState(self.balances)

    def balance(self, account: str) -> int:
        try:
            return self.balances[account]
        except KeyError:
            raise UnknownAccount(account) from None

    def total_supply(self) -> int:
        return sum(self.balances.values())

    def __eq__(self, other) -> bool:
        return isinstance(other, AccountState) and self.balances == other.balances


def create_account(state: AccountState, account_id: str, initial_balance: int) -> AccountState:
    if initial_balance < 0:
        raise ValueError("initial balance must be non-negative")
    if account_id in state.balances:
        raise DuplicateAccount(account_id)
    new = state.copy()
    new.balances[account_id] = initial_balance
    return new


def apply_transaction(state: AccountState, tx: Transaction) -> AccountState:
    """Transfer tx.amount between accounts; rejections leave `state` untouched."""
    if tx.from_account not in state.balances:
        raise UnknownAccount(tx.from_account)
    if tx.to_account not in state.balances:
        raise UnknownAccount(tx.to_account)
    if state.balances[tx.from_account] < tx.amount:
        raise InsufficientFunds(
            f"{tx.from_account} has {state.balances[tx.from_account]}, needs {tx.amount}"
        )
    new = state.copy()
    new.balances[tx.from_account] -= tx.amount
    new.balances[tx.to_account] += tx.amount
    return new


def _apply_all(state: AccountState, txs: Iterable[Transaction]) -> AccountState:
    for tx in txs:
        state = apply_transaction(state, tx)
    return state


def assemble_block(
    pending: Sequence[Transaction],
    parent: Block,
    proposer: int,
    now: int,
    block_size: int,
    allow_empty: bool = False,
) -> Block:
    """Cut up to block_size transactions from the front of the queue."""
    taken = tuple(pending[:block_size])
    if not taken and not allow_empty:
        raise EmptyProposalForbidden("no pending transactions and empty blocks disabled")
    return Block.make(parent.height + 1, parent.digest, proposer, taken, now)


@dataclass(frozen=True)
class Validity:
    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


VALID = Validity(True)


def validate_block(
    block: Block,
    parent: Block,
    state: AccountState,
    authorized: Callable[[int], bool] | None = None,
) -> Validity:
    """Full structural + semantic check of a block against its parent.

    Invalid is a value, not an error; corrupted blocks must flow through here
    without raising.
    """
    if block.height != parent.height + 1:
        return Validity(False, "HeightMismatch")
    if block.parent_ref != parent.digest:
        return Validity(False, "ParentMismatch")
    if block.digest != block_digest(
        block.height, block.parent_ref, block.proposer, block.transactions
    ):
        return Validity(False, "DigestMismatch")
    if authorized is not None and not authorized(block.proposer):
        return Validity(False, "UnauthorizedProposer")
    try:
        _apply_all(state.copy(), block.transactions)
    except LedgerError:
        return Validity(False, "TxRejected")
    return VALID


class ChainCopy:
    """One node's committed chain plus the account state it implies.

    Appends enforce consecutive heights, parent linkage, transaction replay,
    and supply conservation; a violation raising here is a simulator bug, not
    a protocol outcome.
    """

    def __init__(self, genesis_state: AccountState) -> None:
        self.blocks: list[Block] = [GENESIS]
        self.commit_times: list[int] = [0]
        self.state: AccountState = genesis_state.copy()
        self._initial_supply = self.state.total_supply()
        self.committed_tx_ids: set[str] = set()

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.head.height

    def append(self, block: Block, now: int) -> None:
        if block.height != self.height + 1:
            raise ChainError(f"height {block.height} after {self.height}")
        if block.parent_ref != self.head.digest:
            raise ChainError("parent_ref does not match head digest")
        new_state = _apply_all(self.state.copy(), block.transactions)
        if new_state.total_supply() != self._initial_supply:
            raise ChainError("supply not conserved")
        self.blocks.append(block)
        self.commit_times.append(now)
        self.state = new_state
        self.committed_tx_ids.update(tx.tx_id for tx in block.transactions)

    def replay_state(self, genesis_state: AccountState) -> AccountState:
        state = genesis_state.copy()
        for block in self.blocks[1:]:
            state = _apply_all(state, block.transactions)
        return state

    def dump_lines(self) -> list[str]:
        """`height,digest,proposer,tx_count,committed_at` per committed block."""
        return [
            f"{b.height},{b.digest},{b.proposer},{len(b.transactions)},{t}"
            for b, t in zip(self.blocks, self.commit_times)
        ]


def take_valid(
    mempool: Iterable[Transaction],
    state: AccountState,
    committed_ids: set[str],
    block_size: int,
) -> list[Transaction]:
    """FIFO cut of mempool entries that would apply cleanly on `state`.

    Already-committed ids are skipped; transactions that cannot apply (unknown
    account, overdraft against the running state) are skipped, not taken.
    """
    taken: list[Transaction] = []
    scratch = state.copy()
    for tx in mempool:
        if len(taken) >= block_size:
            break
        if tx.tx_id in committed_ids:
            continue
        try:
            scratch = apply_transaction(scratch, tx)
        except LedgerError:
            continue
        taken.append(tx)
    return taken
