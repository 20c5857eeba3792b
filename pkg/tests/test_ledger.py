import pytest
from hypothesis import given, strategies as st

from chainchaos.ledger import (
    GENESIS,
    AccountState,
    Block,
    ChainCopy,
    DuplicateAccount,
    EmptyProposalForbidden,
    InsufficientFunds,
    Transaction,
    UnknownAccount,
    apply_transaction,
    assemble_block,
    block_digest,
    create_account,
    take_valid,
    validate_block,
)
from conftest import make_txs


def tx(amount, frm="alice", to="bob", tx_id="t0"):
    return Transaction(tx_id, frm, to, amount, 0)


class TestAccounts:
    def test_transfer_arithmetic(self):
        state = create_account(create_account(AccountState(), "alice", 100), "bob", 0)
        new = apply_transaction(state, tx(30))
        assert new.balance("alice") == 70
        assert new.balance("bob") == 30
        assert state.balance("alice") == 100  # original untouched

    def test_zero_transfer_changes_nothing(self):
        state = create_account(create_account(AccountState(), "alice", 100), "bob", 0)
        new = apply_transaction(state, tx(0))
        assert new.balances == state.balances

    def test_overdraft_rejected_state_unchanged(self):
        state = create_account(create_account(AccountState(), "alice", 10), "bob", 0)
        with pytest.raises(InsufficientFunds):
            apply_transaction(state, tx(30))
        assert state.balance("alice") == 10

    def test_unknown_account(self):
        state = create_account(AccountState(), "alice", 10)
        with pytest.raises(UnknownAccount):
            apply_transaction(state, tx(1))

    def test_create_account(self):
        state = create_account(AccountState(), "a", 100)
        assert state.balance("a") == 100
        assert create_account(AccountState(), "a", 0).balance("a") == 0

    def test_duplicate_account(self):
        state = create_account(AccountState(), "a", 100)
        with pytest.raises(DuplicateAccount):
            create_account(state, "a", 5)

    def test_self_transfer_invalid(self):
        with pytest.raises(ValueError):
            Transaction("t", "a", "a", 1, 0)

    def test_negative_amount_invalid(self):
        with pytest.raises(ValueError):
            Transaction("t", "a", "b", -1, 0)


@given(
    amounts=st.lists(st.integers(min_value=0, max_value=50), max_size=40),
)
def test_conservation_and_non_negativity(amounts):
    state = create_account(create_account(AccountState(), "alice", 100), "bob", 100)
    supply = state.total_supply()
    for i, amount in enumerate(amounts):
        t = Transaction(f"t{i}", *(("alice", "bob") if i % 2 == 0 else ("bob", "alice")), amount, 0)
        try:
            state = apply_transaction(state, t)
        except InsufficientFunds:
            pass
        assert state.total_supply() == supply
        assert all(v >= 0 for v in state.balances.values())


class TestBlocks:
    def test_genesis_is_well_known(self):
        assert GENESIS.height == 0
        assert GENESIS.digest == block_digest(0, "0" * 16, -1, ())

    def test_digest_depends_on_content(self):
        a = Block.make(1, GENESIS.digest, 0, make_txs(2), 5)
        b = Block.make(1, GENESIS.digest, 0, make_txs(2, amount=2), 5)
        assert a.digest != b.digest
        # proposed_at is excluded from the digest
        c = Block.make(1, GENESIS.digest, 0, make_txs(2), 99)
        assert a.digest == c.digest

    def test_assemble_cuts_fifo(self):
        pending = make_txs(25)
        block = assemble_block(pending, GENESIS, 0, 10, block_size=10)
        assert [t.tx_id for t in block.transactions] == [f"t{i}" for i in range(10)]
        assert block.height == 1 and block.parent_ref == GENESIS.digest

    def test_assemble_below_capacity(self):
        block = assemble_block(make_txs(4), GENESIS, 0, 10, block_size=10)
        assert len(block.transactions) == 4

    def test_assemble_empty_forbidden(self):
        with pytest.raises(EmptyProposalForbidden):
            assemble_block([], GENESIS, 0, 10, block_size=10)
        assert assemble_block([], GENESIS, 0, 10, block_size=10, allow_empty=True).transactions == ()


class TestValidation:
    def setup_method(self):
        self.state = create_account(create_account(AccountState(), "alice", 1000), "bob", 1000)

    def test_well_formed_child_valid(self):
        block = Block.make(1, GENESIS.digest, 0, make_txs(3), 5)
        assert validate_block(block, GENESIS, self.state)

    def test_height_and_parent_mismatch(self):
        block = Block.make(2, GENESIS.digest, 0, (), 5)
        assert validate_block(block, GENESIS, self.state).reason == "HeightMismatch"
        block = Block.make(1, "beef" * 4, 0, (), 5)
        assert validate_block(block, GENESIS, self.state).reason == "ParentMismatch"

    def test_digest_mismatch_detected(self):
        import dataclasses

        block = Block.make(1, GENESIS.digest, 0, make_txs(2), 5)
        tampered = dataclasses.replace(block, digest="0" * 16)
        assert validate_block(tampered, GENESIS, self.state).reason == "DigestMismatch"

    def test_overdraft_tx_invalidates_block(self):
        bad = Transaction("t9", "alice", "bob", 10_000, 0)
        block = Block.make(1, GENESIS.digest, 0, (bad,), 5)
        assert validate_block(block, GENESIS, self.state).reason == "TxRejected"

    def test_unauthorized_proposer(self):
        block = Block.make(1, GENESIS.digest, 9, (), 5)
        verdict = validate_block(block, GENESIS, self.state, authorized=lambda p: p < 6)
        assert verdict.reason == "UnauthorizedProposer"


class TestChainCopy:
    def test_append_and_replay(self, funded_state):
        chain = ChainCopy(funded_state)
        b1 = Block.make(1, GENESIS.digest, 0, make_txs(3, amount=5), 10)
        chain.append(b1, 12)
        b2 = Block.make(2, b1.digest, 1, make_txs(2, start_id=3, amount=7), 20)
        chain.append(b2, 22)
        assert chain.height == 2
        assert chain.replay_state(funded_state) == chain.state
        assert chain.state.total_supply() == funded_state.total_supply()
        assert chain.committed_tx_ids == {"t0", "t1", "t2", "t3", "t4"}

    def test_append_rejects_gaps(self, funded_state):
        chain = ChainCopy(funded_state)
        b2 = Block.make(2, GENESIS.digest, 0, (), 10)
        with pytest.raises(Exception):
            chain.append(b2, 10)

    def test_dump_lines(self, funded_state):
        chain = ChainCopy(funded_state)
        b1 = Block.make(1, GENESIS.digest, 3, make_txs(2), 10)
        chain.append(b1, 15)
        lines = chain.dump_lines()
        assert lines[0] == f"0,{GENESIS.digest},-1,0,0"
        assert lines[1] == f"1,{b1.digest},3,2,15"


class TestTakeValid:
    def test_skips_committed_and_invalid(self, funded_state):
        txs = make_txs(5) + [Transaction("big", "alice", "bob", 10_000, 0)]
        taken = take_valid(txs, funded_state, {"t1"}, 10)
        assert [t.tx_id for t in taken] == ["t0", "t2", "t3", "t4"]

    def test_respects_running_balance(self, funded_state):
        # alice has 1000; two 600-unit transfers cannot both apply
        txs = [
            Transaction("a", "alice", "bob", 600, 0),
            Transaction("b", "alice", "bob", 600, 0),
        ]
        taken = take_valid(txs, funded_state, set(), 10)
        assert [t.tx_id for t in taken] == ["a"]
