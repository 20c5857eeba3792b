import pytest

from chainchaos.engine import ValidatorSet
from chainchaos.ledger import AccountState, ChainCopy, Transaction, create_account
from chainchaos.runner import RunResult, run_scenario
from chainchaos.scenario import parse_scenario
from chainchaos.sim import RngHub


@pytest.fixture
def funded_state() -> AccountState:
    state = AccountState()
    state = create_account(state, "alice", 1000)
    state = create_account(state, "bob", 1000)
    return state


def make_txs(n: int, start_id: int = 0, amount: int = 1, created_at: int = 0):
    return [
        Transaction(f"t{start_id + i}", "alice", "bob", amount, created_at)
        for i in range(n)
    ]


def make_cluster(node_cls, n: int, config, state: AccountState, block_size: int = 10):
    """Engine nodes over a shared genesis, no network; tests deliver manually."""
    validators = ValidatorSet(n)
    hub = RngHub(1234)
    nodes = {}
    for i in range(n):
        nodes[i] = node_cls(
            node_id=i,
            validators=validators,
            chain=ChainCopy(state),
            rng=hub.register(f"engine.{i}"),
            block_size=block_size,
            config=config,
        )
    return nodes, validators


def run_text(text: str) -> RunResult:
    return run_scenario(parse_scenario(text))


def log_records(result: RunResult, kind: str):
    return [(t, n, d) for (t, _s, k, n, d) in result.log if k == kind]


def detail_fields(detail: str) -> dict:
    return dict(p.split("=", 1) for p in detail.split(" ") if "=" in p)


def commit_events(result: RunResult):
    """(tick, node, height, digest, tx_ids) per commit record."""
    out = []
    for t, node, detail in log_records(result, "commit"):
        f = detail_fields(detail)
        txs = [x for x in f["txs"].split(";") if x]
        out.append((t, node, int(f["height"]), f["digest"], txs))
    return out
