"""Deterministic discrete-event simulator and chaos-testing harness for
permissioned blockchain consensus engines (PBFT, Raft, Clique)."""

from .ledger import AccountState, Block, Transaction
from .net import FaultKind, FaultSpec, NetworkConfig
from .runner import run_chaos_suite, run_scenario
from .scenario import ScenarioSpec, load_scenario, parse_scenario

__version__ = "0.1.0"

__all__ = [
    "AccountState",
    "Block",
    "FaultKind",
    "FaultSpec",
    "NetworkConfig",
    "ScenarioSpec",
    "Transaction",
    "load_scenario",
    "parse_scenario",
    "run_chaos_suite",
    "run_scenario",
    "__version__",
]
