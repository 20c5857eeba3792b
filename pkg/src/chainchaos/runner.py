"""Scenario execution: wires engines, chaos network, workload and metrics
into one deterministic simulation, runs chaos suites, and compares protocols.

The harness performs all I/O for the engines: it turns their actions into
network sends, timers and log records, and feeds deliveries and timer fires
back into them. All post-run safety checks (chain agreement, election safety,
state replay) run here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .clique import CliqueConfig, CliqueNode
from .engine import (
    Action,
    Broadcast,
    CancelTimer,
    ClientReject,
    ClientSubmit,
    CommitBlock,
    ConsensusNode,
    LogNote,
    MalformedPayload,
    ProposalCreated,
    Send,
    SetTimer,
    ValidatorSet,
)
from .ledger import Block, ChainCopy, Transaction
from .metrics import MetricsCollector, MetricsReport
from .net import ChaosNetwork, FaultKind, FaultSpec, Message
from .pbft import PbftConfig, PbftNode
from .raft import RaftConfig, RaftNode
from .scenario import ScenarioSpec, spec_to_text
from .sim import EventKind, RngHub, SimEvent, Simulation, export_event_log
from .workload import WorkloadDriver


class IncomparableScenarios(Exception):
    pass


@dataclass
class RunResult:
    spec: ScenarioSpec
    report: MetricsReport
    log: list
    chains: dict[int, ChainCopy]
    violations: list[str]
    safety_enforced: bool
    collector: MetricsCollector

    def event_log_text(self) -> str:
        return export_event_log(self.log)

    def chain_dump_text(self, node_id: int) -> str:
        return "\n".join(self.chains[node_id].dump_lines()) + "\n"

    def exit_code(self) -> int:
        return 3 if (self.violations and self.safety_enforced) else 0


def _make_node(spec: ScenarioSpec, node_id: int, validators: ValidatorSet,
               chain: ChainCopy, rng) -> ConsensusNode:
    common = dict(
        node_id=node_id, validators=validators, chain=chain, rng=rng,
        block_size=spec.block_size, allow_empty_blocks=spec.allow_empty_blocks,
    )
    if spec.protocol == "pbft":
        return PbftNode(
            config=PbftConfig(spec.pbft_progress_timeout_ms, spec.pbft_block_interval_ms),
            **common,
        )
    if spec.protocol == "raft":
        return RaftNode(
            config=RaftConfig(
                spec.raft_election_timeout_min_ms,
                spec.raft_election_timeout_max_ms,
                spec.raft_heartbeat_interval_ms,
                spec.raft_block_interval_ms,
            ),
            **common,
        )
    return CliqueNode(
        config=CliqueConfig(
            spec.clique_period_ms,
            spec.clique_confirmation_depth,
            spec.clique_out_of_turn_min_delay_ms,
        ),
        **common,
    )


class SimulationHarness:
    def __init__(self, spec: ScenarioSpec) -> None:
        self.spec = spec
        self.sim = Simulation()
        self.hub = RngHub(spec.seed)
        self.validators = ValidatorSet(spec.validators)
        self.metrics = MetricsCollector(spec.window_ms, spec.resolved_measure_after())
        self.workload = WorkloadDriver(
            self.sim, spec.load_profile(), self.hub.register("workload"),
            spec.validators, self.metrics, self._client_submit,
        )
        genesis_state = self.workload.build_genesis_state()
        self._genesis_state = genesis_state
        self.chains = {i: ChainCopy(genesis_state) for i in self.validators.ids}
        self.nodes: dict[int, ConsensusNode] = {
            i: _make_node(spec, i, self.validators, self.chains[i], self.hub.register(f"engine.{i}"))
            for i in self.validators.ids
        }
        self.net = ChaosNetwork(
            self.sim, spec.network_config(), self.validators.ids,
            self.hub.register("net"), self.hub.register("corrupt"),
            deliver=self._deliver, on_pause_change=self._on_pause_change,
            faults_affect_clients=spec.faults_affect_clients,
        )
        self.net.set_fault_schedule(spec.faults)
        self._timers: dict[tuple[int, str], SimEvent] = {}

    # -- action plumbing -------------------------------------------------------

    def _apply(self, node_id: int, actions: list[Action]) -> None:
        now = self.sim.now
        for action in actions:
            if isinstance(action, Send):
                self.net.send(Message(node_id, action.dst, action.payload, now))
            elif isinstance(action, Broadcast):
                for dst in self.validators.others(node_id):
                    self.net.send(Message(node_id, dst, action.payload, now))
            elif isinstance(action, CommitBlock):
                self._on_commit(node_id, action.block)
            elif isinstance(action, SetTimer):
                self._set_timer(node_id, action.label, action.fire_at)
            elif isinstance(action, CancelTimer):
                self._cancel_timer(node_id, action.label)
            elif isinstance(action, ProposalCreated):
                block = action.block
                self.sim.record(
                    "proposal", f"n{node_id}",
                    f"height={block.height} digest={block.digest} txs={len(block.transactions)}",
                )
                self.metrics.on_proposal(block.digest, now)
            elif isinstance(action, ClientReject):
                self.workload.on_rejected(action.tx.tx_id, now)
            elif isinstance(action, LogNote):
                self.sim.record("note", f"n{node_id}", action.detail)
            else:
                raise TypeError(f"unknown action {action!r}")

    def _set_timer(self, node_id: int, label: str, fire_at: int) -> None:
        key = (node_id, label)
        old = self._timers.get(key)
        if old is not None:
            old.cancel()
        self._timers[key] = self.sim.schedule(
            fire_at, EventKind.TIMER, f"n{node_id}", label,
            fn=lambda ev, n=node_id, l=label: self._on_timer_fire(n, l, ev),
        )

    def _cancel_timer(self, node_id: int, label: str) -> None:
        ev = self._timers.pop((node_id, label), None)
        if ev is not None:
            ev.cancel()

    def _on_timer_fire(self, node_id: int, label: str, ev: SimEvent) -> None:
        if self._timers.get((node_id, label)) is ev:
            del self._timers[(node_id, label)]
        if self.net.is_paused(node_id):
            return  # a paused node's timers do not fire
        self._apply(node_id, self.nodes[node_id].on_timer(label, self.sim.now))

    def _deliver(self, msg: Message) -> None:
        node = self.nodes[msg.dst]
        now = self.sim.now
        try:
            if isinstance(msg.payload, ClientSubmit):
                actions = node.on_client_tx(msg.payload.tx, now)
            else:
                actions = node.on_message(msg.src, msg.payload, now)
        except MalformedPayload as exc:
            self.sim.record("malformed", f"n{msg.dst}", str(exc))
            return
        self._apply(msg.dst, actions)

    def _on_commit(self, node_id: int, block: Block) -> None:
        now = self.sim.now
        tx_ids = ";".join(tx.tx_id for tx in block.transactions)
        self.sim.record(
            "commit", f"n{node_id}",
            f"height={block.height} digest={block.digest} txs={tx_ids}",
        )
        self.metrics.on_block_commit(block.digest, now)
        for tx in block.transactions:
            rec = self.metrics.records.get(tx.tx_id)
            if rec is not None and rec.endpoint == node_id:
                self.metrics.on_endpoint_commit(tx.tx_id, now)
                self.workload.on_committed_at_endpoint(tx.tx_id, now)

    def _on_pause_change(self, node_id: int, paused: bool, now: int) -> None:
        if not paused:
            self._apply(node_id, self.nodes[node_id].on_resume(now))

    def _client_submit(self, user: str, tx: Transaction, endpoint: int) -> None:
        self.net.send(Message(user, endpoint, ClientSubmit(tx), self.sim.now))

    # -- run ----------------------------------------------------------------------

    def run(self) -> RunResult:
        spec = self.spec
        for t in range(spec.window_ms, spec.horizon_ms + 1, spec.window_ms):
            self.sim.schedule(t, EventKind.METRICS_TICK, "-", f"window={t}")
        for node_id in sorted(self.nodes):
            self._apply(node_id, self.nodes[node_id].on_start(0))
        self.workload.start()
        self.sim.run_until(spec.horizon_ms)
        for node_id in sorted(self.nodes):
            tail = self.nodes[node_id].canonical_tail_digests()
            if tail:
                self.sim.record("final_head", f"n{node_id}", f"digests={';'.join(tail)}")
                self.metrics.on_settled(tail)
        self.metrics.finalize(spec.horizon_ms)
        violations = self._check_invariants()
        report = self.metrics.build_report(
            spec.protocol, spec.seed, spec.horizon_ms, spec.faults,
            config={"scenario_text": spec_to_text(spec)},
        )
        return RunResult(
            spec=spec,
            report=report,
            log=self.sim.log,
            chains=self.chains,
            violations=violations,
            safety_enforced=agreement_enforced(spec),
            collector=self.metrics,
        )

    # -- post-run invariants ---------------------------------------------------------

    def _check_invariants(self) -> list[str]:
        violations: list[str] = []
        honest = honest_nodes(self.spec)
        chains = {i: [b.digest for b in self.chains[i].blocks] for i in honest}
        ids = sorted(chains)
        for a_pos, a in enumerate(ids):
            for b in ids[a_pos + 1 :]:
                short, long_ = sorted((chains[a], chains[b]), key=len)
                if long_[: len(short)] != short:
                    height = next(
                        h for h, (x, y) in enumerate(zip(short, long_)) if x != y
                    )
                    violations.append(
                        f"chain divergence between n{a} and n{b} at height {height}"
                    )
        for i in sorted(self.nodes):
            replayed = self.chains[i].replay_state(self._genesis_state)
            if replayed != self.chains[i].state:
                violations.append(f"replay mismatch on n{i}")
        violations += election_safety_violations(self.sim.log)
        return violations


def honest_nodes(spec: ScenarioSpec) -> list[int]:
    corrupted: set[int] = set()
    for fault in spec.faults:
        if fault.kind == FaultKind.CORRUPT:
            corrupted.update(fault.nodes)
    return [i for i in range(spec.validators) if i not in corrupted]


def agreement_enforced(spec: ScenarioSpec) -> bool:
    """Whether honest-chain agreement is a hard guarantee for this scenario.

    Corruption voids the guarantee outside each engine's fault-tolerance
    class: pbft tolerates corrupt sets up to f, clique up to a minority of
    signers, raft none at all.
    """
    corrupt_sizes = [
        len(f.nodes) for f in spec.faults if f.kind == FaultKind.CORRUPT
    ]
    if not corrupt_sizes:
        return True
    if spec.protocol == "raft":
        return False
    n = spec.validators
    limit = (n - 1) // 3 if spec.protocol == "pbft" else (n - 1) // 2
    return max(corrupt_sizes) <= limit


def election_safety_violations(log) -> list[str]:
    leaders: dict[int, set[str]] = {}
    for _, _, kind, node, detail in log:
        if kind == "note" and detail.startswith("leader term="):
            term = int(detail.split("=", 1)[1])
            leaders.setdefault(term, set()).add(node)
    return [
        f"multiple leaders in term {term}: {sorted(nodes)}"
        for term, nodes in sorted(leaders.items())
        if len(nodes) > 1
    ]


def run_scenario(spec: ScenarioSpec) -> RunResult:
    return SimulationHarness(spec).run()


# ---------------------------------------------------------------------------
# Chaos suite


@dataclass(frozen=True)
class PhaseStats:
    name: str
    start: int
    end: int
    throughput_tps: float
    median_latency_ms: float | None


@dataclass
class SuiteResult:
    spec: ScenarioSpec
    run: RunResult
    baseline: PhaseStats
    phases: list[PhaseStats]
    recoveries: list[PhaseStats]
    schedule_text: str

    TABLE_COLUMNS = (
        ("baseline", None),
        ("delay (100ms)", "delay"),
        ("loss (15%)", "loss"),
        ("delay+loss", "delay+loss"),
        ("corrupted (50%)", "corrupt-half"),
        ("corrupted+delay+loss", "corrupt-half+delay+loss"),
        ("paused (50%)", "pause-half"),
    )

    def _column_stats(self) -> list[tuple[str, PhaseStats]]:
        by_name = {p.name: p for p in self.phases}
        out = [("baseline", self.baseline)]
        for header, name in self.TABLE_COLUMNS[1:]:
            out.append((header, by_name[name]))
        return out

    def table_text(self) -> str:
        cols = self._column_stats()
        headers = ["metric"] + [h for h, _ in cols]
        tp_row = ["throughput_tps"] + [f"{p.throughput_tps:.2f}" for _, p in cols]
        lat_row = ["median_latency_ms"] + [
            "Null" if p.median_latency_ms is None else f"{p.median_latency_ms:g}"
            for _, p in cols
        ]
        widths = [
            max(len(r[i]) for r in (headers, tp_row, lat_row)) for i in range(len(headers))
        ]
        lines = [f"protocol = {self.spec.protocol}"]
        for row in (headers, tp_row, lat_row):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(lines) + "\n"

    def to_json_doc(self) -> dict:
        def phase_doc(p: PhaseStats) -> dict:
            return {
                "name": p.name,
                "window": [p.start, p.end],
                "throughput_tps": p.throughput_tps,
                "median_latency_ms": p.median_latency_ms,
            }

        return {
            "protocol": self.spec.protocol,
            "seed": self.spec.seed,
            "baseline": phase_doc(self.baseline),
            "phases": [phase_doc(p) for p in self.phases],
            "recoveries": [phase_doc(p) for p in self.recoveries],
            "aggregates": self.run.report.aggregates(),
        }


def build_chaos_phases(spec: ScenarioSpec) -> tuple[list[tuple[str, list[FaultSpec]]], int, int]:
    """The eight-phase fault sequence with equal-length recovery gaps.

    Order: delay, loss, delay+loss, corrupted messages from a single node,
    corrupted from half the validators, corrupted (single) with delay and
    loss, corrupted (half) with delay and loss, paused half. Returns
    (named phase faults, baseline start, horizon).
    """
    length = spec.chaos_phase_ms
    n = spec.validators
    half = tuple(range((n + 1) // 2))
    single = (0,)

    def delay(s, e):
        return FaultSpec(FaultKind.DELAY, s, e, mean_ms=100, jitter_ms=10)

    def loss(s, e):
        return FaultSpec(FaultKind.LOSS, s, e, drop_probability=0.15)

    def corrupt(s, e, nodes):
        return FaultSpec(FaultKind.CORRUPT, s, e, corrupt_probability=1.0, nodes=nodes)

    def pause(s, e, nodes):
        return FaultSpec(FaultKind.PAUSE, s, e, nodes=nodes)

    base_start = resolved_ramp_start(spec)
    t = base_start + length  # baseline window precedes the first fault phase
    phases: list[tuple[str, list[FaultSpec]]] = []
    recipes = [
        ("delay", lambda s, e: [delay(s, e)]),
        ("loss", lambda s, e: [loss(s, e)]),
        ("delay+loss", lambda s, e: [delay(s, e), loss(s, e)]),
        ("corrupt-single", lambda s, e: [corrupt(s, e, single)]),
        ("corrupt-half", lambda s, e: [corrupt(s, e, half)]),
        ("corrupt-single+delay+loss", lambda s, e: [corrupt(s, e, single), delay(s, e), loss(s, e)]),
        ("corrupt-half+delay+loss", lambda s, e: [corrupt(s, e, half), delay(s, e), loss(s, e)]),
        ("pause-half", lambda s, e: [pause(s, e, half)]),
    ]
    for name, build in recipes:
        phases.append((name, build(t, t + length)))
        t += 2 * length  # fault phase, then an equal recovery gap
    horizon = t
    return phases, base_start, horizon


def resolved_ramp_start(spec: ScenarioSpec) -> int:
    from .workload import ramp_end_ms

    if spec.load_mode == "open":
        return 0
    return ramp_end_ms(spec.stages)


def chaos_schedule_text(spec: ScenarioSpec) -> str:
    phases, base_start, horizon = build_chaos_phases(spec)
    length = spec.chaos_phase_ms
    lines = [
        f"phase_length_ms = {length}",
        f"baseline window=[{base_start},{base_start + length})",
    ]
    for i, (name, faults) in enumerate(phases, start=1):
        for fault in faults:
            lines.append(f"phase {i} name={name} {fault.describe()}")
        gap_start = faults[0].end
        lines.append(f"recovery {i} window=[{gap_start},{gap_start + length})")
    lines.append(f"horizon_ms = {horizon}")
    return "\n".join(lines) + "\n"


def run_chaos_suite(base_spec: ScenarioSpec) -> SuiteResult:
    phases, base_start, horizon = build_chaos_phases(base_spec)
    faults = [f for _, fs in phases for f in fs]
    spec = replace(
        base_spec,
        faults=faults,
        horizon_ms=horizon,
        measure_after_ms=base_start,
    )
    result = run_scenario(spec)
    length = base_spec.chaos_phase_ms

    def stats(name: str, start: int, end: int) -> PhaseStats:
        tp, med = result.collector.stats_between(start, end)
        return PhaseStats(name, start, end, tp, med)

    baseline = stats("baseline", base_start, base_start + length)
    phase_stats = []
    recovery_stats = []
    for i, (name, fs) in enumerate(phases, start=1):
        start, end = fs[0].start, fs[0].end
        phase_stats.append(stats(name, start, end))
        recovery_stats.append(stats(f"recovery-{i}", end, end + length))
    return SuiteResult(
        spec=spec,
        run=result,
        baseline=baseline,
        phases=phase_stats,
        recoveries=recovery_stats,
        schedule_text=chaos_schedule_text(base_spec),
    )


# ---------------------------------------------------------------------------
# Protocol comparison


@dataclass
class ComparisonDoc:
    protocols: list[str]
    metrics: dict[str, dict[str, float | None]]  # metric -> protocol -> value
    rankings: dict[str, list[str]]  # metric -> protocols best-first

    def to_json_doc(self) -> dict:
        return {
            "protocols": self.protocols,
            "metrics": self.metrics,
            "rankings": self.rankings,
        }

    def table_text(self) -> str:
        headers = ["metric"] + self.protocols
        rows = [headers]
        for metric, values in self.metrics.items():
            rows.append(
                [metric]
                + [
                    "Null" if values[p] is None else f"{values[p]:.2f}"
                    for p in self.protocols
                ]
            )
        widths = [max(len(r[i]) for r in rows) for i in range(len(headers))]
        lines = [
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in rows
        ]
        lines.append("")
        for metric, ranked in self.rankings.items():
            lines.append(f"ranking {metric}: {' > '.join(ranked)}")
        return "\n".join(lines) + "\n"


_COMPARABLE_PREFIXES = ("horizon_ms", "validators", "block_size", "load.", "fault.")


def _comparable_section(scenario_text: str) -> list[str]:
    return sorted(
        line
        for line in scenario_text.splitlines()
        if line.startswith(_COMPARABLE_PREFIXES)
    )


def compare_protocols(reports: list[dict]) -> ComparisonDoc:
    """Side-by-side comparison of runs over identical load/fault schedules.

    Takes report documents (parsed report.json); raises IncomparableScenarios
    when fewer than two reports are given or their schedules differ.
    """
    if len(reports) < 2:
        raise IncomparableScenarios("need at least two reports to compare")
    sections = [
        _comparable_section(r.get("config", {}).get("scenario_text", "")) for r in reports
    ]
    for other in sections[1:]:
        if other != sections[0]:
            raise IncomparableScenarios("load/fault schedules or horizons differ")
    protocols = [r["protocol"] for r in reports]
    if len(set(protocols)) != len(protocols):
        raise IncomparableScenarios("duplicate protocols in comparison")
    by_protocol = dict(zip(protocols, reports))
    metric_fields = ["tp", "avg_latency_ms", "median_latency_ms", "success_rate"]
    metrics = {
        m: {p: by_protocol[p].get(m) for p in protocols} for m in metric_fields
    }
    higher_better = {"tp": True, "avg_latency_ms": False, "median_latency_ms": False, "success_rate": True}
    rankings = {}
    for m in metric_fields:
        present = [p for p in protocols if metrics[m][p] is not None]
        rankings[m] = sorted(
            present, key=lambda p: metrics[m][p], reverse=higher_better[m]
        )
    return ComparisonDoc(protocols, metrics, rankings)


# ---------------------------------------------------------------------------
# Artifact writing


def write_run_artifacts(result: RunResult, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    paths["events"] = out_dir / "events.log"
    paths["events"].write_text(result.event_log_text())
    paths["report"] = out_dir / "report.json"
    paths["report"].write_text(result.report.to_json())
    paths["windows"] = out_dir / "windows.csv"
    paths["windows"].write_text(result.report.windows_csv())
    paths["config"] = out_dir / "effective-config.txt"
    paths["config"].write_text(spec_to_text(result.spec))
    for node_id in sorted(result.chains):
        p = out_dir / f"chain-n{node_id}.dump"
        p.write_text(result.chain_dump_text(node_id))
        paths[f"chain-n{node_id}"] = p
    return paths
