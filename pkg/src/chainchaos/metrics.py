"""Write throughput, write latency, and block success rate.

Latency is committed_at - created_at per transaction (integer milliseconds),
measured at the transaction's submission endpoint: the first commit of a
block containing the transaction by the validator it was submitted to.
Aggregates use exact integer arithmetic; windows with no commits report an
absent median rather than zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable


class MetricsError(Exception):
    pass


class ZeroRuntime(MetricsError):
    pass


class NoCommittedTransactions(MetricsError):
    pass


class NoBlocksCreated(MetricsError):
    pass


@dataclass
class TxRecord:
    tx_id: str
    user: str
    endpoint: int
    created_at: int
    committed_at: int | None = None
    status: str = "pending"  # pending | committed | rejected | expired

    @property
    def latency_ms(self) -> int | None:
        if self.committed_at is None:
            return None
        return self.committed_at - self.created_at


def compute_throughput(committed_count: int, runtime_ms: int) -> float:
    """Committed transactions per second of simulated runtime."""
    if runtime_ms <= 0:
        raise ZeroRuntime(str(runtime_ms))
    return committed_count * 1000 / runtime_ms


def compute_latency(latencies_ms: list[int]) -> tuple[float, float]:
    """(mean, median) over committed-transaction latencies."""
    if not latencies_ms:
        raise NoCommittedTransactions()
    ordered = sorted(latencies_ms)
    mean = sum(ordered) / len(ordered)
    return mean, _median(ordered)


def _median(ordered: list[int]) -> float:
    n = len(ordered)
    mid = n // 2
    if n % 2 == 1:
        return float(ordered[mid])
    return (ordered[mid - 1] + ordered[mid]) / 2


def compute_success_rate(created_digests: Iterable[str], committed_digests: Iterable[str]) -> float:
    """Distinct committed block digests over distinct created (proposed) ones."""
    created = set(created_digests)
    if not created:
        raise NoBlocksCreated()
    committed = set(committed_digests)
    return len(committed & created) / len(created)


@dataclass
class WindowStats:
    start_ms: int
    throughput_tps: float
    median_latency_ms: float | None
    running_avg_latency_ms: float | None
    committed_blocks: int
    created_blocks: int
    active_faults: str

    def csv_row(self) -> str:
        med = "" if self.median_latency_ms is None else f"{self.median_latency_ms:g}"
        run = "" if self.running_avg_latency_ms is None else f"{self.running_avg_latency_ms:g}"
        return (
            f"{self.start_ms},{self.throughput_tps:g},{med},{run},"
            f"{self.committed_blocks},{self.created_blocks},{self.active_faults}"
        )


WINDOW_CSV_HEADER = (
    "window_start_ms,throughput_tps,median_latency_ms,running_avg_latency_ms,"
    "committed_blocks,created_blocks,active_faults"
)


@dataclass
class MetricsReport:
    protocol: str
    seed: int
    runtime_ms: int
    measure_after_ms: int
    tp: float | None
    avg_latency_ms: float | None
    median_latency_ms: float | None
    success_rate: float | None
    blocks_created: int
    blocks_committed: int
    blocks_settled: int
    tx_committed: int
    tx_pending: int
    tx_rejected: int
    request_timeouts: int
    windows: list[WindowStats] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "runtime_ms": self.runtime_ms,
            "measure_after_ms": self.measure_after_ms,
            "tp": self.tp,
            "avg_latency_ms": self.avg_latency_ms,
            "median_latency_ms": self.median_latency_ms,
            "success_rate": self.success_rate,
            "blocks_created": self.blocks_created,
            "blocks_committed": self.blocks_committed,
            "blocks_settled": self.blocks_settled,
            "tx_committed": self.tx_committed,
            "tx_pending": self.tx_pending,
            "tx_rejected": self.tx_rejected,
            "request_timeouts": self.request_timeouts,
        }

    def to_json(self) -> str:
        doc = dict(self.aggregates())
        doc["config"] = self.config
        doc["windows"] = [
            {
                "start_ms": w.start_ms,
                "throughput_tps": w.throughput_tps,
                "median_latency_ms": w.median_latency_ms,
                "running_avg_latency_ms": w.running_avg_latency_ms,
                "committed_blocks": w.committed_blocks,
                "created_blocks": w.created_blocks,
                "active_faults": w.active_faults,
            }
            for w in self.windows
        ]
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def windows_csv(self) -> str:
        lines = [WINDOW_CSV_HEADER] + [w.csv_row() for w in self.windows]
        return "\n".join(lines) + "\n"


class MetricsCollector:
    """Accumulates records during the run; report generation is post-run."""

    def __init__(self, window_ms: int = 1000, measure_after_ms: int = 0) -> None:
        self.window_ms = window_ms
        self.measure_after_ms = measure_after_ms
        self.records: dict[str, TxRecord] = {}
        self.proposals: dict[str, int] = {}  # digest -> first ProposalCreated tick
        self.committed_blocks: dict[str, int] = {}  # digest -> first commit tick anywhere
        self.settled_blocks: set[str] = set()  # canonical at horizon, not yet buried
        self.request_timeouts = 0

    # -- feed ------------------------------------------------------------------

    def on_submit(self, tx_id: str, user: str, endpoint: int, created_at: int) -> None:
        self.records[tx_id] = TxRecord(tx_id, user, endpoint, created_at)

    def on_reject(self, tx_id: str) -> None:
        rec = self.records.get(tx_id)
        if rec is not None and rec.status == "pending":
            rec.status = "rejected"

    def on_request_timeout(self) -> None:
        self.request_timeouts += 1

    def on_proposal(self, digest: str, now: int) -> None:
        self.proposals.setdefault(digest, now)

    def on_block_commit(self, digest: str, now: int) -> None:
        self.committed_blocks.setdefault(digest, now)

    def on_endpoint_commit(self, tx_id: str, now: int) -> None:
        rec = self.records.get(tx_id)
        if rec is not None and rec.committed_at is None:
            rec.committed_at = now
            rec.status = "committed"

    def on_settled(self, digests: Iterable[str]) -> None:
        self.settled_blocks.update(digests)

    def finalize(self, horizon_ms: int) -> None:
        for rec in self.records.values():
            if rec.status == "pending":
                rec.status = "expired"

    # -- report ------------------------------------------------------------------

    def build_report(
        self,
        protocol: str,
        seed: int,
        horizon_ms: int,
        fault_schedule=None,
        config: dict | None = None,
    ) -> MetricsReport:
        measured = [
            r for r in self.records.values()
            if r.status == "committed" and r.created_at >= self.measure_after_ms
        ]
        latencies = [r.latency_ms for r in measured]
        runtime_ms = horizon_ms - self.measure_after_ms
        tp = compute_throughput(len(measured), runtime_ms) if runtime_ms > 0 else None
        if latencies:
            avg, med = compute_latency(latencies)
        else:
            avg = med = None
        sr = None
        if self.proposals:
            added = set(self.committed_blocks) | self.settled_blocks
            sr = compute_success_rate(self.proposals, added)
        pending = sum(1 for r in self.records.values() if r.status == "expired")
        rejected = sum(1 for r in self.records.values() if r.status == "rejected")
        return MetricsReport(
            protocol=protocol,
            seed=seed,
            runtime_ms=runtime_ms,
            measure_after_ms=self.measure_after_ms,
            tp=tp,
            avg_latency_ms=avg,
            median_latency_ms=med,
            success_rate=sr,
            blocks_created=len(self.proposals),
            blocks_committed=len(self.committed_blocks),
            blocks_settled=len(self.settled_blocks - set(self.committed_blocks)),
            tx_committed=len(measured),
            tx_pending=pending,
            tx_rejected=rejected,
            request_timeouts=self.request_timeouts,
            windows=self.build_windows(horizon_ms, fault_schedule or []),
            config=dict(config or {}),
        )

    def build_windows(self, horizon_ms: int, fault_schedule) -> list[WindowStats]:
        committed = sorted(
            (r.committed_at, r.latency_ms)
            for r in self.records.values()
            if r.committed_at is not None
        )
        windows: list[WindowStats] = []
        running_sum = 0
        running_count = 0
        idx = 0
        for start in range(0, horizon_ms, self.window_ms):
            end = min(start + self.window_ms, horizon_ms)
            lats: list[int] = []
            while idx < len(committed) and committed[idx][0] < end:
                lats.append(committed[idx][1])
                running_sum += committed[idx][1]
                running_count += 1
                idx += 1
            med = _median(sorted(lats)) if lats else None
            running = running_sum / running_count if running_count else None
            blocks_c = sum(1 for t in self.committed_blocks.values() if start <= t < end)
            blocks_p = sum(1 for t in self.proposals.values() if start <= t < end)
            active = sorted(
                {s.kind.value for s in fault_schedule if s.start < end and s.end > start}
            )
            windows.append(
                WindowStats(
                    start_ms=start,
                    throughput_tps=len(lats) * 1000 / (end - start),
                    median_latency_ms=med,
                    running_avg_latency_ms=running,
                    committed_blocks=blocks_c,
                    created_blocks=blocks_p,
                    active_faults=";".join(active),
                )
            )
        return windows

    def stats_between(self, start_ms: int, end_ms: int) -> tuple[float, float | None]:
        """(throughput, median latency) over commits inside [start, end)."""
        lats = [
            r.latency_ms
            for r in self.records.values()
            if r.committed_at is not None and start_ms <= r.committed_at < end_ms
        ]
        tp = len(lats) * 1000 / (end_ms - start_ms)
        med = _median(sorted(lats)) if lats else None
        return tp, med
