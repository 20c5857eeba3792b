"""Offline oracle: recomputes every reported metric from the raw event log
and chain dumps, and re-checks safety invariants, independently of the
engine-side counters.

Works purely from artifacts (`events.log`, `chain-n*.dump`, `report.json`),
so a run can be audited after the fact or cross-checked in CI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import _median
from .runner import election_safety_violations, honest_nodes
from .scenario import parse_scenario


@dataclass
class ParsedLog:
    records: list[tuple[int, int, str, str, str]] = field(default_factory=list)
    created: dict[str, int] = field(default_factory=dict)
    endpoint: dict[str, int] = field(default_factory=dict)
    committed_at: dict[str, int] = field(default_factory=dict)
    proposal_digests: dict[str, int] = field(default_factory=dict)
    commit_digests: dict[str, int] = field(default_factory=dict)
    settled_digests: set[str] = field(default_factory=set)


def parse_event_log(text: str) -> ParsedLog:
    out = ParsedLog()
    for raw in text.splitlines():
        if not raw:
            continue
        tick_s, seq_s, kind, node, detail = raw.split(",", 4)
        tick = int(tick_s)
        out.records.append((tick, int(seq_s), kind, node, detail))
        if kind == "submit":
            fields = _kv(detail)
            tx = fields["tx"]
            out.created[tx] = tick
            out.endpoint[tx] = int(fields["endpoint"].lstrip("n"))
        elif kind == "commit":
            fields = _kv(detail)
            digest = fields["digest"]
            out.commit_digests.setdefault(digest, tick)
            committer = int(node.lstrip("n"))
            for tx in fields["txs"].split(";"):
                if not tx:
                    continue
                if out.endpoint.get(tx) == committer and tx not in out.committed_at:
                    out.committed_at[tx] = tick
        elif kind == "proposal":
            digest = _kv(detail)["digest"]
            out.proposal_digests.setdefault(digest, tick)
        elif kind == "final_head":
            digests = _kv(detail)["digests"]
            out.settled_digests.update(d for d in digests.split(";") if d)
    return out


def _kv(detail: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in detail.split(" ") if "=" in part)


def parse_chain_dump(text: str) -> list[tuple[int, str]]:
    """(height, digest) sequence from a `chain-n*.dump` file."""
    chain = []
    for raw in text.splitlines():
        if not raw:
            continue
        height_s, digest, _proposer, _count, _t = raw.split(",", 4)
        chain.append((int(height_s), digest))
    return chain


def recompute_aggregates(log: ParsedLog, runtime_ms: int, measure_after_ms: int) -> dict:
    measured = [
        tx for tx, t in log.created.items()
        if t >= measure_after_ms and tx in log.committed_at
    ]
    latencies = sorted(log.committed_at[tx] - log.created[tx] for tx in measured)
    tp = len(measured) * 1000 / runtime_ms if runtime_ms > 0 else None
    avg = sum(latencies) / len(latencies) if latencies else None
    med = _median(latencies) if latencies else None
    sr = None
    if log.proposal_digests:
        added = (set(log.commit_digests) | log.settled_digests) & set(log.proposal_digests)
        sr = len(added) / len(log.proposal_digests)
    return {
        "tp": tp,
        "avg_latency_ms": avg,
        "median_latency_ms": med,
        "success_rate": sr,
        "tx_committed": len(measured),
        "blocks_created": len(log.proposal_digests),
        "blocks_committed": len(log.commit_digests),
        "blocks_settled": len(log.settled_digests - set(log.commit_digests)),
    }


def verify_run(
    log_text: str,
    chain_texts: dict[str, str],
    report_doc: dict,
) -> list[str]:
    """Return a list of mismatch/violation descriptions; empty means verified."""
    problems: list[str] = []
    log = parse_event_log(log_text)
    recomputed = recompute_aggregates(
        log, report_doc["runtime_ms"], report_doc["measure_after_ms"]
    )
    for key, value in recomputed.items():
        reported = report_doc.get(key)
        if reported != value:
            problems.append(f"{key}: reported {reported!r} != recomputed {value!r}")

    chains = {name: parse_chain_dump(text) for name, text in sorted(chain_texts.items())}
    spec = None
    scenario_text = report_doc.get("config", {}).get("scenario_text", "")
    if scenario_text:
        spec = parse_scenario(scenario_text)
    honest = {f"n{i}" for i in honest_nodes(spec)} if spec else set(chains)
    names = [n for n in sorted(chains) if _dump_node(n) in honest or not honest]
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            da = [d for _, d in chains[a]]
            db = [d for _, d in chains[b]]
            short, long_ = sorted((da, db), key=len)
            if long_[: len(short)] != short:
                problems.append(f"chain divergence between {a} and {b}")
    for name, chain in chains.items():
        heights = [h for h, _ in chain]
        if heights != list(range(len(heights))):
            problems.append(f"{name}: non-consecutive heights")
    problems += election_safety_violations(log.records)
    return problems


def _dump_node(name: str) -> str:
    # "chain-n3" or "chain-n3.dump" or bare "n3"
    stem = Path(name).stem
    return stem.split("-")[-1]


def verify_paths(event_log: Path, chain_dumps: list[Path], report_path: Path) -> list[str]:
    report_doc = json.loads(report_path.read_text())
    chain_texts = {p.name: p.read_text() for p in chain_dumps}
    return verify_run(event_log.read_text(), chain_texts, report_doc)
