"""Scenario files: flat, line-oriented `key = value` text with dotted section
prefixes, chosen for diff-friendliness.

A scenario is fully self-describing: parsing the effective-config echo of a
run reproduces the exact same spec, and equal specs with equal seeds produce
equal outputs. Grammar:

    # comment
    protocol = pbft                  # pbft | raft | clique (required)
    seed = 42
    horizon_ms = 60000
    validators = 6
    block_size = 10
    fault.1.kind = delay             # delay | loss | corrupt | pause
    fault.1.start_ms = 10000
    fault.1.end_ms = 20000
    fault.1.mean_ms = 100
    load.stage.1.users = 250
    load.stage.1.spawn_rate = 3
    load.stage.1.hold_ms = 30000

Unlisted keys take the documented defaults; see DEFAULTS below.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .net import FaultKind, FaultSpec, MalformedWindow, NetworkConfig
from .workload import LoadProfile, StageSpec, ramp_end_ms


class ScenarioError(Exception):
    pass


class ParseError(ScenarioError):
    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class ValidationError(ScenarioError):
    def __init__(self, field_name: str, reason: str) -> None:
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


PROTOCOLS = ("pbft", "raft", "clique")

MIN_VALIDATORS = {"pbft": 4, "raft": 3, "clique": 1}


@dataclass
class ScenarioSpec:
    protocol: str
    seed: int = 42
    horizon_ms: int = 60_000
    validators: int = 6
    block_size: int = 10
    allow_empty_blocks: bool = False
    measure_after_ms: int = -1  # -1 = default to the load ramp duration
    window_ms: int = 1000

    base_latency_ms: int = 5
    base_jitter_ms: int = 0
    faults_affect_clients: bool = False

    pbft_progress_timeout_ms: int = 2000
    pbft_block_interval_ms: int = 500
    raft_election_timeout_min_ms: int = 600
    raft_election_timeout_max_ms: int = 1200
    raft_heartbeat_interval_ms: int = 150
    raft_block_interval_ms: int = 500
    clique_period_ms: int = 1000
    clique_confirmation_depth: int = 2
    clique_out_of_turn_min_delay_ms: int = 100

    load_mode: str = "closed"
    load_think_min_ms: int = 500
    load_think_max_ms: int = 1500
    load_response_timeout_ms: int = 10_000
    load_retry_backoff_ms: int = 1000
    load_workers: int = 3
    load_rate_tps: float = 0.0
    load_amount_min: int = 1
    load_amount_max: int = 10
    load_scarce_funding: bool = False
    load_initial_balance: int = -1  # -1 = 10^6, or 100 under scarce funding

    chaos_phase_ms: int = 30_000

    stages: list[StageSpec] = field(default_factory=lambda: [StageSpec(10, 5.0, 0)])
    faults: list[FaultSpec] = field(default_factory=list)

    # -- derived views ---------------------------------------------------------

    def resolved_measure_after(self) -> int:
        if self.measure_after_ms >= 0:
            return self.measure_after_ms
        if self.load_mode == "open":
            return 0
        return ramp_end_ms(self.stages)

    def resolved_initial_balance(self) -> int:
        if self.load_initial_balance >= 0:
            return self.load_initial_balance
        return 100 if self.load_scarce_funding else 10**6

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(self.base_latency_ms, self.base_jitter_ms)

    def load_profile(self) -> LoadProfile:
        return LoadProfile(
            mode=self.load_mode,
            stages=list(self.stages),
            think_min_ms=self.load_think_min_ms,
            think_max_ms=self.load_think_max_ms,
            response_timeout_ms=self.load_response_timeout_ms,
            retry_backoff_ms=self.load_retry_backoff_ms,
            workers=self.load_workers,
            rate_tps=self.load_rate_tps,
            amount_min=self.load_amount_min,
            amount_max=self.load_amount_max,
            scarce_funding=self.load_scarce_funding,
            initial_balance=self.resolved_initial_balance(),
        )


# scalar key -> (attribute, type tag)
_SCALAR_KEYS: dict[str, tuple[str, str]] = {
    "protocol": ("protocol", "str"),
    "seed": ("seed", "int"),
    "horizon_ms": ("horizon_ms", "int"),
    "validators": ("validators", "int"),
    "block_size": ("block_size", "int"),
    "allow_empty_blocks": ("allow_empty_blocks", "bool"),
    "measure_after_ms": ("measure_after_ms", "int"),
    "metrics.window_ms": ("window_ms", "int"),
    "net.base_latency_ms": ("base_latency_ms", "int"),
    "net.base_jitter_ms": ("base_jitter_ms", "int"),
    "net.faults_affect_clients": ("faults_affect_clients", "bool"),
    "pbft.progress_timeout_ms": ("pbft_progress_timeout_ms", "int"),
    "pbft.block_interval_ms": ("pbft_block_interval_ms", "int"),
    "raft.election_timeout_min_ms": ("raft_election_timeout_min_ms", "int"),
    "raft.election_timeout_max_ms": ("raft_election_timeout_max_ms", "int"),
    "raft.heartbeat_interval_ms": ("raft_heartbeat_interval_ms", "int"),
    "raft.block_interval_ms": ("raft_block_interval_ms", "int"),
    "clique.period_ms": ("clique_period_ms", "int"),
    "clique.confirmation_depth": ("clique_confirmation_depth", "int"),
    "clique.out_of_turn_min_delay_ms": ("clique_out_of_turn_min_delay_ms", "int"),
    "load.mode": ("load_mode", "str"),
    "load.think_min_ms": ("load_think_min_ms", "int"),
    "load.think_max_ms": ("load_think_max_ms", "int"),
    "load.response_timeout_ms": ("load_response_timeout_ms", "int"),
    "load.retry_backoff_ms": ("load_retry_backoff_ms", "int"),
    "load.workers": ("load_workers", "int"),
    "load.rate_tps": ("load_rate_tps", "float"),
    "load.amount_min": ("load_amount_min", "int"),
    "load.amount_max": ("load_amount_max", "int"),
    "load.scarce_funding": ("load_scarce_funding", "bool"),
    "load.initial_balance": ("load_initial_balance", "int"),
    "chaos.phase_ms": ("chaos_phase_ms", "int"),
}

_FAULT_KEYS = {
    "kind", "start_ms", "end_ms", "mean_ms", "jitter_ms",
    "drop_probability", "corrupt_probability", "nodes",
}

_STAGE_KEYS = {"users", "spawn_rate", "hold_ms"}


def _parse_value(raw: str, tag: str, line_no: int, key: str):
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ParseError(line_no, f"{key}: cannot parse {raw!r} as {tag}") from None


def load_scenario(path: str | Path) -> ScenarioSpec:
    return parse_scenario(Path(path).read_text())


def parse_scenario(text: str) -> ScenarioSpec:
    """Parse and validate scenario text; all unlisted keys take defaults."""
    scalars: dict[str, object] = {}
    fault_sections: dict[int, dict[str, object]] = {}
    stage_sections: dict[int, dict[str, object]] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(line_no, f"expected `key = value`, got {raw_line.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in _SCALAR_KEYS:
            attr, tag = _SCALAR_KEYS[key]
            scalars[attr] = _parse_value(value, tag, line_no, key)
            continue
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "fault":
            _collect_numbered(fault_sections, parts[1], parts[2], _FAULT_KEYS, value, line_no, key)
            continue
        if len(parts) == 4 and parts[0] == "load" and parts[1] == "stage":
            _collect_numbered(stage_sections, parts[2], parts[3], _STAGE_KEYS, value, line_no, key)
            continue
        raise ParseError(line_no, f"unknown key {key!r}")
    if "protocol" not in scalars:
        raise ValidationError("protocol", "required key is missing")
    spec = ScenarioSpec(**scalars)  # type: ignore[arg-type]
    if stage_sections:
        spec.stages = [_build_stage(i, s) for i, s in sorted(stage_sections.items())]
    spec.faults = [_build_fault(i, s) for i, s in sorted(fault_sections.items())]
    validate_spec(spec)
    return spec


def _collect_numbered(sections, index_str, subkey, allowed, value, line_no, key) -> None:
    try:
        index = int(index_str)
    except ValueError:
        raise ParseError(line_no, f"{key}: section index must be an integer") from None
    if subkey not in allowed:
        raise ParseError(line_no, f"unknown key {key!r}")
    sections.setdefault(index, {})[subkey] = (value.strip(), line_no)


def _build_stage(index: int, section: dict) -> StageSpec:
    def get(name, tag, default=None):
        if name not in section:
            if default is None:
                raise ValidationError(f"load.stage.{index}.{name}", "required key is missing")
            return default
        raw, line_no = section[name]
        return _parse_value(raw, tag, line_no, f"load.stage.{index}.{name}")

    return StageSpec(
        users=get("users", "int"),
        spawn_rate=get("spawn_rate", "float"),
        hold_ms=get("hold_ms", "int", 0),
    )


def _build_fault(index: int, section: dict) -> FaultSpec:
    def get(name, tag, default=None, required=False):
        if name not in section:
            if required:
                raise ValidationError(f"fault.{index}.{name}", "required key is missing")
            return default
        raw, line_no = section[name]
        return _parse_value(raw, tag, line_no, f"fault.{index}.{name}")

    kind_raw = get("kind", "str", required=True)
    try:
        kind = FaultKind(kind_raw)
    except ValueError:
        raise ValidationError(f"fault.{index}.kind", f"unknown fault kind {kind_raw!r}") from None
    nodes_raw = get("nodes", "str", default="")
    nodes = tuple(int(n) for n in nodes_raw.split(";") if n != "") if nodes_raw else ()
    return FaultSpec(
        kind=kind,
        start=get("start_ms", "int", required=True),
        end=get("end_ms", "int", required=True),
        mean_ms=get("mean_ms", "int", 0),
        jitter_ms=get("jitter_ms", "int", 10 if kind == FaultKind.DELAY else 0),
        drop_probability=get("drop_probability", "float", 0.0),
        corrupt_probability=get("corrupt_probability", "float", 1.0 if kind == FaultKind.CORRUPT else 0.0),
        nodes=nodes,
    )


def validate_spec(spec: ScenarioSpec) -> None:
    if spec.protocol not in PROTOCOLS:
        raise ValidationError("protocol", f"must be one of {PROTOCOLS}, got {spec.protocol!r}")
    minimum = MIN_VALIDATORS[spec.protocol]
    if spec.validators < minimum:
        raise ValidationError("validators", f"{spec.protocol} needs at least {minimum}")
    if spec.horizon_ms <= 0:
        raise ValidationError("horizon_ms", "must be positive")
    if spec.block_size < 1:
        raise ValidationError("block_size", "must be at least 1")
    if spec.window_ms < 1:
        raise ValidationError("metrics.window_ms", "must be at least 1")
    if spec.base_latency_ms < 0 or spec.base_jitter_ms < 0:
        raise ValidationError("net.base_latency_ms", "latency parameters must be non-negative")
    if spec.load_mode not in ("closed", "open"):
        raise ValidationError("load.mode", f"must be closed or open, got {spec.load_mode!r}")
    if spec.load_mode == "open" and spec.load_rate_tps <= 0:
        raise ValidationError("load.rate_tps", "open-loop mode needs a positive rate")
    if spec.load_think_min_ms > spec.load_think_max_ms:
        raise ValidationError("load.think_min_ms", "think_min_ms exceeds think_max_ms")
    if spec.load_amount_min < 0 or spec.load_amount_min > spec.load_amount_max:
        raise ValidationError("load.amount_min", "need 0 <= amount_min <= amount_max")
    if spec.raft_election_timeout_min_ms > spec.raft_election_timeout_max_ms:
        raise ValidationError("raft.election_timeout_min_ms", "min exceeds max")
    for i, stage in enumerate(spec.stages, start=1):
        if stage.users < 0:
            raise ValidationError(f"load.stage.{i}.users", "must be non-negative")
        if stage.spawn_rate <= 0:
            raise ValidationError(f"load.stage.{i}.spawn_rate", "must be positive")
        if stage.hold_ms < 0:
            raise ValidationError(f"load.stage.{i}.hold_ms", "must be non-negative")
    for i, fault in enumerate(spec.faults, start=1):
        try:
            fault.validate()
        except MalformedWindow as exc:
            raise ValidationError(f"fault.{i}", str(exc)) from None
        if fault.end > spec.horizon_ms:
            raise ValidationError(f"fault.{i}.end_ms", "fault window extends beyond horizon")
        for node in fault.nodes:
            if not 0 <= node < spec.validators:
                raise ValidationError(f"fault.{i}.nodes", f"node {node} not in 0..{spec.validators - 1}")


def spec_to_text(spec: ScenarioSpec) -> str:
    """Full effective-config dump; parsing it back reproduces the spec."""
    attr_to_key = {attr: key for key, (attr, _) in _SCALAR_KEYS.items()}
    lines = []
    for f in fields(ScenarioSpec):
        if f.name in ("stages", "faults"):
            continue
        key = attr_to_key[f.name]
        value = getattr(spec, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = f"{value:g}"
        lines.append(f"{key} = {value}")
    for i, stage in enumerate(spec.stages, start=1):
        lines.append(f"load.stage.{i}.users = {stage.users}")
        lines.append(f"load.stage.{i}.spawn_rate = {stage.spawn_rate:g}")
        lines.append(f"load.stage.{i}.hold_ms = {stage.hold_ms}")
    for i, fault in enumerate(spec.faults, start=1):
        lines.append(f"fault.{i}.kind = {fault.kind.value}")
        lines.append(f"fault.{i}.start_ms = {fault.start}")
        lines.append(f"fault.{i}.end_ms = {fault.end}")
        lines.append(f"fault.{i}.mean_ms = {fault.mean_ms}")
        lines.append(f"fault.{i}.jitter_ms = {fault.jitter_ms}")
        lines.append(f"fault.{i}.drop_probability = {fault.drop_probability:g}")
        lines.append(f"fault.{i}.corrupt_probability = {fault.corrupt_probability:g}")
        if fault.nodes:
            lines.append(f"fault.{i}.nodes = {';'.join(str(n) for n in fault.nodes)}")
    return "\n".join(lines) + "\n"
