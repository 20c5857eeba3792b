"""Figure rendering for run reports: per-window throughput and latency
series as PNG files next to the CSV/JSON artifacts.

The delimited output stays the machine contract; these figures are the
human-readable view, with fault windows shaded on the time axis.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricsReport
from .net import FaultSpec

_FAULT_COLORS = {
    "delay": "#f2c14e",
    "loss": "#e36660",
    "corrupt": "#9063cd",
    "pause": "#7f8c99",
}


def _shade_faults(ax, faults: list[FaultSpec]) -> None:
    seen = set()
    for spec in faults:
        color = _FAULT_COLORS.get(spec.kind.value, "#cccccc")
        label = spec.kind.value if spec.kind.value not in seen else None
        seen.add(spec.kind.value)
        ax.axvspan(spec.start / 1000, spec.end / 1000, alpha=0.15, color=color, label=label)


def render_run_figures(
    report: MetricsReport, faults: list[FaultSpec], out_dir: Path
) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    windows = report.windows
    t = [w.start_ms / 1000 for w in windows]
    paths = []

    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(t, [w.throughput_tps for w in windows], drawstyle="steps-post", color="#2a6f97")
    _shade_faults(ax, faults)
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("throughput (tx/s)")
    ax.set_title(f"{report.protocol}: write throughput per window")
    if faults:
        ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    path = out_dir / "throughput.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(9, 4))
    med_t = [x for x, w in zip(t, windows) if w.median_latency_ms is not None]
    med_v = [w.median_latency_ms for w in windows if w.median_latency_ms is not None]
    run_t = [x for x, w in zip(t, windows) if w.running_avg_latency_ms is not None]
    run_v = [w.running_avg_latency_ms for w in windows if w.running_avg_latency_ms is not None]
    ax.plot(med_t, med_v, ".", markersize=4, color="#2a6f97", label="window median")
    ax.plot(run_t, run_v, color="#bc4749", label="running average")
    _shade_faults(ax, faults)
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("write latency (ms)")
    ax.set_title(f"{report.protocol}: write latency")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    path = out_dir / "latency.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)
    return paths
