"""Figure rendering for benchmark reports (written next to the delimited output)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchReport  # noqa: E402
from .hsd import DecodeTrace  # noqa: E402
from .lobi import PrecisionMap  # noqa: E402
from .quant import PRECISIONS  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def latency_figure(report: BenchReport, path: Path) -> Path:
    """Histogram of per-task latency with the mean marked."""
    lat_ms = [r.latency_micros / 1000.0 for r in report.rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(lat_ms, bins=min(20, max(5, len(lat_ms) // 2)), color="#4878a8", edgecolor="white")
    ax.axvline(report.aggregates.latency_avg_ms, color="#c44e52", linestyle="--", label="mean")
    ax.set_xlabel("latency per task (ms)")
    ax.set_ylabel("tasks")
    ax.legend()
    return _save(fig, path)


def entropy_figure(traces: list[DecodeTrace], tau: float, path: Path, max_traces: int = 6) -> Path:
    """Per-token draft entropies for the first few generations, with the gate line."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for i, trace in enumerate(traces[:max_traces]):
        ents = trace.entropies()
        if ents:
            ax.plot(range(len(ents)), ents, marker=".", lw=0.8, label=f"task {i}")
    ax.axhline(tau, color="#c44e52", linestyle="--", label="gate threshold")
    ax.set_xlabel("token index")
    ax.set_ylabel("draft entropy (nats)")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def verifier_calls_figure(report: BenchReport, path: Path) -> Path:
    """Emitted tokens vs verifier calls per task."""
    idx = range(len(report.rows))
    emitted = [r.emitted_tokens for r in report.rows]
    verified = [r.verifier_calls for r in report.rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(idx, emitted, color="#b0c4d8", label="emitted tokens")
    ax.bar(idx, verified, color="#c44e52", label="verifier calls")
    ax.set_xlabel("task")
    ax.set_ylabel("tokens")
    ax.legend()
    return _save(fig, path)


def precision_figure(pmaps: dict[str, PrecisionMap], path: Path) -> Path:
    """Share of subblocks assigned to each bit width, per model."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = list(pmaps)
    bottoms = [0.0] * len(names)
    colors = {4: "#55a868", 8: "#4878a8", 16: "#c44e52"}
    for p in PRECISIONS:
        fracs = [pmaps[n].fraction_at(p) for n in names]
        ax.bar(names, fracs, bottom=bottoms, color=colors[p], label=f"{p}-bit")
        bottoms = [b + f for b, f in zip(bottoms, fracs)]
    ax.set_ylabel("fraction of subblocks")
    ax.set_ylim(0, 1.05)
    ax.legend()
    return _save(fig, path)


def render_report_figures(
    report: BenchReport,
    traces: list[DecodeTrace],
    pmaps: dict[str, PrecisionMap],
    outdir,
) -> list[Path]:
    """Write every figure the report data supports; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [latency_figure(report, outdir / "latency_hist.png")]
    if any(t.entropies() for t in traces):
        tau = float(report.config.get("tau", 0.0))
        paths.append(entropy_figure(traces, tau, outdir / "entropy_trace.png"))
    paths.append(verifier_calls_figure(report, outdir / "verifier_calls.png"))
    if pmaps:
        paths.append(precision_figure(pmaps, outdir / "precision_mix.png"))
    return paths
