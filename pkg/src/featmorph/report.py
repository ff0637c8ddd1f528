"""Render optimizer traces to figures, next to their CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .optimizer import TraceRecord


def trace_figure_path(csv_path: str) -> str:
    return str(Path(csv_path).with_suffix(".png"))


def render_trace_figure(trace: list[TraceRecord], out_path: str) -> None:
    """Two-panel convergence figure: objective value and gradient norm."""
    iterations = [t.iteration for t in trace]
    values = [t.value for t in trace]
    gnorms = [t.grad_norm for t in trace]

    fig, (ax_f, ax_g) = plt.subplots(2, 1, sharex=True, figsize=(6, 6))
    ax_f.plot(iterations, values, marker=".", lw=1)
    ax_f.set_ylabel("objective")
    if min(values) > 0:
        ax_f.set_yscale("log")
    ax_g.plot(iterations, gnorms, marker=".", lw=1, color="tab:orange")
    ax_g.set_ylabel("gradient norm")
    ax_g.set_xlabel("iteration")
    if min(gnorms) > 0:
        ax_g.set_yscale("log")
    for ax in (ax_f, ax_g):
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
