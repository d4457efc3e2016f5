"""Coverage-over-tests figures (headless)."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

if TYPE_CHECKING:
    from .driver import RunReport


def coverage_plot(runs: Sequence["RunReport"], path: str | Path, title: str = "Coverage over tests") -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=100)
    for r in runs:
        if r.series:
            xs = [row.test_id for row in r.series]
            ys = [row.percent for row in r.series]
            ax.step(xs, ys, where="post", label=f"{r.label} ({ys[-1]:.1f}%)")
    ax.set_xlabel("tests executed")
    ax.set_ylabel("coverage points hit (%)")
    ax.set_title(title)
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    if any(r.series for r in runs):
        ax.legend(loc="lower right")
    fig.tight_layout()
    # no Software/date metadata so identical runs give identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
