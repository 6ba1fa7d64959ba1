from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from styles import BAND_ALPHA, FALLBACK_COLOR, PLOT_COLORS  # noqa: E402

# fixed element ids and no timestamp, so identical curves give identical files
matplotlib.rcParams["svg.hashsalt"] = "mnl-lab"


def plot_regret(
    rounds: np.ndarray,
    curves: Mapping[str, tuple[np.ndarray, np.ndarray]],
    path: Path,
    title: str = "",
) -> Path:
    """Mean cumulative regret per policy with a shaded +-1 std band, written as SVG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    try:
        for name, (mean, std) in curves.items():
            color = PLOT_COLORS.get(name, FALLBACK_COLOR)
            ax.plot(rounds, mean, color=color, linewidth=1.6, label=name)
            ax.fill_between(rounds, mean - std, mean + std, color=color, alpha=BAND_ALPHA, linewidth=0)
        ax.set_xlabel("Round")
        ax.set_ylabel("Cumulative regret")
        if title:
            ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="upper left", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return path
