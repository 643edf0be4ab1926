"""Trajectory figure written next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sim import Trajectory  # noqa: E402

_STYLE = {
    "figure.figsize": (7.0, 5.5),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "legend.frameon": False,
    "svg.hashsalt": "ifpopt",
}


def plot_trajectory(traj: Trajectory, path: str | Path, title: str = "", x_star=None) -> Path:
    """States x_i(t) on top, optimality gap and consensus error (log scale) below."""
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, (ax_x, ax_e) = plt.subplots(2, 1, sharex=True, height_ratios=(3, 2))
        xs = traj.x
        for i in range(traj.n):
            for k in range(traj.m):
                label = f"$x_{{{i + 1}}}$" if traj.m == 1 else f"$x_{{{i + 1},{k + 1}}}$"
                ax_x.plot(traj.times, xs[:, i, k], label=label)
        if x_star is not None:
            for v in np.atleast_1d(x_star):
                ax_x.axhline(v, color="k", ls="--", lw=0.8)
        ax_x.set_ylabel("state")
        ax_x.legend(ncol=min(traj.n * traj.m, 4), loc="best")
        floor = np.finfo(float).tiny
        ax_e.semilogy(traj.times, np.maximum(traj.optimality_gap, floor), label="optimality gap")
        ax_e.semilogy(traj.times, np.maximum(traj.consensus_error, floor), label="consensus error")
        ax_e.set_xlabel("t [s]")
        ax_e.legend(loc="best")
        if title:
            ax_x.set_title(title + ("  (diverged)" if traj.diverged else ""))
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
