"""Figure helpers for the report command (headless Agg backend, reproducible PNGs)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.96),
    "figure.dpi": 100,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "font.size": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# PNG metadata carries the matplotlib version by default; drop it so reruns are byte-identical
_PNG_META = {"Software": None}


def new_figure(nrows=1, ncols=1, **kw):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows=nrows, ncols=ncols, **kw)
    return fig, ax


def save(fig, path) -> None:
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def loss_curves(runs: list[tuple[str, np.ndarray, np.ndarray]], path) -> None:
    """One line per run: (label, steps, loss)."""
    fig, ax = new_figure()
    for label, steps, loss in runs:
        if len(steps):
            ax.plot(steps, loss, lw=0.9, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    if runs:
        ax.legend(frameon=False)
    save(fig, path)


def timestep_histogram(series: list[tuple[str, np.ndarray]], path, bins: int = 100) -> None:
    fig, ax = new_figure()
    edges = np.linspace(0.0, 1.0, bins + 1)
    for label, t in series:
        ax.hist(t, bins=edges, histtype="step", density=True, label=label)
    ax.axhline(1.0, color="0.4", lw=0.8, ls="--")
    ax.set_xlabel("t (noise level)")
    ax.set_ylabel("density")
    if series:
        ax.legend(frameon=False)
    save(fig, path)
