"""Continuous-pitch tolerance curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_tolerance_curves(sweeps: dict, out_path=None, title: str | None = None):
    """
    Plot F1 against pitch tolerance, string-dependent on top and string-agnostic below.

    ``sweeps`` maps a configuration label to a (string_dependent, string_agnostic)
    pair of ToleranceSweep. The format follows the file extension (.svg, .png, ...).
    Returns the figure.
    """
    if not sweeps:
        raise ValueError("nothing to plot")
    fig, axes = plt.subplots(2, 1, figsize=(6, 7), sharex=True)
    for label, (dependent, agnostic) in sweeps.items():
        for ax, sweep in zip(axes, (dependent, agnostic)):
            ax.plot(sweep.tolerances, sweep.f1(), marker="o", label=label)
    axes[0].set_title("String-dependent")
    axes[1].set_title("String-agnostic")
    for ax in axes:
        ax.set_ylabel("$F_1$")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
    axes[1].set_xlabel("Pitch tolerance (semitones)")
    axes[0].legend(fontsize="small")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    if out_path is not None:
        fig.savefig(out_path)
    return fig
