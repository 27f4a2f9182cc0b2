"""Precision-recall figure rendering.

Uses the Agg backend so rendering works headless, and pins figure geometry,
dpi, and PNG metadata so that rerunning a command with the same inputs
produces byte-identical image files.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import PRCurve

_FIGSIZE = (6.0, 4.5)
_DPI = 120


def render_pr_png(curves: Sequence[tuple[str, PRCurve]], path) -> None:
    """Render one or more labeled PR curves to a PNG file."""
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    try:
        for label, curve in curves:
            xs = [0.0] + [r for r, _ in curve.points]
            ys = [curve.points[0][1] if curve.points else 1.0] + [
                p for _, p in curve.points
            ]
            ax.plot(xs, ys, label=f"{label} (AUC {curve.auc:.4f})", linewidth=1.6)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0.0, 1.02)
        ax.set_ylim(0.0, 1.05)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path, format="png", metadata={"Software": "kgharvest"})
    finally:
        plt.close(fig)
