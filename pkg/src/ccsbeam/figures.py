"""Matplotlib rendering of reports to image files next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import EvalReport

__all__ = ["render_sweep_figures", "render_heatmap"]

_METRICS = (
    ("alignment_prob", "Alignment probability"),
    ("bf_loss_db", "Mean beamforming loss (dB)"),
    ("rate", "Mean rate (bits/s/Hz)"),
)


def render_sweep_figures(report: EvalReport, out_base: str) -> list[str]:
    """One line plot per metric vs SNR, one curve per (method, M).

    Returns the written file paths ('<out_base>_<metric>.png').
    """
    snrs = sorted({r.snr_db for r in report.rows})
    curves = sorted({(r.method, r.m) for r in report.rows})
    written = []
    for attr, label in _METRICS:
        fig, ax = plt.subplots(figsize=(6.0, 4.2))
        for method, m in curves:
            pts = {r.snr_db: getattr(r, attr) for r in report.rows
                   if r.method == method and r.m == m}
            ax.plot(snrs, [pts.get(s, np.nan) for s in snrs],
                    marker="o", label=f"{method}, M={m}")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = f"{out_base}_{attr}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written


def render_heatmap(matrix: np.ndarray, path: str, title: str = "") -> str:
    """Grid heatmap for masks and beamspace priors."""
    fig, ax = plt.subplots(figsize=(5.0, 4.4))
    im = ax.imshow(np.asarray(matrix), cmap="viridis", origin="upper")
    ax.set_xlabel("beam column")
    ax.set_ylabel("beam row")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
