"""Figure rendering for reports: MR-FPPI trade-off curves and loss traces."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["render_mr_fppi", "render_loss_curves"]


def render_mr_fppi(curves: dict, path) -> None:
    """Log-log miss rate vs FPPI, one line per condition; the shaded band
    marks the FPPI range that the log-average summary integrates."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    for name, (fppi, miss) in sorted(curves.items()):
        fppi = np.asarray(fppi)
        miss = np.asarray(miss)
        keep = fppi > 0
        if keep.any():
            ax.plot(fppi[keep], np.maximum(miss[keep], 1e-4), label=name, lw=1.5)
        else:
            ax.axhline(1.0, ls="--", lw=1.0, label=f"{name} (no false positives)")
    ax.axvspan(1e-2, 1e0, color="0.92", zorder=0)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("miss rate")
    ax.set_ylim(5e-5, 1.2)
    ax.grid(True, which="both", lw=0.3, alpha=0.5)
    ax.legend(fontsize=8, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_curves(metrics_csv: Path, path) -> None:
    """Per-step loss components from a training metrics log."""
    lines = Path(metrics_csv).read_text().strip().splitlines()
    header = lines[0].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    if data.size == 0:
        return
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    steps = data[:, header.index("step")]
    for name in ("l_obj", "l_cls", "l_reg", "l_consist", "l_total"):
        ax.plot(steps, np.maximum(data[:, header.index(name)], 1e-8), label=name, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, lw=0.3, alpha=0.5)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
