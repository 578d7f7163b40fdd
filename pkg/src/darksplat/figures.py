"""Report figures written next to the delimited outputs.

Matplotlib is imported lazily with the Agg backend so headless runs and
figure-free code paths never pay for it.
"""

from __future__ import annotations

import numpy as np


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def training_curves(metrics, path):
    """Loss components (log scale) and held-out PSNR over iterations."""
    plt = _plt()
    iters = [m["iteration"] for m in metrics]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (("loss_total", "total"), ("loss_hol", "holistic"),
                       ("loss_event", "event"), ("loss_mix", "mix")):
        vals = np.array([m[key] for m in metrics], dtype=float)
        if np.any(vals > 0):
            ax.semilogy(iters, np.maximum(vals, 1e-12), label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)

    psnrs = np.array([m["psnr"] for m in metrics], dtype=float)
    if np.any(np.isfinite(psnrs)):
        ax2 = ax.twinx()
        ax2.plot(iters, psnrs, "k--", alpha=0.6)
        ax2.set_ylabel("held-out PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_chart(rows, path):
    """Bar chart of PSNR per loss-subset configuration."""
    plt = _plt()
    labels = ["+".join(n for n, on in (("hol", r["hol"]), ("event", r["event"]),
                                       ("mix", r["mix"])) if on)
              for r in rows]
    psnrs = [r["psnr"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(rows)), psnrs, color="#4477aa")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("PSNR (dB)")
    for i, (p, r) in enumerate(zip(psnrs, rows)):
        ax.text(i, p, f"{r['ssim']:.2f}", ha="center", va="bottom", fontsize=7)
    ax.set_title("loss ablation (bar labels: SSIM)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
