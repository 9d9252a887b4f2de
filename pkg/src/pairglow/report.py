"""CSV traces and matplotlib figures rendered next to them."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_trace_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", "bpd_source", "bpd_target"])
        for r in rows:
            w.writerow([r.iteration, f"{r.loss:.8g}",
                        f"{r.bpd_source:.8g}", f"{r.bpd_target:.8g}"])


def read_trace_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [(int(r["iteration"]), float(r["loss"]),
                 float(r["bpd_source"]), float(r["bpd_target"]))
                for r in reader]


def save_loss_curve(rows, path):
    """Two-panel training curve: objective and conditional bits/dim."""
    its = [r.iteration for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(its, [r.loss for r in rows], lw=0.8, color="tab:blue")
    ax1.set_ylabel("objective")
    ax1.grid(alpha=0.3)
    ax2.plot(its, [r.bpd_target for r in rows], lw=0.8, color="tab:orange",
             label="target | source")
    ax2.plot(its, [r.bpd_source for r in rows], lw=0.8, color="tab:green",
             label="source")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("bits / dim")
    ax2.legend(loc="upper right", fontsize=8)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_bpd_csv(path, values):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "bpd"])
        for i, v in enumerate(values):
            w.writerow([i, f"{v:.8g}"])


def save_bpd_histogram(values, path, mean=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(values, bins=min(30, max(5, len(values) // 2)), color="tab:blue",
            alpha=0.8)
    if mean is not None:
        ax.axvline(mean, color="tab:red", lw=1.2, label=f"mean {mean:.3f}")
        ax.legend(fontsize=8)
    ax.set_xlabel("conditional bits / dim")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
