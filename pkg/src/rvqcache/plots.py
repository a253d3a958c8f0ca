"""Figures rendered next to the delimited report files.

All rendering uses the Agg backend so the CLI works headless; each function
writes one PNG and returns the path it wrote.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def plot_training_report(report, path) -> str:
    """Loss curve and per-stage residual energy over the training steps."""
    steps = [r.step for r in report.records]
    fig, (ax_mse, ax_energy) = plt.subplots(1, 2, figsize=(10, 4))
    ax_mse.plot(steps, [r.mse for r in report.records], marker="o", ms=3, color="tab:blue")
    ax_mse.set_xlabel("step")
    ax_mse.set_ylabel("reconstruction MSE")
    ax_mse.set_yscale("log")
    ax_mse.set_title("Quantization loss")
    ax_mse.grid(True, alpha=0.3)

    num_boundaries = len(report.records[0].stage_energy)
    cmap = plt.get_cmap("viridis")
    for boundary in range(num_boundaries):
        series = [r.stage_energy[boundary] for r in report.records]
        label = "input" if boundary == 0 else f"after stage {boundary}"
        ax_energy.plot(steps, series, color=cmap(boundary / max(1, num_boundaries - 1)), label=label)
    ax_energy.set_xlabel("step")
    ax_energy.set_ylabel("mean squared residual norm")
    ax_energy.set_yscale("log")
    ax_energy.set_title("Residual energy by stage")
    ax_energy.legend(fontsize=7)
    ax_energy.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_rate_grid(rows: list[dict], path) -> str:
    """Bar chart of compression ratios, one bar per geometry row."""
    labels = [f"K={r['codebooks']} C={r['codes']}\n{r['packing']}" for r in rows]
    ratios = [r["ratio"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows)), 4))
    bars = ax.bar(range(len(rows)), ratios, color="tab:blue")
    ax.bar_label(bars, fmt="%.2f", fontsize=8)
    ax.set_xticks(range(len(rows)), labels, fontsize=8)
    ax.set_ylabel("compression vs half precision")
    ax.set_title("Rate by quantizer geometry")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_cache_report(report, path) -> str:
    """Byte accounting of a cache store by category."""
    categories = ["indices", "stds", "codebooks"]
    values = [report.index_bytes, report.std_bytes, report.codebook_bytes]
    fig, ax = plt.subplots(figsize=(5, 4))
    bars = ax.bar(categories, values, color=["tab:blue", "tab:orange", "tab:green"])
    ax.bar_label(bars, fmt="%d", fontsize=8)
    ax.set_ylabel("bytes")
    headline = "n/a" if report.headline_ratio is None else f"{report.headline_ratio:.2f}x"
    amortized = "n/a" if report.amortized_ratio is None else f"{report.amortized_ratio:.2f}x"
    ax.set_title(
        f"{report.tokens} tokens — headline {headline}, amortized {amortized}"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
