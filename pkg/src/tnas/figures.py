"""Figure rendering for run reports, next to the CSV they summarize."""

from __future__ import annotations

import csv

__all__ = ["render_metrics", "render_eval"]


def _load_rows(csv_path):
    with open(csv_path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_metrics(csv_path, out_path):
    """Loss/efficiency/radius/PSNR curves from a metrics CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _load_rows(csv_path)
    if not rows:
        return
    epochs = [int(r["epoch"]) for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    axes[0, 0].plot(epochs, [float(r["loss_content"]) for r in rows], color="tab:blue")
    axes[0, 0].set_title("content loss")
    axes[0, 1].plot(epochs, [float(r["loss_efficiency"]) for r in rows], color="tab:orange", label="GFLOPs")
    axes[0, 1].plot(epochs, [float(r["loss_order"]) for r in rows], color="tab:green", label="order")
    axes[0, 1].set_title("efficiency / ordering")
    axes[0, 1].legend(fontsize=8)
    axes[1, 0].plot(epochs, [float(r["r_value"]) for r in rows], color="tab:red", label="radius")
    ax2 = axes[1, 0].twinx()
    ax2.plot(epochs, [int(r["nnz_alpha"]) for r in rows], color="tab:purple", label="nnz op")
    ax2.plot(epochs, [int(r["nnz_beta"]) for r in rows], color="tab:brown", label="nnz path")
    axes[1, 0].set_title("radius / support sizes")
    axes[1, 1].plot(epochs, [float(r["psnr_val"]) for r in rows], color="tab:cyan")
    axes[1, 1].set_title("validation PSNR (dB)")
    for ax in axes.flat:
        ax.set_xlabel("epoch")
    fig.suptitle(f"phase: {rows[0]['phase']}")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def render_eval(psnrs, out_path):
    """Per-image PSNR of an evaluation run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(psnrs)), psnrs, color="tab:blue")
    ax.axhline(sum(psnrs) / max(len(psnrs), 1), color="tab:red", linestyle="--", label="mean")
    ax.set_xlabel("held-out image")
    ax.set_ylabel("PSNR vs teacher (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
