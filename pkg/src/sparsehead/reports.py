"""CSV reports and the figures rendered next to them.

All delimited output uses six significant digits so golden files compare
stably. Figures are rendered with the Agg backend straight to PNG files in
the same directory as their CSV.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{value:.6g}"


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.asarray(rows)


# -- figures -------------------------------------------------------------------


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)
    return path


def training_figures(csv_path: str | Path, num_levels: int, out_dir: str | Path) -> list[Path]:
    header, data = read_csv(csv_path)
    out_dir = Path(out_dir)
    col = {name: i for i, name in enumerate(header)}
    steps = data[:, col["step"]]

    fig, ax = plt.subplots(figsize=(7, 4))
    for name in ("det_loss", "norm_loss", "amm_loss", "total"):
        ax.plot(steps, data[:, col[name]], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    loss_png = _save(fig, out_dir / "loss_curves.png")

    fig, ax = plt.subplots(figsize=(7, 4))
    for i in range(num_levels):
        line, = ax.plot(steps, data[:, col[f"act_L{i}"]], linewidth=1, label=f"level {i}")
        ax.plot(steps, data[:, col[f"target_L{i}"]], linestyle="--", linewidth=1,
                color=line.get_color(), alpha=0.6)
    ax.set_xlabel("step")
    ax.set_ylabel("activation ratio (hard)")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    ratio_png = _save(fig, out_dir / "ratio_convergence.png")
    return [loss_png, ratio_png]


def flops_figure(rows: list[dict], out_path: str | Path) -> Path:
    """Per-level grouped bars: dense reference vs sparse execution MACs."""
    levels = sorted({r["level"] for r in rows})
    dense = [sum(r["dense_macs"] for r in rows if r["level"] == lv) for lv in levels]
    sparse = [sum(r["sparse_macs"] + r["mask_macs"] + r["g_macs"] for r in rows if r["level"] == lv)
              for lv in levels]
    xs = np.arange(len(levels))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(xs - 0.2, dense, width=0.4, label="dense reference")
    ax.bar(xs + 0.2, sparse, width=0.4, label="sparse (incl. mask + context)")
    ax.set_xticks(xs, [f"L{lv}" for lv in levels])
    ax.set_ylabel("MACs per pass")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, Path(out_path))


def latency_figure(sparse_ms: np.ndarray, dense_ms: np.ndarray, out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot([dense_ms, sparse_ms], tick_labels=["dense", "sparse"], showfliers=False)
    ax.set_ylabel("forward wall time (ms)")
    speedup = np.median(dense_ms) / np.median(sparse_ms)
    ax.set_title(f"median speedup {speedup:.2f}x")
    return _save(fig, Path(out_path))


def sweep_figure(mask_ratios: list[float], activations: list[float],
                 macs: list[float], out_path: str | Path) -> Path:
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(mask_ratios, activations, marker="o", label="measured activation")
    ax1.plot(mask_ratios, [1 - r for r in mask_ratios], linestyle="--",
             color="gray", label="1 - mask ratio")
    ax1.set_xlabel("fixed mask ratio")
    ax1.set_ylabel("activation ratio")
    ax1.legend(frameon=False, loc="upper right")
    ax2 = ax1.twinx()
    ax2.plot(mask_ratios, macs, marker="s", color="tab:red")
    ax2.set_ylabel("sparse MACs", color="tab:red")
    return _save(fig, Path(out_path))


def mask_figure(decisions: np.ndarray, out_path: str | Path) -> Path:
    """Heatmap of one mask (first batch element)."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(decisions[0, 0].astype(float), cmap="viridis", vmin=0, vmax=1,
              interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, Path(out_path))
