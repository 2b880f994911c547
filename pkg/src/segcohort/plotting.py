"""Static figures from metrics CSVs: loss components and validation mIoU vs iteration."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

LOSS_PANELS = ["loss_sup", "loss_ccd", "loss_cfcd", "loss_total"]


def read_metrics(path: str | Path) -> dict[str, list[float]]:
    """Parse a metrics CSV into column lists; empty cells become NaN."""
    columns: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty metrics file")
        for name in reader.fieldnames:
            columns[name] = []
        for row in reader:
            for name in reader.fieldnames:
                cell = row[name]
                columns[name].append(float(cell) if cell not in ("", None) else float("nan"))
    if not columns or not next(iter(columns.values())):
        raise ValueError(f"{path}: metrics file has no data rows")
    return columns


def plot_losses(metrics: list[tuple[str, dict[str, list[float]]]], out_path: Path) -> Path:
    """One panel per loss component; multiple runs overlay within each panel."""
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    for ax, column in zip(axes.ravel(), LOSS_PANELS):
        for label, cols in metrics:
            ax.plot(cols["iter"], cols[column], label=label, linewidth=1.0)
        ax.set_title(column)
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    if len(metrics) > 1:
        axes[0, 0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_miou(metrics: list[tuple[str, dict[str, list[float]]]], out_path: Path) -> Path:
    """Validation mIoU of both students at the evaluation iterations."""
    fig, ax = plt.subplots(figsize=(7, 5))
    for label, cols in metrics:
        for column, style in (("miou_cnn", "--"), ("miou_vit", "-")):
            points = [(i, v) for i, v in zip(cols["iter"], cols[column]) if v == v]
            if points:
                ax.plot(*zip(*points), style, label=f"{label} {column}", linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_figures(csv_paths: list[Path], out_dir: Path) -> list[Path]:
    """Figures for one or more runs; several CSVs overlay as a comparison."""
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = []
    for path in csv_paths:
        label = Path(path).parent.name or Path(path).stem
        metrics.append((label, read_metrics(path)))
    return [
        plot_losses(metrics, out_dir / "losses.png"),
        plot_miou(metrics, out_dir / "miou.png"),
    ]


def render_run_figures(metrics_csv: Path, out_dir: Path) -> list[Path]:
    return render_figures([metrics_csv], out_dir)
