"""Loss-combination sweep: supervised-only vs cross-distillation vs the full objective.

Each cell (mode x ratio x seed) is an ordinary training run in its own
directory under the sweep root.  Cells whose report already exists are
skipped, so an interrupted sweep resumes where it stopped, and cells can run
in parallel worker processes since the directories are disjoint.
"""

from __future__ import annotations

import copy
import logging
import subprocess
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from segcohort.config import RunConfig, dump_config
from segcohort.training import parse_report

logger = logging.getLogger(__name__)

MODES = ("supervised", "cross", "full")
MODE_FLAGS = {
    "supervised": (False, False),
    "cross": (True, False),
    "full": (True, True),
    "tcc": (True, True),
}


def apply_mode(config: RunConfig, mode: str) -> RunConfig:
    if mode not in MODE_FLAGS:
        raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODE_FLAGS)}")
    config.losses.cross_distill, config.losses.feature_distill = MODE_FLAGS[mode]
    return config


@dataclass
class Cell:
    mode: str
    ratio: Fraction
    seed: int
    run_dir: Path

    @property
    def done(self) -> bool:
        return (self.run_dir / "report.txt").is_file()

    def miou(self) -> float:
        return float(parse_report(self.run_dir / "report.txt")["miou_vit"])


def _ratio_tag(ratio: Fraction) -> str:
    return f"{ratio.numerator}of{ratio.denominator}"


def plan_cells(out_dir: Path, ratios: list[Fraction], seeds: list[int], modes=MODES) -> list[Cell]:
    cells = []
    for ratio in ratios:
        for mode in modes:
            for seed in seeds:
                run_dir = out_dir / "cells" / f"{mode}_r{_ratio_tag(ratio)}_s{seed}"
                cells.append(Cell(mode=mode, ratio=ratio, seed=seed, run_dir=run_dir))
    return cells


def _cell_config(base: RunConfig, cell: Cell) -> RunConfig:
    config = copy.deepcopy(base)
    apply_mode(config, cell.mode)
    config.data.label_ratio = str(cell.ratio)
    config.training.seed = cell.seed
    return config


def run_cell_inprocess(base: RunConfig, cell: Cell) -> None:
    from segcohort.training import train

    train(_cell_config(base, cell), cell.run_dir)


def _spawn_cell(base: RunConfig, cell: Cell) -> subprocess.Popen:
    cell.run_dir.mkdir(parents=True, exist_ok=True)
    config_path = cell.run_dir / "cell_config.ini"
    config_path.write_text(dump_config(_cell_config(base, cell)))
    with open(cell.run_dir / "train.log", "w") as log:
        return subprocess.Popen(
            [sys.executable, "-m", "segcohort.cli", "train", "--config", str(config_path), "--out", str(cell.run_dir)],
            stdout=log,
            stderr=subprocess.STDOUT,
        )


def run_ablation(
    base: RunConfig,
    out_dir: str | Path,
    ratios: list[Fraction],
    seeds: list[int],
    workers: int = 1,
    modes=MODES,
) -> Path:
    """Run all cells (skipping finished ones) and write the summary table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = plan_cells(out, ratios, seeds, modes)
    pending = [cell for cell in cells if not cell.done]
    logger.info("ablation: %d cells, %d pending, %d workers", len(cells), len(pending), workers)

    if workers <= 1:
        for cell in pending:
            logger.info("running cell %s", cell.run_dir.name)
            run_cell_inprocess(base, cell)
    else:
        queue = list(pending)
        active: list[tuple[Cell, subprocess.Popen]] = []
        failures = []
        while queue or active:
            while queue and len(active) < workers:
                cell = queue.pop(0)
                logger.info("spawning cell %s", cell.run_dir.name)
                active.append((cell, _spawn_cell(base, cell)))
            cell, proc = active.pop(0)
            code = proc.wait()
            if code != 0:
                failures.append((cell, code))
        if failures:
            detail = ", ".join(f"{c.run_dir.name} (exit {code})" for c, code in failures)
            raise RuntimeError(f"ablation cells failed: {detail}")

    table = render_table(cells, ratios, seeds, modes)
    table_path = out / "ablation.md"
    table_path.write_text(table)
    return table_path


_MODE_ROWS = {
    "supervised": "| x |   |   |",
    "cross": "| x | x |   |",
    "full": "| x | x | x |",
}


def render_table(cells: list[Cell], ratios: list[Fraction], seeds: list[int], modes=MODES) -> str:
    """Markdown table: loss combinations as rows, label ratios as columns, mean val mIoU cells."""
    by_key = {(c.mode, c.ratio, c.seed): c for c in cells}
    header = "| sup | cross | feature | " + " | ".join(str(r) for r in ratios) + " |"
    rule = "|" + "---|" * (3 + len(ratios))
    lines = [
        "# Loss-combination sweep",
        "",
        f"Validation mIoU of the attention student, mean over seeds {seeds}.",
        "",
        header,
        rule,
    ]
    for mode in modes:
        row = _MODE_ROWS[mode]
        for ratio in ratios:
            values = [by_key[(mode, ratio, s)].miou() for s in seeds if by_key[(mode, ratio, s)].done]
            row += f" {100.0 * sum(values) / len(values):.2f} |" if values else " - |"
        lines.append(row)
    lines.append("")
    lines.append("Per-cell results:")
    lines.append("")
    lines.append("| mode | ratio | seed | miou_vit | run |")
    lines.append("|---|---|---|---|---|")
    for cell in cells:
        value = f"{100.0 * cell.miou():.2f}" if cell.done else "-"
        lines.append(f"| {cell.mode} | {cell.ratio} | {cell.seed} | {value} | {cell.run_dir.name} |")
    lines.append("")
    return "\n".join(lines)
