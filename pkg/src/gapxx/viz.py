"""Static figure rendering: adversary/perturbation grids and norm-sweep
plots. Rendering never mutates evaluation data; the tabular sidecar written
next to a plot is byte-identical to its source table."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .attacks import AttackMode, AttackRequest, gapxx_attack
from .budget import PerturbationBudget
from .errors import ConfigurationError


class Panel(enum.Enum):
    ADVERSARY = "adversary"
    PERTURBATION = "perturbation"


@dataclass
class GridSpec:
    rows: list[int]  # target classes, one per grid row
    cols: list[int]  # sample indices into the evaluation split, one per column
    panels: tuple[Panel, ...] = (Panel.ADVERSARY, Panel.PERTURBATION)
    tile_pad: int = 2

    def __post_init__(self):
        if not self.rows or not self.cols:
            raise ConfigurationError("grid needs at least one target row and one sample column")


def _to_tile(img: torch.Tensor) -> np.ndarray:
    arr = (img.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    return arr.transpose(1, 2, 0)


def _compose(tiles: list[list[np.ndarray]], pad: int) -> Image.Image:
    th, tw = tiles[0][0].shape[:2]
    rows, cols = len(tiles), len(tiles[0])
    canvas = np.full(((th + pad) * rows - pad, (tw + pad) * cols - pad, 3), 255, dtype=np.uint8)
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            y, x = r * (th + pad), c * (tw + pad)
            canvas[y:y + th, x:x + tw] = tile
    return Image.fromarray(canvas)


def render_grid(attacker, victim, images: torch.Tensor, spec: GridSpec,
                budget: PerturbationBudget, out_dir) -> dict:
    """One composite PNG per panel: rows are targets, columns are samples.

    Perturbation tiles are rendered with a single affine map
    (delta - min) / (max - min) shared across the whole grid so relative
    magnitudes stay comparable between targets; the affine parameters are
    recorded in the metadata sidecar.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = images[spec.cols]
    adversaries, deltas = [], []
    for target in spec.rows:
        req = AttackRequest(mode=AttackMode.TARGETED, budget=budget, target=int(target))
        x_adv, _ = gapxx_attack(attacker, victim, samples, req)
        adversaries.append(x_adv)
        deltas.append(x_adv - samples)

    written = {}
    meta = {
        "rows_targets": [int(t) for t in spec.rows],
        "cols_samples": [int(c) for c in spec.cols],
        "budget": budget.describe(),
    }
    if Panel.ADVERSARY in spec.panels:
        tiles = [[_to_tile(row[c]) for c in range(len(spec.cols))] for row in adversaries]
        p = out_dir / "adversary_grid.png"
        _compose(tiles, spec.tile_pad).save(p)
        written[Panel.ADVERSARY.value] = str(p)
    if Panel.PERTURBATION in spec.panels:
        all_d = torch.stack(deltas)
        lo, hi = float(all_d.min()), float(all_d.max())
        scale = (hi - lo) if hi > lo else 1.0
        meta["perturbation_affine"] = {"offset": lo, "scale": scale}
        tiles = [[_to_tile((row[c] - lo) / scale) for c in range(len(spec.cols))] for row in deltas]
        p = out_dir / "perturbation_grid.png"
        _compose(tiles, spec.tile_pad).save(p)
        written[Panel.PERTURBATION.value] = str(p)
    meta["files"] = written
    (out_dir / "grid_metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def render_sweep(sweep_rows: list[dict], out_path) -> dict:
    """Line plot of the sweep table: solid = adversary accuracy, dotted =
    targeted success, one pair of lines per norm family, total variation on
    the x axis. The table itself is written alongside as the authoritative
    artifact; the plot is derived."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not sweep_rows:
        raise ConfigurationError("sweep table is empty")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    families = sorted({r["family"] for r in sweep_rows})
    tvs = sorted({r["tv"] for r in sweep_rows})
    warnings = []
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {"linf": "tab:red", "l2": "tab:blue", "l0": "tab:green"}
    for fam in families:
        pts = {r["tv"]: r for r in sweep_rows if r["family"] == fam}
        xs = [tv for tv in tvs if tv in pts]
        if len(xs) < len(tvs):
            warnings.append(f"family {fam} missing at tv points {[t for t in tvs if t not in pts]}")
        color = colors.get(fam, None)
        ax.plot(xs, [pts[tv]["adversary_accuracy_percent"] for tv in xs],
                "-o", color=color, label=f"{fam} adversary accuracy")
        ax.plot(xs, [pts[tv]["targeted_success_percent"] for tv in xs],
                ":s", color=color, label=f"{fam} targeted success")
    ax.set_xlabel("total variation")
    ax.set_ylabel("percent")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)

    data_path = out_path.with_suffix(".json")
    data_path.write_text(json.dumps(sweep_rows, indent=2) + "\n")
    meta = {"plot": str(out_path), "data": str(data_path), "warnings": warnings}
    if warnings:
        out_path.with_suffix(".warnings.json").write_text(json.dumps(warnings, indent=2) + "\n")
    return meta
