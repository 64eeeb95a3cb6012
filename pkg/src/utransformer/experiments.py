"""Grid expansion and cell runner shared by the ablation CLI and the benchmark."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .backbone import VariantConfig
from .data import TARGET, SegmentationSample, stack
from .training import TrainConfig, dice_per_class, predict, train

logger = logging.getLogger(__name__)

GRID_AXES = ("variant", "heads", "pe", "mhca-levels")


def parse_levels(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    return tuple(int(v) for v in text.split(","))


def parse_grid(specs: list[str]) -> dict[str, list]:
    """``["heads=0,1,2", "pe=on,off", "mhca-levels=1;1,2"]`` -> ordered axis values."""
    axes: dict[str, list] = {}
    for spec in specs:
        if "=" not in spec:
            raise ValueError(f"grid axis {spec!r} is not of the form name=values")
        name, raw = spec.split("=", 1)
        name = name.strip()
        if name not in GRID_AXES:
            raise ValueError(f"unknown grid axis {name!r}; expected one of {', '.join(GRID_AXES)}")
        if name in axes:
            raise ValueError(f"grid axis {name!r} given twice")
        if name == "heads":
            values = [int(v) for v in raw.split(",")]
        elif name == "pe":
            values = [_parse_switch(v) for v in raw.split(",")]
        elif name == "mhca-levels":
            values = [parse_levels(v) for v in raw.split(";")]
        else:
            values = [v.strip() for v in raw.split(",")]
        if not values:
            raise ValueError(f"grid axis {name!r} has no values")
        axes[name] = values
    return axes


def _parse_switch(v: str) -> bool:
    v = v.strip().lower()
    if v not in ("on", "off"):
        raise ValueError(f"expected on|off, got {v!r}")
    return v == "on"


def format_value(axis: str, value) -> str:
    if axis == "pe":
        return "on" if value else "off"
    if axis == "mhca-levels":
        return ",".join(str(v) for v in value) or "none"
    return str(value)


def expand_grid(axes: dict[str, list], seeds: list[int]) -> list[dict]:
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        for seed in seeds:
            cell = dict(zip(names, combo))
            cell["seed"] = seed
            cells.append(cell)
    return cells


def cell_config(base: TrainConfig, cell: dict) -> TrainConfig:
    model = base.model.to_dict()
    variant = cell.get("variant", model["variant"])
    model["variant"] = variant
    if "heads" in cell:
        model["heads"] = cell["heads"]
    if "pe" in cell:
        model["pe"] = cell["pe"]
    if "mhca-levels" in cell:
        model["mhca_levels"] = cell["mhca-levels"]
    elif "variant" in cell:
        model["mhca_levels"] = None  # re-derive the variant default
    if variant not in ("mhca", "u-transformer"):
        model["mhca_levels"] = ()
    model = VariantConfig(**{**model, "mhca_levels": None if model["mhca_levels"] is None else tuple(model["mhca_levels"])})
    return dataclasses.replace(base, seed=cell["seed"], model=model)


def run_cell(samples: list[SegmentationSample], config: TrainConfig) -> dict:
    """Train one fold and score its held-out images."""
    result = train(config, samples)
    by_id = {s.id: s for s in samples}
    images, masks = stack([by_id[i] for i in result.test_ids])
    per_class = dice_per_class(predict(result.model, images), masks, config.model.n_classes)
    return {
        "dice_per_class": per_class,
        "dice_mean": float(np.mean(per_class[1:])),
        "final_loss": result.log[-1].train_loss,
        "steps": result.step,
    }


def _run_indexed(args):
    i, samples, config = args
    return i, run_cell(samples, config)


def worker_count() -> int:
    raw = os.environ.get("UTRANS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"UTRANS_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def run_grid(samples: list[SegmentationSample], base: TrainConfig, cells: list[dict], workers: int = 1) -> list[dict]:
    """One result row per cell, sorted by (axis values, seed) regardless of completion order."""
    configs = [cell_config(base, c) for c in cells]
    results: dict[int, dict] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, res in pool.map(_run_indexed, [(i, samples, cfg) for i, cfg in enumerate(configs)]):
                results[i] = res
    else:
        for i, cfg in enumerate(configs):
            logger.info("cell %d/%d: %s", i + 1, len(cells), cells[i])
            results[i] = run_cell(samples, cfg)
    rows = []
    for i, cell in enumerate(cells):
        row = {axis: format_value(axis, cell[axis]) for axis in cell if axis != "seed"}
        row["seed"] = cell["seed"]
        row.update(results[i])
        rows.append(row)
    rows.sort(key=lambda r: tuple(str(r[a]) for a in cells[0] if a != "seed") + (r["seed"],))
    return rows


def grid_header(axes: list[str], n_classes: int) -> list[str]:
    return list(axes) + ["seed"] + [f"dice_c{c}" for c in range(n_classes)] + ["dice_mean", "final_loss", "steps"]


def write_grid_csv(path: str | os.PathLike, rows: list[dict], axes: list[str], n_classes: int) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(grid_header(axes, n_classes))
        for r in rows:
            writer.writerow(
                [r[a] for a in axes] + [r["seed"]] + [repr(v) for v in r["dice_per_class"]]
                + [repr(r["dice_mean"]), repr(r["final_loss"]), r["steps"]]
            )
    os.replace(tmp, path)


def read_grid_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def target_dice(row: dict) -> float:
    return row["dice_per_class"][TARGET]
