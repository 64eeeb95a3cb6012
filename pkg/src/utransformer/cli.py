"""Command-line entry point: gen, train, eval, ablate, attention, gradcheck, ttest.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__
from .backbone import VARIANTS, VariantConfig
from .data import (
    GenerationError,
    SyntheticConfig,
    generate_synthetic,
    kfold_split,
    load_dataset,
    load_image,
    save_dataset,
    stack,
)
from .tensor import NonFiniteError, ShapeError

logger = logging.getLogger("utransformer")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"


class ValidationError(click.ClickException):
    exit_code = EXIT_VALIDATION


class RuntimeFailure(click.ClickException):
    exit_code = EXIT_RUNTIME


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path: Path) -> Path:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        tmp.replace(path)
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


class ExitCodeGroup(click.Group):
    """Maps exceptions onto the documented exit codes instead of click's defaults."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
            code = rv if isinstance(rv, int) else EXIT_OK
        except click.exceptions.Exit as exc:
            code = exc.exit_code
        except click.exceptions.Abort:
            click.echo("aborted", err=True)
            code = EXIT_VALIDATION
        except RuntimeFailure as exc:
            exc.show()
            code = EXIT_RUNTIME
        except click.ClickException as exc:
            # usage errors included: click would use 2, which is reserved for runtime failures here
            exc.show()
            code = EXIT_VALIDATION
        except (GenerationError, NonFiniteError, RuntimeError, FloatingPointError, MemoryError) as exc:
            click.echo(f"error: {exc}", err=True)
            code = EXIT_RUNTIME
        except (ValueError, ShapeError, KeyError, FileNotFoundError, IsADirectoryError) as exc:
            click.echo(f"error: {exc}", err=True)
            code = EXIT_VALIDATION
        if standalone_mode:
            sys.exit(code)
        return code


def prepare_out_dir(out: Path, force: bool, owned: tuple[str, ...] = ()) -> None:
    """Refuse to write into a non-empty directory unless ``force``; then clear ``owned`` entries."""
    if out.exists() and not out.is_dir():
        raise ValidationError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ValidationError(f"{out} is not empty; pass --force to overwrite")
        for name in owned:
            target = out / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    out.mkdir(parents=True, exist_ok=True)


def prepare_out_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ValidationError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def parse_switch(value: str) -> bool:
    return value == "on"


def parse_level_list(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    from .experiments import parse_levels

    try:
        return parse_levels(text)
    except ValueError as exc:
        raise ValidationError(f"bad --mhca-levels {text!r}: {exc}") from exc


def parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"{flag} expects comma-separated integers, got {text!r}") from exc


def build_variant(variant, heads, pe, mhca_levels, depth, base_channels, pool_cap, n_classes=4) -> VariantConfig:
    if variant in ("unet", "local-gate"):
        if heads is not None:
            click.echo(f"warning: --heads is ignored for variant {variant}", err=True)
        heads = 0
    if mhca_levels is not None and variant not in ("mhca", "u-transformer"):
        raise ValidationError(f"--mhca-levels is only valid for mhca and u-transformer, not {variant}")
    try:
        return VariantConfig(
            variant=variant,
            depth=depth,
            base_channels=base_channels,
            heads=4 if heads is None else heads,
            pe=pe,
            mhca_levels=mhca_levels,
            pool_cap=pool_cap,
            n_classes=n_classes,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def load_data(path: Path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise ValidationError(str(exc)) from exc


@click.group(cls=ExitCodeGroup)
@click.version_option(__version__, prog_name="utransformer")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """U-Transformer segmentation experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# gen


@cli.command()
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--count", type=click.IntRange(min=1), default=600, show_default=True)
@click.option("--size", type=click.IntRange(min=8), default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--depth", type=click.IntRange(min=1), default=3, show_default=True, help="Model depth the size must suit.")
@click.option("--allow-indivisible", is_flag=True, help="Warn instead of failing when --size is not divisible by 2**depth.")
@click.option("--force", is_flag=True)
def gen(out, count, size, seed, depth, allow_indivisible, force):
    """Generate a synthetic context-dependent dataset."""
    if size % 2**depth:
        msg = f"--size {size} is not divisible by 2**{depth}; models of depth {depth} cannot consume it"
        if not allow_indivisible:
            raise ValidationError(msg)
        click.echo(f"warning: {msg}", err=True)
    cfg = SyntheticConfig(size=size, n_images=count)
    prepare_out_dir(out, force, owned=("images", "masks", "manifest.json", MANIFEST_NAME))
    manifest = RunManifest("gen", {"generator": cfg.to_dict()}, seed, ["images/", "masks/", "manifest.json"])
    manifest.write(out / MANIFEST_NAME)
    stats: dict = {}
    samples = generate_synthetic(cfg, seed, stats)
    save_dataset(out, samples, cfg, seed)
    click.echo(f"wrote {count} images to {out} ({stats.get('retries', 0)} placement retries)")


# ---------------------------------------------------------------------------
# train

_model_options = [
    click.option("--variant", type=click.Choice(VARIANTS), default="u-transformer", show_default=True),
    click.option("--heads", type=click.IntRange(min=0), default=None, help="Attention heads [default: 4]."),
    click.option("--pe", type=click.Choice(["on", "off"]), default="on", show_default=True),
    click.option("--mhca-levels", default=None, help="Comma-separated skip levels, 1 = deepest [default: all]."),
    click.option("--depth", type=click.IntRange(min=1), default=3, show_default=True),
    click.option("--base-channels", type=click.IntRange(min=1), default=16, show_default=True),
    click.option("--pool-cap", type=click.IntRange(min=1), default=16, show_default=True),
]

_train_options = [
    click.option("--epochs", type=click.IntRange(min=1), default=15, show_default=True),
    click.option("--batch", type=click.IntRange(min=2), default=8, show_default=True),
    click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=1e-4, show_default=True),
    click.option("--gamma", type=click.FloatRange(0, 1, min_open=True), default=0.96, show_default=True),
    click.option("--decay-interval", type=click.IntRange(min=1), default=1000, show_default=True),
    click.option("--folds", type=click.IntRange(min=2), default=5, show_default=True),
    click.option("--split-seed", type=int, default=0, show_default=True),
    click.option("--loss", type=click.Choice(["ce", "ce+dice"]), default="ce", show_default=True),
]


def _apply(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn

    return deco


@cli.command()
@click.option("--data", type=click.Path(path_type=Path, exists=True, file_okay=False), required=True)
@_apply(_model_options)
@_apply(_train_options)
@click.option("--fold", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-epoch-eval", is_flag=True, help="Skip the per-epoch test-fold Dice.")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output directory.")
@click.option("--force", is_flag=True)
def train(data, variant, heads, pe, mhca_levels, depth, base_channels, pool_cap, epochs, batch, lr, gamma,
          decay_interval, folds, split_seed, loss, fold, seed, no_epoch_eval, out, force):
    """Train one cross-validation fold; writes checkpoint.utfm and epochs.csv."""
    from .training import TrainConfig, save_checkpoint, train as run_training, write_epoch_csv

    if fold >= folds:
        raise ValidationError(f"--fold {fold} must be < --folds {folds}")
    samples, ds_manifest = load_data(data)
    model_cfg = build_variant(variant, heads, parse_switch(pe), parse_level_list(mhca_levels), depth, base_channels,
                              pool_cap, int(ds_manifest.get("n_classes", 4)))
    _check_sizes(samples, model_cfg)
    try:
        cfg = TrainConfig(lr0=lr, gamma=gamma, decay_interval=decay_interval, epochs=epochs, batch_size=batch, seed=seed,
                          loss=loss, folds=folds, fold=fold, split_seed=split_seed,
                          evaluate_each_epoch=not no_epoch_eval, model=model_cfg)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    prepare_out_dir(out, force, owned=("checkpoint.utfm", "epochs.csv", MANIFEST_NAME))
    RunManifest("train", {"data": str(data), **cfg.to_dict()}, seed, ["checkpoint.utfm", "epochs.csv"]).write(out / MANIFEST_NAME)

    log = []

    def on_epoch(entry):
        log.append(entry)
        write_epoch_csv(out / "epochs.csv", log, model_cfg.n_classes)

    result = run_training(cfg, samples, on_epoch)
    save_checkpoint(out / "checkpoint.utfm", result.model, result.step, cfg, result.state)
    final = result.log[-1]
    click.echo(
        f"trained {variant} fold {fold}/{folds}: {len(result.train_ids)} train / {len(result.test_ids)} test ids, "
        f"{result.step} steps, final loss {final.train_loss:.4f}"
    )


def _check_sizes(samples, cfg: VariantConfig) -> None:
    div = 2**cfg.depth
    for s in samples[:1]:
        h, w = s.image.shape
        if h % div or w % div:
            raise ValidationError(f"image size {h}x{w} is not divisible by 2**{cfg.depth}")


# ---------------------------------------------------------------------------
# eval


def _load_ckpt(path: Path):
    from .training import load_checkpoint

    if not path.is_file():
        raise ValidationError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


@cli.command("eval")
@click.option("--ckpt", type=click.Path(path_type=Path), required=True)
@click.option("--data", type=click.Path(path_type=Path, exists=True, file_okay=False), required=True)
@click.option("--fold", type=click.IntRange(min=0), default=None, help="[default: the checkpoint's fold]")
@click.option("--folds", type=click.IntRange(min=2), default=None, help="[default: the checkpoint's folds]")
@click.option("--split-seed", type=int, default=None, help="[default: the checkpoint's split seed]")
@click.option("--subset", type=click.Choice(["test", "train", "all"]), default="test", show_default=True)
@click.option("--hd-percentile", type=click.FloatRange(0, 100), default=None, help="Report the percentile Hausdorff distance.")
@click.option("--csv", "csv_out", type=click.Path(path_type=Path), required=True)
@click.option("--force", is_flag=True)
def evaluate(ckpt, data, fold, folds, split_seed, subset, hd_percentile, csv_out, force):
    """Per-image, per-class Dice and Hausdorff distance for one fold."""
    from .metrics import evaluate_masks
    from .training import predict

    checkpoint = _load_ckpt(ckpt)
    prepare_out_file(csv_out, force)
    tc = checkpoint.train_config
    folds = folds if folds is not None else (tc.folds if tc else 5)
    fold = fold if fold is not None else (tc.fold if tc else 0)
    split_seed = split_seed if split_seed is not None else (tc.split_seed if tc else 0)
    if fold >= folds:
        raise ValidationError(f"--fold {fold} must be < --folds {folds}")
    samples, _ = load_data(data)
    _check_sizes(samples, checkpoint.config)
    split = kfold_split([s.id for s in samples], folds, split_seed)
    ids = {"test": split.test_ids(fold), "train": split.train_ids(fold), "all": [s.id for s in samples]}[subset]
    by_id = {s.id: s for s in samples}
    manifest_path = csv_out.with_name(csv_out.name + ".manifest.json")
    RunManifest("eval", {"ckpt": str(ckpt), "data": str(data), "fold": fold, "folds": folds, "split_seed": split_seed,
                         "subset": subset, "hd_percentile": hd_percentile}, None, [str(csv_out)]).write(manifest_path)
    images, masks = stack([by_id[i] for i in ids])
    report = evaluate_masks(predict(checkpoint.model, images), masks, ids, checkpoint.config.n_classes, hd_percentile)
    report.to_csv(csv_out)
    for c, s in report.summary().items():
        hd = "n/a" if s.hd_mean is None else f"{s.hd_mean:.3f}"
        click.echo(f"class {c}: dice {s.dice_mean:.4f} +/- {s.dice_std:.4f}  hausdorff {hd} ({s.hd_undefined} undefined)")


# ---------------------------------------------------------------------------
# ablate


@cli.command()
@click.option("--data", type=click.Path(path_type=Path, exists=True, file_okay=False), required=True)
@click.option("--grid", "grid_specs", multiple=True, required=True,
              help="Axis spec, repeatable: heads=0,1,2,4,8 | pe=on,off | mhca-levels=1;1,2;1,2,3 | variant=unet,u-transformer")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--include-unet", is_flag=True, help="Add one plain U-Net row per seed for reference.")
@_apply(_model_options)
@_apply(_train_options)
@click.option("--fold", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output directory.")
@click.option("--force", is_flag=True)
def ablate(data, grid_specs, seeds, include_unet, variant, heads, pe, mhca_levels, depth, base_channels, pool_cap,
           epochs, batch, lr, gamma, decay_interval, folds, split_seed, loss, fold, out, force):
    """Train and score every cell of a cartesian grid; writes grid.csv."""
    from .experiments import expand_grid, parse_grid, run_grid, worker_count, write_grid_csv
    from .training import TrainConfig

    try:
        axes = parse_grid(list(grid_specs))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    seed_list = parse_int_list(seeds, "--seeds")
    if not seed_list:
        raise ValidationError("--seeds is empty")
    if fold >= folds:
        raise ValidationError(f"--fold {fold} must be < --folds {folds}")
    samples, ds_manifest = load_data(data)
    base_model = build_variant(variant, heads, parse_switch(pe), parse_level_list(mhca_levels), depth, base_channels,
                               pool_cap, int(ds_manifest.get("n_classes", 4)))
    _check_sizes(samples, base_model)
    base = TrainConfig(lr0=lr, gamma=gamma, decay_interval=decay_interval, epochs=epochs, batch_size=batch,
                       loss=loss, folds=folds, fold=fold, split_seed=split_seed, evaluate_each_epoch=False,
                       model=base_model)
    cells = expand_grid(axes, seed_list)
    axis_names = list(axes)
    if include_unet:
        if "variant" not in axis_names:
            axis_names = ["variant"] + axis_names
            for c in cells:
                c["variant"] = base_model.variant
        reference = {a: cells[0][a] for a in axis_names if a != "variant"}
        cells += [{"variant": "unet", **reference, "seed": s} for s in seed_list]
    # fail on an invalid cell before any training starts
    from .experiments import cell_config

    for c in cells:
        try:
            cell_config(base, c)
        except ValueError as exc:
            raise ValidationError(f"grid cell {c}: {exc}") from exc

    prepare_out_dir(out, force, owned=("grid.csv", MANIFEST_NAME))
    RunManifest("ablate", {"data": str(data), "grid": list(grid_specs), "include_unet": include_unet,
                           "base": base.to_dict()}, None, ["grid.csv"]).write(out / MANIFEST_NAME)
    rows = run_grid(samples, base, cells, worker_count())
    write_grid_csv(out / "grid.csv", rows, axis_names, base_model.n_classes)
    click.echo(f"wrote {len(rows)} rows to {out / 'grid.csv'}")


# ---------------------------------------------------------------------------
# attention


def parse_pixel(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"--pixel expects r,c, got {text!r}") from exc
    return r, c


@cli.command()
@click.option("--ckpt", type=click.Path(path_type=Path), required=True)
@click.option("--image", type=click.Path(path_type=Path, exists=True, dir_okay=False), required=True)
@click.option("--pixel", required=True, help="Query pixel as row,col.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--force", is_flag=True)
def attention(ckpt, image, pixel, out, force):
    """Export attention heatmaps for one query pixel as PGM files."""
    from .metrics import export_attention

    r, c = parse_pixel(pixel)
    checkpoint = _load_ckpt(ckpt)
    img = load_image(image)
    h, w = img.shape
    if not (0 <= r < h and 0 <= c < w):
        raise ValidationError(f"--pixel {r},{c} lies outside the {h}x{w} image")
    _check_sizes_shape(img.shape, checkpoint.config)
    owned = tuple(p.name for p in out.glob("attn_*")) + (MANIFEST_NAME,)
    prepare_out_dir(out, force, owned=owned)
    RunManifest("attention", {"ckpt": str(ckpt), "image": str(image), "pixel": [r, c]}, None, ["attn_*.pgm", "attn_raw.csv"]).write(out / MANIFEST_NAME)
    written = export_attention(checkpoint.model, img, (r, c), out)
    if not written:
        click.echo(f"warning: variant {checkpoint.config.variant} has no attention blocks", err=True)
    click.echo(f"wrote {len(written)} files to {out}")


def _check_sizes_shape(shape, cfg: VariantConfig) -> None:
    div = 2**cfg.depth
    if shape[0] % div or shape[1] % div:
        raise ValidationError(f"image size {shape[0]}x{shape[1]} is not divisible by 2**{cfg.depth}")


# ---------------------------------------------------------------------------
# gradcheck / ttest


@cli.command()
@click.option("--op", "op_name", default="all", show_default=True, help="Op name or 'all'.")
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Optional directory for report.csv.")
@click.option("--force", is_flag=True)
def gradcheck(op_name, tolerance, out, force):
    """Finite-difference gradient checks; exits 2 if any op exceeds the tolerance."""
    from .gradcheck import available_ops, check_all

    ops = available_ops() if op_name == "all" else [op_name]
    unknown = [o for o in ops if o not in available_ops()]
    if unknown:
        raise ValidationError(f"unknown op {unknown[0]!r}; available: {', '.join(available_ops())}")
    if out is not None:
        prepare_out_dir(out, force, owned=("report.csv", MANIFEST_NAME))
        RunManifest("gradcheck", {"op": op_name, "tolerance": tolerance}, None, ["report.csv"]).write(out / MANIFEST_NAME)
    reports = check_all(tolerance, ops)
    lines = ["op,shapes,max_rel_error,n_checked,passed"]
    click.echo(f"{'op':<18} {'shapes':<44} {'max rel err':>12}  status")
    for r in reports:
        click.echo(f"{r.op:<18} {str(r.shapes):<44} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
        lines.append(f"{r.op},\"{r.shapes}\",{r.max_rel_error!r},{r.n_checked},{int(r.passed)}")
    if out is not None:
        (out / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    failed = [r for r in reports if not r.passed]
    if failed:
        raise RuntimeFailure(f"{len(failed)} of {len(reports)} checks exceed tolerance {tolerance:g}")
    click.echo(f"all {len(reports)} checks below {tolerance:g}")


def paired_dice(a: Path, b: Path, class_id: int) -> tuple[list[float], list[float]]:
    from .metrics import MetricsReport

    ra, rb = MetricsReport.from_csv(a), MetricsReport.from_csv(b)
    da = {r.image_id: r.dice for r in ra.rows if r.class_id == class_id}
    db = {r.image_id: r.dice for r in rb.rows if r.class_id == class_id}
    if set(da) != set(db):
        raise ValidationError("the two CSVs cover different image ids")
    if not da:
        raise ValidationError(f"no rows for class {class_id}")
    ids = sorted(da)
    return [da[i] for i in ids], [db[i] for i in ids]


@cli.command()
@click.option("--a", "csv_a", type=click.Path(path_type=Path, exists=True, dir_okay=False), required=True)
@click.option("--b", "csv_b", type=click.Path(path_type=Path, exists=True, dir_okay=False), required=True)
@click.option("--class", "class_id", type=click.IntRange(min=0), default=3, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Optional JSON result file.")
@click.option("--force", is_flag=True)
def ttest(csv_a, csv_b, class_id, out, force):
    """Paired t-test on per-image Dice of one class between two metrics CSVs."""
    from .metrics import paired_t_test

    a, b = paired_dice(csv_a, csv_b, class_id)
    try:
        res = paired_t_test(a, b)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    payload = {"a": str(csv_a), "b": str(csv_b), "class": class_id, "n": len(a), "mean_a": float(np.mean(a)),
               "mean_b": float(np.mean(b)), "t": res.t, "df": res.df, "p": res.p, "degenerate": res.degenerate}
    if out is not None:
        prepare_out_file(out, force)
        RunManifest("ttest", {"a": str(csv_a), "b": str(csv_b), "class": class_id}, None, [str(out)]).write(
            out.with_name(out.name + ".manifest.json"))
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(f"n={len(a)} mean_a={payload['mean_a']:.6f} mean_b={payload['mean_b']:.6f} t={res.t:.6g} df={res.df} p={res.p:.6g}")


def main(argv=None) -> int:
    return cli.main(args=argv, prog_name="utransformer", standalone_mode=False)


if __name__ == "__main__":
    sys.exit(cli.main(prog_name="utransformer"))
