"""Dice, Hausdorff distance, paired t-test and attention-map export."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, ndimage

from .attention import AttentionRecord
from .data import write_pgm
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

METRICS_HEADER = ["image_id", "class", "dice", "hausdorff", "hd_defined"]


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int, n_classes: int | None = None) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both are empty."""
    _check(pred, gt)
    if n_classes is not None and not 0 <= class_id < n_classes:
        raise ValueError(f"class {class_id} outside 0..{n_classes - 1}")
    p = pred == class_id
    g = gt == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every pixel of ``a`` to the nearest pixel of ``b``."""
    return ndimage.distance_transform_edt(~b)[a]


def hausdorff(pred: np.ndarray, gt: np.ndarray, class_id: int, percentile: float | None = None) -> float | None:
    """Symmetric Hausdorff distance in pixels, or ``None`` if either set is empty.

    With ``percentile`` (e.g. 95) the maximum of both directed distance
    percentiles is returned instead of the maxima.
    """
    _check(pred, gt)
    p = pred == class_id
    g = gt == class_id
    if not p.any() or not g.any():
        return None
    d_pg, d_gp = _directed(p, g), _directed(g, p)
    if percentile is None:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


# ---------------------------------------------------------------------------
# paired t-test


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def t_density(x: float, df: int) -> float:
    log_norm = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_norm - (df + 1) / 2 * math.log1p(x * x / df))


def t_two_sided_p(t: float, df: int) -> float:
    """``P(|T| >= |t|)`` by integrating the Student density over ``[0, |t|]``."""
    central, _ = integrate.quad(t_density, 0.0, abs(t), args=(df,), epsabs=1e-12, epsrel=1e-10, limit=200)
    return min(max(1.0 - 2.0 * central, 0.0), 1.0)


def paired_t_test(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_two_sided_p(t, n - 1), n - 1)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricRow:
    image_id: str
    class_id: int
    dice: float
    hausdorff: float | None


@dataclass
class ClassSummary:
    dice_mean: float
    dice_std: float
    hd_mean: float | None
    hd_std: float | None
    hd_undefined: int


@dataclass
class MetricsReport:
    n_classes: int
    rows: list[MetricRow] = field(default_factory=list)

    def values(self, class_id: int, key: str = "dice") -> list[float]:
        out = [getattr(r, key) for r in self.rows if r.class_id == class_id]
        return [v for v in out if v is not None]

    def summary(self) -> dict[int, ClassSummary]:
        out = {}
        for c in range(self.n_classes):
            d = np.array(self.values(c, "dice"), dtype=np.float64)
            hd = np.array(self.values(c, "hausdorff"), dtype=np.float64)
            undefined = sum(1 for r in self.rows if r.class_id == c and r.hausdorff is None)
            out[c] = ClassSummary(
                float(d.mean()) if d.size else math.nan,
                float(d.std()) if d.size else math.nan,
                float(hd.mean()) if hd.size else None,
                float(hd.std()) if hd.size else None,
                undefined,
            )
        return out

    def dice_per_class(self) -> list[float]:
        s = self.summary()
        return [s[c].dice_mean for c in range(self.n_classes)]

    def foreground_dice(self) -> float:
        return float(np.mean(self.dice_per_class()[1:]))

    def to_csv(self, path: str | os.PathLike | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in self.rows:
            hd = "" if r.hausdorff is None else repr(float(r.hausdorff))
            writer.writerow([r.image_id, r.class_id, repr(float(r.dice)), hd, int(r.hausdorff is not None)])
        text = buf.getvalue()
        if path is not None:
            _atomic_write(Path(path), text)
        return text

    @classmethod
    def from_csv(cls, source: str | os.PathLike, n_classes: int | None = None) -> "MetricsReport":
        text = Path(source).read_text(encoding="utf-8")
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        rows = []
        for rec in reader:
            defined = rec["hd_defined"] == "1"
            rows.append(MetricRow(rec["image_id"], int(rec["class"]), float(rec["dice"]), float(rec["hausdorff"]) if defined else None))
        if n_classes is None:
            n_classes = max((r.class_id for r in rows), default=0) + 1
        return cls(n_classes, rows)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def evaluate_masks(preds: np.ndarray, gts: np.ndarray, ids: list[str], n_classes: int, hd_percentile: float | None = None) -> MetricsReport:
    report = MetricsReport(n_classes)
    for pred, gt, sid in zip(preds, gts, ids):
        for c in range(n_classes):
            report.rows.append(MetricRow(sid, c, dice(pred, gt, c, n_classes), hausdorff(pred, gt, c, hd_percentile)))
    return report


def aggregate(values) -> dict[str, float]:
    """Mean and population standard deviation with the range, for fold/seed summaries."""
    v = np.asarray(list(values), dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()), "max": float(v.max()), "n": int(v.size)}


# ---------------------------------------------------------------------------
# attention export


def _to_gray(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _resize_nearest(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.arange(h) * grid.shape[0] // h
    cols = np.arange(w) * grid.shape[1] // w
    return grid[rows][:, cols]


def attention_row(record: AttentionRecord, pixel: tuple[int, int], image_size: tuple[int, int], sample: int = 0) -> np.ndarray:
    """Attention weights of the query cell containing ``pixel``, on the key grid."""
    gh, gw = record.query_grid
    qr = pixel[0] * gh // image_size[0]
    qc = pixel[1] * gw // image_size[1]
    return record.matrix[sample, qr * gw + qc].reshape(record.key_grid)


def export_attention(model, image: np.ndarray, query_pixel: tuple[int, int], out_dir: str | os.PathLike) -> list[Path]:
    """Write one heatmap PGM per (kind, level, head) plus ``attn_raw.csv``."""
    h, w = image.shape
    r, c = query_pixel
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"query pixel {query_pixel} outside the {h}x{w} image")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model.eval()
    with no_grad():
        _, records = model.forward(Tensor(image[None, None].astype(np.float32)), capture_attention=True)
    if not records:
        logger.warning("model variant %r has no attention blocks; nothing exported", model.config.variant)
        return []

    written = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "level", "head", "grid_h", "grid_w", "weights"])
    for rec in records:
        if rec.kind == "gate":
            grid = rec.matrix[0]
        else:
            grid = attention_row(rec, query_pixel, (h, w))
        heat = _resize_nearest(_to_gray(grid), h, w)
        path = out_dir / f"attn_{rec.kind}_L{rec.level}_H{rec.head}.pgm"
        write_pgm(path, heat)
        written.append(path)
        writer.writerow([rec.kind, rec.level, rec.head, grid.shape[0], grid.shape[1], *(repr(float(v)) for v in grid.ravel())])
    raw = out_dir / "attn_raw.csv"
    _atomic_write(raw, buf.getvalue())
    written.append(raw)
    return written
