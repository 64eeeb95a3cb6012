"""Synthetic context-dependent segmentation data, PGM I/O and k-fold splits.

Each synthetic image holds a large disk, an ellipse and two identical faint
blobs. Only the blob lying on the ellipse's side of the disk (the half-plane
through the disk centre facing the ellipse centre) is labelled; the other is
background. A small window around either blob is therefore uninformative and
the label can only be recovered from the global layout.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BACKGROUND, DISK, ELLIPSE, TARGET = 0, 1, 2, 3
N_CLASSES = 4
PATCH_RADIUS = 4  # half-width of the 9x9 window a blob must keep free of other shapes


class GenerationError(RuntimeError):
    """Rejection sampling could not place every shape on the canvas."""


class PGMError(ValueError):
    """Base class for PGM decoding failures."""


class UnsupportedFormatError(PGMError):
    pass


class MalformedHeaderError(PGMError):
    pass


class DimensionOverflowError(PGMError):
    pass


class TruncatedPayloadError(PGMError):
    pass


@dataclass
class SegmentationSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 labels
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")

    def validate(self, n_classes: int = N_CLASSES) -> None:
        if self.mask.size and int(self.mask.max()) >= n_classes:
            raise ValueError(f"{self.id}: mask label {int(self.mask.max())} >= {n_classes}")


@dataclass
class SyntheticConfig:
    size: int = 64
    n_images: int = 100
    disk_radius: tuple[float, float] = (10.0, 16.0)
    ellipse_axes: tuple[float, float] = (6.0, 12.0)
    blob_radius: tuple[float, float] = (2.0, 4.0)
    contrast: float = 0.08
    noise: float = 0.05
    margin: int = 2
    background: float = 0.2
    disk_intensity: float = 0.6
    ellipse_intensity: float = 0.8
    # blobs keep this distance from the dividing line so the side is unambiguous
    line_margin: float = 3.0
    max_attempts: int = 1000
    max_retries: int = 10

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        for key in ("disk_radius", "ellipse_axes", "blob_radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Layout:
    disk: tuple[float, float, float]  # row, col, radius
    ellipse: tuple[float, float, float, float, float]  # row, col, semi-axis a, b, angle
    target: tuple[float, float, float]
    distractor: tuple[float, float, float]


def _place_layout(cfg: SyntheticConfig, rng: np.random.Generator) -> Layout:
    size, m = cfg.size, cfg.margin
    budget = cfg.max_attempts

    def uniform_center(radius):
        lo, hi = radius + m, size - 1 - radius - m
        if lo > hi:
            return None
        return rng.uniform(lo, hi), rng.uniform(lo, hi)

    while budget > 0:
        budget -= 1
        r = rng.uniform(*cfg.disk_radius)
        disk_c = uniform_center(r)
        a, b = sorted(rng.uniform(*cfg.ellipse_axes, size=2), reverse=True)
        angle = rng.uniform(0.0, math.pi)
        ell_c = uniform_center(a)
        if disk_c is None or ell_c is None:
            continue
        if math.dist(disk_c, ell_c) < r + a + m:
            continue
        axis = np.subtract(ell_c, disk_c)
        axis = axis / np.linalg.norm(axis)

        blobs = []
        for side in (1.0, -1.0):
            while budget > 0:
                budget -= 1
                rb = rng.uniform(*cfg.blob_radius)
                c = uniform_center(max(rb, PATCH_RADIUS))
                if c is None:
                    break
                if side * float(np.dot(np.subtract(c, disk_c), axis)) < cfg.line_margin:
                    continue
                clear = PATCH_RADIUS * math.sqrt(2) + 1 + m
                if math.dist(c, disk_c) < r + clear or math.dist(c, ell_c) < a + clear:
                    continue
                if blobs and math.dist(c, blobs[0][:2]) < 2 * clear:
                    continue
                blobs.append((c[0], c[1], rb))
                break
        if len(blobs) == 2:
            return Layout((*disk_c, r), (*ell_c, a, b, angle), blobs[0], blobs[1])
    raise GenerationError(f"could not place shapes on a {size}x{size} canvas in {cfg.max_attempts} attempts")


def render(layout: Layout, cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0 : cfg.size, 0 : cfg.size].astype(np.float64)
    image = np.full((cfg.size, cfg.size), cfg.background)
    mask = np.zeros((cfg.size, cfg.size), dtype=np.uint8)

    dr, dc, r = layout.disk
    disk = (rows - dr) ** 2 + (cols - dc) ** 2 <= r * r
    er, ec, a, b, th = layout.ellipse
    u = (rows - er) * math.cos(th) + (cols - ec) * math.sin(th)
    v = -(rows - er) * math.sin(th) + (cols - ec) * math.cos(th)
    ellipse = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    image[disk] = cfg.disk_intensity
    mask[disk] = DISK
    image[ellipse] = cfg.ellipse_intensity
    mask[ellipse] = ELLIPSE
    for (br, bc, rb), label in ((layout.target, TARGET), (layout.distractor, BACKGROUND)):
        blob = (rows - br) ** 2 + (cols - bc) ** 2 <= rb * rb
        image[blob] = cfg.background + cfg.contrast
        mask[blob] = label

    image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_one(cfg: SyntheticConfig, seed: int, index: int, retry: int = 0) -> tuple[SegmentationSample, Layout]:
    rng = np.random.default_rng([seed, index, retry])
    layout = _place_layout(cfg, rng)
    image, mask = render(layout, cfg, rng)
    return SegmentationSample(image, mask, f"img{index:05d}"), layout


def generate_synthetic(cfg: SyntheticConfig, seed: int, stats: dict | None = None, with_layouts: bool = False):
    """Generate ``cfg.n_images`` samples; image ``i`` depends only on ``(seed, i)``.

    A placement failure is retried with a fresh sub-seed up to
    ``cfg.max_retries`` times; the number of retries is added to
    ``stats["retries"]`` when ``stats`` is given.
    """
    samples, layouts = [], []
    retries = 0
    for index in range(cfg.n_images):
        for retry in range(cfg.max_retries + 1):
            try:
                sample, layout = generate_one(cfg, seed, index, retry)
                break
            except GenerationError:
                retries += 1
        else:
            raise GenerationError(f"image {index}: gave up after {cfg.max_retries} retries")
        samples.append(sample)
        layouts.append(layout)
    if retries:
        logger.info("synthetic generation needed %d retries", retries)
    if stats is not None:
        stats["retries"] = stats.get("retries", 0) + retries
    return (samples, layouts) if with_layouts else samples


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Write an 8-bit binary (P5) PGM with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    if pixels.size and (pixels.min() < 0 or pixels.max() > 255):
        raise ValueError("PGM values must lie in 0..255")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.astype(np.uint8).tobytes())


_MAX_EXTENT = 1 << 16


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 2 or data[0:1] != b"P":
        raise MalformedHeaderError(f"{path}: not a PGM file")
    if data[1:2] != b"5":
        raise UnsupportedFormatError(f"{path}: only binary P5 is supported, got P{data[1:2].decode(errors='replace')}")

    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{path}: expected a number in the header at byte {start}")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedHeaderError(f"{path}: header must end with a single whitespace byte")
    pos += 1

    w, h, maxval = fields
    if w == 0 or h == 0 or w > _MAX_EXTENT or h > _MAX_EXTENT:
        raise DimensionOverflowError(f"{path}: unsupported dimensions {w}x{h}")
    if maxval == 0 or maxval > 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval} is not 8-bit")
    payload = data[pos:]
    if len(payload) < w * h:
        raise TruncatedPayloadError(f"{path}: expected {w * h} payload bytes, found {len(payload)}")
    return np.frombuffer(payload[: w * h], dtype=np.uint8).reshape(h, w).copy()


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_sample(root: str | os.PathLike, sample: SegmentationSample) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    write_pgm(root / "images" / f"{sample.id}.pgm", quantize(sample.image))
    write_pgm(root / "masks" / f"{sample.id}.pgm", sample.mask)


def load_image(path: str | os.PathLike) -> np.ndarray:
    return (read_pgm(path).astype(np.float32) / 255.0).astype(np.float32)


def load_sample(root: str | os.PathLike, sample_id: str, n_classes: int = N_CLASSES) -> SegmentationSample:
    root = Path(root)
    image = load_image(root / "images" / f"{sample_id}.pgm")
    mask = read_pgm(root / "masks" / f"{sample_id}.pgm")
    sample = SegmentationSample(image, mask, sample_id)
    sample.validate(n_classes)
    return sample


def save_dataset(root: str | os.PathLike, samples: list[SegmentationSample], cfg: SyntheticConfig | None = None, seed: int | None = None, n_classes: int = N_CLASSES) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(root, s)
    manifest = {
        "ids": [s.id for s in samples],
        "n_classes": n_classes,
        "generator": cfg.to_dict() if cfg is not None else None,
        "seed": seed,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_dataset(root: str | os.PathLike) -> tuple[list[SegmentationSample], dict]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    n_classes = int(manifest.get("n_classes", N_CLASSES))
    return [load_sample(root, i, n_classes) for i in manifest["ids"]], manifest


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldSplit:
    folds: list[list[str]]
    seed: int
    k: int = field(init=False)

    def __post_init__(self):
        self.k = len(self.folds)

    def test_ids(self, fold: int) -> list[str]:
        return list(self.folds[fold])

    def train_ids(self, fold: int) -> list[str]:
        return [i for j, chunk in enumerate(self.folds) if j != fold for i in chunk]


def kfold_split(ids: list[str], k: int, seed: int) -> FoldSplit:
    """Seeded shuffle, then contiguous chunks; earlier folds absorb the remainder."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"cannot split {len(ids)} ids into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit([[ids[i] for i in chunk] for chunk in np.array_split(order, k)], seed)


def stack(samples: list[SegmentationSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(N,1,H,W)`` float32 images and ``(N,H,W)`` int64 masks."""
    images = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks
