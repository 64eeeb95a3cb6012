"""Losses, Adam with exponential learning-rate decay, the training loop and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import UTransformer, VariantConfig, build_model
from .data import SegmentationSample, kfold_split, stack
from .metrics import dice
from .nn import Module
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LOSSES = ("ce", "ce+dice")
DICE_WEIGHT = 0.5


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class MissingGradientError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses


def _one_hot(mask: np.ndarray, n_classes: int, dtype) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}, got range {mask.min()}..{mask.max()}")
    eye = np.eye(n_classes, dtype=dtype)
    return np.moveaxis(eye[mask], -1, 1)


def _check_pair(logits: Tensor, mask: np.ndarray) -> None:
    n, _, h, w = logits.shape
    if np.shape(mask) != (n, h, w):
        raise T.ShapeError(f"mask shape {np.shape(mask)} does not match logits {logits.shape}")


def cross_entropy_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[label]``."""
    _check_pair(logits, mask)
    n, c, h, w = logits.shape
    target = Tensor(_one_hot(mask, c, logits.dtype))
    picked = T.tsum(T.mul(T.log_softmax(logits, axis=1), target))
    return T.mul(picked, -1.0 / (n * h * w))


def dice_loss(logits: Tensor, mask: np.ndarray, smooth: float = 1.0) -> Tensor:
    """``1 - mean_c (2 sum p g + s) / (sum p + sum g + s)`` over softmax probabilities."""
    _check_pair(logits, mask)
    c = logits.shape[1]
    g = _one_hot(mask, c, logits.dtype)
    p = T.softmax(logits, axis=1)
    inter = T.tsum(T.tsum(T.tsum(T.mul(p, Tensor(g)), axis=3), axis=2), axis=0)
    p_sum = T.tsum(T.tsum(T.tsum(p, axis=3), axis=2), axis=0)
    g_sum = Tensor(g.sum(axis=(0, 2, 3)))
    ratio = T.div(T.add(T.mul(inter, 2.0), smooth), T.add(T.add(p_sum, g_sum), smooth))
    return T.sub(1.0, T.mean(ratio))


def segmentation_loss(logits: Tensor, mask: np.ndarray, kind: str = "ce") -> Tensor:
    if kind == "ce":
        return cross_entropy_loss(logits, mask)
    if kind == "ce+dice":
        return T.add(cross_entropy_loss(logits, mask), T.mul(dice_loss(logits, mask), DICE_WEIGHT))
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], state: AdamState, lr_t: float, grads: list[np.ndarray] | None = None) -> AdamState:
    """Bias-corrected Adam update applied in place; returns ``state`` (mutated)."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("params, grads and optimizer state must have equal length")
    missing = [i for i, g in enumerate(grads) if g is None]
    if missing:
        names = [params[i].name or str(i) for i in missing]
        raise MissingGradientError(f"no gradient for parameters {names}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def lr_at(step: int, lr0: float = 1e-4, gamma: float = 0.96, interval: int = 1000) -> float:
    """Exponential decay ``lr0 * gamma**(step / interval)`` with a real exponent."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return lr0 * gamma ** (step / interval)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    gamma: float = 0.96
    decay_interval: int = 1000
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    loss: str = "ce"
    folds: int = 5
    fold: int = 0
    split_seed: int = 0
    evaluate_each_epoch: bool = True
    model: VariantConfig = field(default_factory=VariantConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = VariantConfig.from_dict(self.model)
        self.validate()

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.decay_interval < 1:
            raise ValueError("decay interval must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch statistics)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if not 0 <= self.fold < self.folds:
            raise ValueError(f"fold {self.fold} outside 0..{self.folds - 1}")

    def lr(self, step: int) -> float:
        return lr_at(step, self.lr0, self.gamma, self.decay_interval)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    step: int
    lr: float
    train_loss: float
    test_dice_mean: float | None = None
    test_dice_per_class: list[float] | None = None


@dataclass
class TrainResult:
    model: UTransformer
    state: AdamState
    step: int
    log: list[EpochLog]
    train_ids: list[str]
    test_ids: list[str]


def predict(model: Module, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode argmax labels ``(N, H, W)``; restores the previous mode."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(Tensor(images[i : i + batch_size]))
            out.append(np.argmax(logits.data, axis=1))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def dice_per_class(preds: np.ndarray, masks: np.ndarray, n_classes: int) -> list[float]:
    """Per-class Dice averaged over images."""
    return [float(np.mean([dice(p, g, c) for p, g in zip(preds, masks)])) for c in range(n_classes)]


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch smaller than 2 is dropped."""
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [c for c in chunks if len(c) >= 2]


def train_step(model: UTransformer, state: AdamState, images: np.ndarray, masks: np.ndarray, lr: float, loss_kind: str) -> float:
    params = model.parameters()
    model.zero_grad()
    loss = segmentation_loss(model(Tensor(images)), masks, loss_kind)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    T.backward(loss)
    adam_step(params, state, lr)
    return value


def train_on_arrays(
    config: TrainConfig,
    images: np.ndarray,
    masks: np.ndarray,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
    model: UTransformer | None = None,
) -> tuple[UTransformer, AdamState, int, list[EpochLog]]:
    if len(images) < 2:
        raise TrainingError(f"need at least 2 training images, got {len(images)}")
    if model is None:
        model = build_model(config.model, config.seed)
    model.train()
    params = model.parameters()
    state = AdamState.zeros_like(params)
    step = 0
    log = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for idx in batches(len(images), config.batch_size, rng):
            losses.append(train_step(model, state, images[idx], masks[idx], config.lr(step), config.loss))
            step += 1
        entry = EpochLog(epoch, step, config.lr(step), float(np.mean(losses)))
        if test is not None and config.evaluate_each_epoch:
            per_class = dice_per_class(predict(model, test[0]), test[1], config.model.n_classes)
            entry.test_dice_per_class = per_class
            entry.test_dice_mean = float(np.mean(per_class[1:]))
        logger.info(
            "epoch %d step %d lr %.3g loss %.4f dice %s",
            epoch, step, entry.lr, entry.train_loss,
            "-" if entry.test_dice_mean is None else f"{entry.test_dice_mean:.4f}",
        )
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return model, state, step, log


def train(
    config: TrainConfig,
    samples: list[SegmentationSample],
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train ``config.fold`` of a seeded k-fold split of ``samples``."""
    split = kfold_split([s.id for s in samples], config.folds, config.split_seed)
    by_id = {s.id: s for s in samples}
    train_ids = split.train_ids(config.fold)
    test_ids = split.test_ids(config.fold)
    if not train_ids:
        raise TrainingError("empty training set")
    images, masks = stack([by_id[i] for i in train_ids])
    test = stack([by_id[i] for i in test_ids]) if test_ids else None
    model, state, step, log = train_on_arrays(config, images, masks, test, on_epoch)
    return TrainResult(model, state, step, log, train_ids, test_ids)


def epoch_csv_header(n_classes: int) -> list[str]:
    return ["epoch", "step", "lr", "train_loss", "test_dice_mean"] + [f"test_dice_c{c}" for c in range(n_classes)]


def epoch_csv_row(entry: EpochLog, n_classes: int) -> list:
    per_class = entry.test_dice_per_class or [None] * n_classes
    fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
    return [entry.epoch, entry.step, repr(entry.lr), repr(entry.train_loss), fmt(entry.test_dice_mean)] + [fmt(v) for v in per_class]


def write_epoch_csv(path: str | os.PathLike, log: list[EpochLog], n_classes: int) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(epoch_csv_header(n_classes))
        for entry in log:
            writer.writerow(epoch_csv_row(entry, n_classes))
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"UTFM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class PayloadLengthError(CheckpointError):
    pass


class ConfigHashError(CheckpointError):
    pass


def config_hash(cfg: VariantConfig) -> str:
    text = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    model: UTransformer
    step: int = 0
    train_config: TrainConfig | None = None
    state: AdamState | None = None

    @property
    def config(self) -> VariantConfig:
        return self.model.config


def _entries(model: UTransformer, state: AdamState | None) -> list[tuple[str, np.ndarray]]:
    entries = list(model.state_arrays().items())
    if state is not None:
        names = [n for n, _ in model.named_parameters()]
        entries += [(f"adam.m/{n}", m) for n, m in zip(names, state.m)]
        entries += [(f"adam.v/{n}", v) for n, v in zip(names, state.v)]
    return entries


def checkpoint_bytes(model: UTransformer, step: int = 0, train_config: TrainConfig | None = None, state: AdamState | None = None) -> bytes:
    entries = _entries(model, state)
    header = {
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "step": int(step),
        "adam_t": state.t if state is not None else None,
        "tensors": [{"name": n, "dtype": "f4", "dims": list(a.shape)} for n, a in entries],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in entries)
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def save_checkpoint(path: str | os.PathLike, model: UTransformer, step: int = 0, train_config: TrainConfig | None = None, state: AdamState | None = None) -> Path:
    """Write atomically: a crash leaves either the old file or none."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, step, train_config, state))
    os.replace(tmp, path)
    return path


def parse_checkpoint(blob: bytes, expected: VariantConfig | None = None) -> Checkpoint:
    if len(blob) < _PREFIX.size or blob[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    _, version, head_len = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + head_len
    if start > len(blob):
        raise PayloadLengthError("header extends past end of file")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc

    cfg = VariantConfig.from_dict(header["config"])
    if config_hash(cfg) != header["config_hash"]:
        raise ConfigHashError("stored config does not match its hash")
    if expected is not None and config_hash(expected) != header["config_hash"]:
        raise ConfigHashError("checkpoint was written for a different model config")

    sizes = [int(np.prod(t["dims"], dtype=np.int64)) for t in header["tensors"]]
    if len(blob) - start != 4 * sum(sizes):
        raise PayloadLengthError(f"payload has {len(blob) - start} bytes, manifest needs {4 * sum(sizes)}")
    arrays = {}
    offset = start
    for t, size in zip(header["tensors"], sizes):
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(t["dims"]).astype(np.float32)
        offset += 4 * size

    model = UTransformer(cfg)
    try:
        model.load_arrays(arrays)
    except KeyError as exc:
        raise PayloadLengthError(f"manifest lacks tensor {exc}") from exc
    state = None
    if header.get("adam_t") is not None:
        names = [n for n, _ in model.named_parameters()]
        state = AdamState([arrays[f"adam.m/{n}"] for n in names], [arrays[f"adam.v/{n}"] for n in names], int(header["adam_t"]))
    tc = header.get("train_config")
    return Checkpoint(model, int(header["step"]), TrainConfig.from_dict(tc) if tc else None, state)


def load_checkpoint(path: str | os.PathLike, expected: VariantConfig | None = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expected)
