"""U-shaped encoder-decoder in five variants built from one config."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attention import MHCA, MHSA, AttentionRecord
from .nn import Conv2d, ConvBlock, Module, initialize
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    expand_channels,
    maxpool2d,
    mul,
    relu,
    sigmoid,
    upsample_nearest,
)

VARIANTS = ("unet", "local-gate", "mhsa", "mhca", "u-transformer")


@dataclass
class VariantConfig:
    """Declarative model description.

    ``mhca_levels`` counts skip connections from the bottom: level 1 is the
    deepest (lowest resolution) skip, level ``depth`` the full-resolution one.
    ``None`` means "all levels" for the cross-attention variants and "none"
    otherwise.
    """

    variant: str = "u-transformer"
    depth: int = 3
    base_channels: int = 16
    heads: int = 4
    pe: bool = True
    mhca_levels: tuple[int, ...] | None = None
    pool_cap: int = 16
    n_classes: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.mhca_levels is None:
            levels = range(1, self.depth + 1) if self.variant in ("mhca", "u-transformer") else ()
            self.mhca_levels = tuple(levels)
        self.mhca_levels = tuple(sorted(set(int(v) for v in self.mhca_levels)))
        self.validate()

    def validate(self) -> None:
        if self.depth < 1 or self.base_channels < 1 or self.n_classes < 2:
            raise ValueError("depth, base_channels must be >= 1 and n_classes >= 2")
        if self.heads < 0:
            raise ValueError("heads must be >= 0")
        if self.mhca_levels and self.variant not in ("mhca", "u-transformer"):
            raise ValueError(f"mhca_levels given for variant {self.variant!r}, which has no cross-attention")
        bad = [v for v in self.mhca_levels if not 1 <= v <= self.depth]
        if bad:
            raise ValueError(f"mhca levels {bad} outside 1..{self.depth}")
        if self.pe and (self.base_channels * 2**self.depth) % 4:
            raise ValueError("positional encoding needs base_channels * 2**depth divisible by 4")
        if self.pool_cap < 1:
            raise ValueError("pool_cap must be >= 1")
        if self.heads:
            for c in self.attention_widths():
                if c % self.heads:
                    raise ValueError(f"{c} channels cannot be split over {self.heads} heads")

    def channels(self, level: int) -> int:
        """Encoder width at resolution level ``level`` (0 = input resolution)."""
        return self.base_channels * 2**level

    @property
    def uses_mhsa(self) -> bool:
        return self.heads > 0 and self.variant in ("mhsa", "u-transformer")

    @property
    def active_mhca_levels(self) -> tuple[int, ...]:
        return self.mhca_levels if self.heads > 0 else ()

    def attention_widths(self) -> list[int]:
        widths = [self.channels(self.depth)] if self.variant in ("mhsa", "u-transformer") else []
        widths += [self.channels(self.depth - lvl) for lvl in self.mhca_levels]
        return widths

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mhca_levels"] = list(self.mhca_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        d = dict(d)
        d["mhca_levels"] = tuple(d.get("mhca_levels") or ())
        return cls(**d)


class LocalGate(Module):
    """Additive attention gate computed from local information only."""

    def __init__(self, skip_channels: int, deep_channels: int):
        super().__init__()
        self.skip_proj = Conv2d(skip_channels, skip_channels, k=1)
        self.deep_proj = Conv2d(deep_channels, skip_channels, k=1)
        self.psi = Conv2d(skip_channels, 1, k=1)

    def forward(self, s: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        return local_attention_gate(s, y, self)


def local_attention_gate(s: Tensor, y: Tensor, gate: LocalGate) -> tuple[Tensor, Tensor]:
    """Return ``(concat(alpha * s, up(y)), alpha)`` with ``alpha`` of shape (N,1,H,W)."""
    if s.shape[2] != 2 * y.shape[2] or s.shape[3] != 2 * y.shape[3]:
        raise ShapeError(f"skip {s.shape} must be exactly twice the resolution of {y.shape}")
    y_up = upsample_nearest(y, 2)
    hidden = relu(add(gate.skip_proj(s), gate.deep_proj(y_up)))
    alpha = sigmoid(gate.psi(hidden))
    gated = mul(expand_channels(alpha, s.shape[1]), s)
    return concat([gated, y_up], axis=1), alpha


class Decoder(Module):
    def __init__(self, cfg: VariantConfig, level: int):
        super().__init__()
        cs = cfg.channels(cfg.depth - level)
        cy = cfg.channels(cfg.depth - level + 1)
        self.level = level
        self.mode = "concat"
        if cfg.variant == "local-gate":
            self.mode = "gate"
            self.gate = LocalGate(cs, cy)
        elif level in cfg.active_mhca_levels:
            self.mode = "mhca"
            self.mhca = MHCA(cs, cy, cfg.heads, pe=cfg.pe, pool_cap=cfg.pool_cap)
        self.block = ConvBlock(cs + cy, cs)

    def forward(self, s: Tensor, y: Tensor, records: list | None) -> Tensor:
        if self.mode == "concat":
            merged = concat([s, upsample_nearest(y, 2)], axis=1)
        elif self.mode == "gate":
            merged, alpha = self.gate(s, y)
            if records is not None:
                records.append(
                    AttentionRecord(self.level, 0, "gate", alpha.data[:, 0].copy(), tuple(s.shape[2:]))
                )
        else:
            merged, maps, z = self.mhca(s, y)
            if records is not None:
                pooled = _grid_from_tokens(maps[0].shape[1], s.shape[2], s.shape[3])
                for head, a in enumerate(maps):
                    records.append(AttentionRecord(self.level, head, "mhca", a.copy(), pooled, pooled))
                records.append(
                    AttentionRecord(self.level, 0, "gate", z.data.mean(axis=1), tuple(s.shape[2:]))
                )
        return self.block(merged)


def _grid_from_tokens(n_tokens: int, h: int, w: int) -> tuple[int, int]:
    f = int(round((h * w / n_tokens) ** 0.5))
    return h // f, w // f


class UTransformer(Module):
    """Encoder stages, bottleneck (+ optional MHSA), decoder stages, 1x1 head."""

    def __init__(self, cfg: VariantConfig):
        super().__init__()
        self.config = cfg
        prev = cfg.in_channels
        for i in range(cfg.depth):
            setattr(self, f"enc{i + 1}", ConvBlock(prev, cfg.channels(i)))
            prev = cfg.channels(i)
        self.bottleneck = ConvBlock(prev, cfg.channels(cfg.depth))
        if cfg.uses_mhsa:
            self.mhsa = MHSA(cfg.channels(cfg.depth), cfg.heads, pe=cfg.pe)
        for level in range(1, cfg.depth + 1):
            setattr(self, f"dec{level}", Decoder(cfg, level))
        self.head = Conv2d(cfg.base_channels, cfg.n_classes, k=1)

    def check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input (N,{cfg.in_channels},H,W), got {x.shape}")
        div = 2**cfg.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"spatial extents {x.shape[2:]} must be divisible by {div}")

    def forward(self, x: Tensor, capture_attention: bool = False):
        """Logits ``(N, n_classes, H, W)``; with capture, also the attention records."""
        self.check_input(x)
        cfg = self.config
        records: list[AttentionRecord] | None = [] if capture_attention else None
        skips = []
        h = x
        for i in range(cfg.depth):
            h = getattr(self, f"enc{i + 1}")(h)
            skips.append(h)
            h = maxpool2d(h, 2)
        h = self.bottleneck(h)
        if cfg.uses_mhsa:
            h, maps = self.mhsa(h)
            if records is not None:
                grid = tuple(h.shape[2:])
                for head, a in enumerate(maps):
                    records.append(AttentionRecord(0, head, "mhsa", a.copy(), grid, grid))
        for level in range(1, cfg.depth + 1):
            h = getattr(self, f"dec{level}")(skips[cfg.depth - level], h, records)
        logits = self.head(h)
        if capture_attention:
            return logits, records
        return logits

    def registry(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, p.shape) for name, p in self.named_parameters()]


def build_model(config: VariantConfig, seed: int = 0) -> UTransformer:
    """Construct and deterministically initialize a model for ``config``."""
    model = UTransformer(config)
    initialize(model, seed)
    return model


def parameter_count(model: Module) -> int:
    return int(sum(np.prod(p.shape) for p in model.parameters()))

