"""Multi-head self- and cross-attention blocks for 2-D feature maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Module
from .tensor import (
    ShapeError,
    Tensor,
    add,
    avgpool2d,
    concat,
    conv2d,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax,
    transpose,
    upsample_bilinear,
)


@dataclass
class AttentionRecord:
    """One captured attention map.

    For ``mhsa``/``mhca`` kinds ``matrix`` has shape ``(N, n_q, n_k)`` with
    row-stochastic rows; for ``gate`` it is the channel-averaged filter
    ``(N, H, W)`` with entries in (0, 1).
    """

    level: int
    head: int
    kind: str
    matrix: np.ndarray
    query_grid: tuple[int, int]
    key_grid: tuple[int, int] = field(default=(0, 0))


def positional_encoding_2d(h: int, w: int, c: int, dtype=np.float32) -> Tensor:
    """Fixed sinusoidal encoding of shape ``(1, c, h, w)``.

    Channels come in four equal blocks: sin(row), cos(row), sin(col),
    cos(col), each over the frequencies ``10000 ** (-k / (c // 4))``.
    """
    if c % 4:
        raise ShapeError(f"positional encoding needs channels divisible by 4, got {c}")
    q = c // 4
    freqs = 10000.0 ** (-np.arange(q) / q)
    rows = np.arange(h)[:, None] * freqs  # (h, q)
    cols = np.arange(w)[:, None] * freqs  # (w, q)
    pe = np.empty((c, h, w), dtype=np.float64)
    pe[0:q] = np.sin(rows).T[:, :, None]
    pe[q : 2 * q] = np.cos(rows).T[:, :, None]
    pe[2 * q : 3 * q] = np.sin(cols).T[:, None, :]
    pe[3 * q :] = np.cos(cols).T[:, None, :]
    return Tensor(pe[None].astype(dtype))


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(softmax(q k^T / sqrt(d_k)) v, A)`` over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d_k = q.shape[-1]
    axes = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    logits = mul(matmul(q, transpose(k, axes)), 1.0 / math.sqrt(d_k))
    a = softmax(logits, axis=-1)
    return matmul(a, v), a


class MultiHeadProjection(Module):
    """Query/key/value embeddings for ``heads`` heads plus the output embedding.

    Per-head matrices are stored side by side: head ``i`` owns columns
    ``i*d_k:(i+1)*d_k`` of ``w_q``, ``w_k`` and ``w_v``.
    """

    def __init__(self, channels: int, heads: int, query_channels: int | None = None, out_channels: int | None = None):
        super().__init__()
        if heads < 1:
            raise ValueError("heads must be >= 1")
        if channels % heads:
            raise ValueError(f"{channels} channels cannot be split over {heads} heads")
        self.heads = heads
        self.d_k = channels // heads
        width = heads * self.d_k
        self.w_q = self.param("w_q", (query_channels or channels, width), "xavier")
        self.w_k = self.param("w_k", (channels, width), "xavier")
        self.w_v = self.param("w_v", (channels, width), "xavier")
        self.w_o = self.param("w_o", (width, out_channels or channels), "xavier")


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return transpose(reshape(x, (n, c, h * w)), (0, 2, 1))


def _untokens(t: Tensor, h: int, w: int) -> Tensor:
    n, _, c = t.shape
    return reshape(transpose(t, (0, 2, 1)), (n, c, h, w))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, tokens, width = t.shape
    return transpose(reshape(t, (n, tokens, heads, width // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    n, heads, tokens, d = t.shape
    return reshape(transpose(t, (0, 2, 1, 3)), (n, tokens, heads * d))


def _multi_head(q_tokens: Tensor, kv_tokens: Tensor, proj: MultiHeadProjection) -> tuple[Tensor, list[np.ndarray]]:
    q = _split_heads(matmul(q_tokens, proj.w_q), proj.heads)
    k = _split_heads(matmul(kv_tokens, proj.w_k), proj.heads)
    v = _split_heads(matmul(kv_tokens, proj.w_v), proj.heads)
    out, a = scaled_dot_product_attention(q, k, v)
    maps = [a.data[:, i] for i in range(proj.heads)]
    return matmul(_merge_heads(out), proj.w_o), maps


def mhsa_forward(x: Tensor, proj: MultiHeadProjection, pe: bool = True) -> tuple[Tensor, list[np.ndarray]]:
    """Self-attention over all ``H*W`` positions, added residually to ``x``."""
    n, c, h, w = x.shape
    if proj.w_q.shape[0] != c:
        raise ShapeError(f"projection expects {proj.w_q.shape[0]} channels, input has {c}")
    src = add(x, _broadcast_batch(positional_encoding_2d(h, w, c, x.dtype), n)) if pe else x
    tokens = _tokens(src)
    mixed, maps = _multi_head(tokens, tokens, proj)
    return add(x, _untokens(mixed, h, w)), maps


def pool_factor(h: int, w: int, pool_cap: int) -> int:
    """Smallest power of two bringing ``max(h, w)`` down to ``pool_cap`` or less."""
    if pool_cap < 1:
        raise ValueError(f"pool_cap must be >= 1, got {pool_cap}")
    f = 1
    while max(h, w) > pool_cap * f:
        f *= 2
    if h % f or w % f:
        raise ShapeError(f"cannot pool {h}x{w} by {f}")
    return f


def mhca_forward(
    s: Tensor,
    y: Tensor,
    proj: MultiHeadProjection,
    embed_w: Tensor,
    embed_b: Tensor,
    pe: bool = True,
    pool_cap: int = 16,
    z_override: Tensor | None = None,
) -> tuple[Tensor, list[np.ndarray], Tensor]:
    """Gate the skip map ``s`` with attention driven by the deeper map ``y``.

    Queries come from the (upsampled) deep map, keys and values from the skip
    map. Attention runs on average-pooled grids of at most ``pool_cap`` per
    side; the resulting sigmoid filter ``Z`` is resized back to ``s``.

    Returns ``(concat(Z * s, up(y)), per-head attention maps, Z)``.
    """
    n, cs, hs, ws = s.shape
    ny, cy, hy, wy = y.shape
    if ny != n or hs != 2 * hy or ws != 2 * wy:
        raise ShapeError(f"skip {s.shape} must be exactly twice the resolution of {y.shape}")
    f = pool_factor(hs, ws, pool_cap)
    y_up = upsample_bilinear(y, hs, ws)
    s_in, y_in = s, y_up
    if pe:
        s_in = add(s, _broadcast_batch(positional_encoding_2d(hs, ws, cs, s.dtype), n))
        y_in = add(y_up, _broadcast_batch(positional_encoding_2d(hs, ws, cy, s.dtype), n))
    sp = avgpool2d(s_in, f)
    yp = avgpool2d(y_in, f)
    hp, wp = sp.shape[2:]
    mixed, maps = _multi_head(_tokens(yp), _tokens(sp), proj)
    z_small = sigmoid(conv2d(_untokens(mixed, hp, wp), embed_w, embed_b))
    z = upsample_bilinear(z_small, hs, ws)
    if z_override is not None:
        z = z_override
    return concat([mul(z, s), y_up], axis=1), maps, z


def _broadcast_batch(pe: Tensor, n: int) -> Tensor:
    if n == 1:
        return pe
    return Tensor(np.repeat(pe.data, n, axis=0))


class MHSA(Module):
    def __init__(self, channels: int, heads: int, pe: bool = True):
        super().__init__()
        if pe and channels % 4:
            raise ShapeError(f"positional encoding needs channels divisible by 4, got {channels}")
        self.pe = pe
        self.proj = MultiHeadProjection(channels, heads)

    def forward(self, x: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        return mhsa_forward(x, self.proj, self.pe)


class MHCA(Module):
    def __init__(self, skip_channels: int, deep_channels: int, heads: int, pe: bool = True, pool_cap: int = 16):
        super().__init__()
        if pool_cap < 1:
            raise ValueError(f"pool_cap must be >= 1, got {pool_cap}")
        if pe and (skip_channels % 4 or deep_channels % 4):
            raise ShapeError("positional encoding needs channel counts divisible by 4")
        self.pe = pe
        self.pool_cap = pool_cap
        self.proj = MultiHeadProjection(skip_channels, heads, query_channels=deep_channels)
        self.embed_w = self.param("embed_w", (skip_channels, skip_channels, 1, 1), "xavier")
        self.embed_b = self.param("embed_b", (skip_channels,), "zeros")

    def forward(self, s: Tensor, y: Tensor, z_override: Tensor | None = None):
        return mhca_forward(s, y, self.proj, self.embed_w, self.embed_b, self.pe, self.pool_cap, z_override)
