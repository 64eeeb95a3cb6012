"""Dense rank-4 tensors with reverse-mode differentiation.

Every differentiable primitive records a node (its inputs plus a closure
that maps the output gradient to input gradients). ``backward`` builds a
:class:`Tape` by topologically sorting the recorded graph and replays it in
reverse. Compute runs in float32 by default; float64 is used for gradient
checking.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised by :meth:`Tensor.check_finite` when NaN or Inf is present."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.count_nonzero(~np.isfinite(self.data)))
            raise NonFiniteError(f"{bad} non-finite values in tensor of shape {self.shape}")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


class Tape:
    """Operations reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    Tape(loss).run(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def elementwise(x: Tensor, kind: str, other=None) -> Tensor:
    """Dispatch by name: ``relu``, ``sigmoid``, ``add`` or ``mul``."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "add":
        return add(x, other)
    if kind == "mul":
        return mul(x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# shape and reduction


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: non-concatenated extents differ, {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def expand_channels(x: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map ``(N,1,H,W)`` across ``channels``."""
    if x.shape[1] != 1:
        raise ShapeError(f"expand_channels needs one channel, got {x.shape}")
    data = np.repeat(x.data, channels, axis=1)
    return _make(data, (x,), lambda g: (g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` either carries the same batch
    axes or is a plain matrix shared across the batch.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    if b.data.ndim > a.data.ndim:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} against {b.shape}")
    ad, bd = a.data, b.data
    shared_b = bd.ndim == 2 and ad.ndim > 2

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared_b:
            k, m = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# spatial


def _correlate(src: np.ndarray, taps: np.ndarray, offsets: list[int], length: int):
    """``out[:, :, p] = sum_t taps[t] @ src[:, :, p + offsets[t]]`` for ``p < length``.

    ``src`` is ``(N, Cin, Lsrc)`` and ``taps`` is ``(T, Cout, Cin)``. The
    shifted copies are materialized on whichever side has fewer channels.
    Returns ``(out, cols)``; ``cols`` is the stacked input when it was built.
    """
    n, cin, _ = src.shape
    t, cout, _ = taps.shape
    if cin <= cout:
        cols = np.empty((n, t, cin, length), dtype=src.dtype)
        for k, off in enumerate(offsets):
            cols[:, k] = src[:, :, off : off + length]
        cols = cols.reshape(n, t * cin, length)
        w = taps.transpose(1, 0, 2).reshape(cout, t * cin)
        return w @ cols, cols
    stacked = taps.reshape(t * cout, cin) @ src
    out = stacked[:, 0:cout, offsets[0] : offsets[0] + length].copy()
    for k in range(1, t):
        off = offsets[k]
        out += stacked[:, k * cout : (k + 1) * cout, off : off + length]
    return out, None


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """2-D cross-correlation (no kernel flip), stride 1.

    The padded input is flattened row-major so every kernel tap becomes a
    constant offset into one long axis; the ``Wp - Wo`` wrap-around columns
    of each output row are computed and discarded.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    xd, wd = x.data, kernel.data
    pointwise = kh == 1 and kw == 1
    wp = w + 2 * pw
    length = ho * wp
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1)).reshape(kh * kw, cout, cin)
    if pointwise:
        src = xd.reshape(n, cin, h * w)
        out = taps[0] @ src
        cols = src
    else:
        src = np.pad(xd, ((0, 0), (0, 0), (ph, ph + 1), (pw, pw))).reshape(n, cin, -1)
        out, cols = _correlate(src, taps, offsets, length)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wp)
    if wp != wo:
        out = np.ascontiguousarray(out[..., :wo])

    def bw(g):
        if wp != wo:
            gf = np.zeros((n, cout, ho, wp), dtype=g.dtype)
            gf[..., :wo] = g
        else:
            gf = np.ascontiguousarray(g)
        gf = gf.reshape(n, cout, length)
        gw = gb = gx = None
        if bias is not None:
            gb = gf.sum(axis=(0, 2))
        if kernel.requires_grad:
            if cols is not None:
                gcat = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
                gw = gcat.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            else:
                gw = np.empty((kh, kw, cout, cin), dtype=xd.dtype)
                for k, off in enumerate(offsets):
                    gw[k // kw, k % kw] = np.matmul(gf, src[:, :, off : off + length].transpose(0, 2, 1)).sum(axis=0)
                gw = gw.transpose(2, 3, 0, 1)
            gw = np.ascontiguousarray(gw)
        if x.requires_grad:
            back = np.ascontiguousarray(taps.transpose(0, 2, 1))
            if pointwise:
                gx = (back[0] @ gf).reshape(xd.shape)
            else:
                # rows ph..ph+h of the padded input, as a correlation over gf
                shift = offsets[-1]
                gpad = np.zeros((n, cout, shift + length + wp * (kh + 1)), dtype=gf.dtype)
                gpad[:, :, shift : shift + length] = gf
                q0 = ph * wp
                gxf, _ = _correlate(gpad, back, [q0 + shift - off for off in offsets], h * wp)
                gx = gxf.reshape(n, cin, h, wp)[..., pw : pw + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first index in row-major order."""
    n, c, h, w = x.shape
    k = window
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial extents {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        hot = idx[..., None] == np.arange(k * k)
        gb = hot * g[..., None]
        gb = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w).astype(x.dtype, copy=False),)

    return _make(out, (x,), bw)


def avgpool2d(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    f = factor
    if f == 1:
        return x
    if h % f or w % f:
        raise ShapeError(f"avgpool2d: spatial extents {h}x{w} not divisible by {f}")
    out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    scale = 1.0 / (f * f)

    def bw(g):
        return (np.repeat(np.repeat(g * scale, f, axis=2), f, axis=3),)

    return _make(out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    f = factor
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row ``i`` holds the half-pixel (align-corners-false) weights of output ``i``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample_bilinear: output size must be positive, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ah = bilinear_matrix(h, out_h, x.dtype)
    aw = bilinear_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return _make(out, (x,), bw)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    n, c, h, w = x.shape
    xd = x.data
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        if n < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = n * h * w
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1).astype(xd.dtype)) * inv.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * g4
        if training:
            m = n * h * w
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
