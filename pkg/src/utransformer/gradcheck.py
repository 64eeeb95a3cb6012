"""Central finite-difference checks of analytic gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-4
TOLERANCE = 1e-4


@dataclass
class CheckReport:
    op: str
    shapes: tuple
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


# A case builder maps (shapes, rng) to the leaves to perturb and a closure
# recomputing the op output from their current values.
Builder = Callable[[tuple, np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


def _leaves(rng, *shapes) -> list[Tensor]:
    return [Tensor(rng.uniform(-1.0, 1.0, size=s), requires_grad=True) for s in shapes]


def _unary(fn):
    def build(shapes, rng):
        (x,) = _leaves(rng, shapes[0])
        return [x], lambda: fn(x)

    return build


def _binary(fn):
    def build(shapes, rng):
        a, b = _leaves(rng, shapes[0], shapes[1])
        return [a, b], lambda: fn(a, b)

    return build


def _conv(padding):
    def build(shapes, rng):
        x, k = _leaves(rng, shapes[0], shapes[1])
        (b,) = _leaves(rng, (shapes[1][0],))
        return [x, k, b], lambda: T.conv2d(x, k, b, padding)

    return build


def _maxpool(shapes, rng):
    # a permutation of a spread-out grid keeps every window tie-free
    n = int(np.prod(shapes[0]))
    values = (rng.permutation(n) / n * 2.0 - 1.0).reshape(shapes[0])
    x = Tensor(values, requires_grad=True)
    return [x], lambda: T.maxpool2d(x, 2)


def _batchnorm(training):
    def build(shapes, rng):
        x, gamma, beta = _leaves(rng, shapes[0], (shapes[0][1],), (shapes[0][1],))
        c = shapes[0][1]
        rm = rng.uniform(-0.5, 0.5, size=c)
        rv = rng.uniform(0.5, 1.5, size=c)

        def fn():
            # fresh copies: the train-mode running update must not leak between evaluations
            return T.batchnorm(x, gamma, beta, rm.copy(), rv.copy(), training)

        return [x, gamma, beta], fn

    return build


def _log(shapes, rng):
    (x,) = _leaves(rng, shapes[0])
    return [x], lambda: T.log(T.add(T.mul(x, x), 0.5))


def _mhsa_case(shapes, rng):
    from .attention import MHSA

    c = shapes[0][1]
    block = MHSA(c, heads=2, pe=True).astype(np.float64)
    for p in block.parameters():
        p.data = rng.uniform(-1.0, 1.0, size=p.shape)
    (x,) = _leaves(rng, shapes[0])
    return [x] + block.parameters(), lambda: block(x)[0]


def _mhca_case(shapes, rng):
    from .attention import MHCA

    s_shape, y_shape = shapes[0], shapes[1]
    block = MHCA(s_shape[1], y_shape[1], heads=2, pe=True, pool_cap=2).astype(np.float64)
    for p in block.parameters():
        p.data = rng.uniform(-1.0, 1.0, size=p.shape)
    s, y = _leaves(rng, s_shape, y_shape)
    return [s, y] + block.parameters(), lambda: block(s, y)[0]


def _sdpa_case(shapes, rng):
    from .attention import scaled_dot_product_attention

    q, k, v = _leaves(rng, *shapes)
    return [q, k, v], lambda: scaled_dot_product_attention(q, k, v)[0]


def _gate_case(shapes, rng):
    from .backbone import LocalGate

    gate = LocalGate(shapes[0][1], shapes[1][1]).astype(np.float64)
    for p in gate.parameters():
        p.data = rng.uniform(-1.0, 1.0, size=p.shape)
    s, y = _leaves(rng, shapes[0], shapes[1])
    return [s, y] + gate.parameters(), lambda: gate(s, y)[0]


def _loss_case(kind):
    def build(shapes, rng):
        from .training import cross_entropy_loss, dice_loss

        (logits,) = _leaves(rng, shapes[0])
        n, c, h, w = shapes[0]
        mask = rng.integers(0, c, size=(n, h, w))
        fn = cross_entropy_loss if kind == "ce" else dice_loss
        return [logits], lambda: fn(logits, mask)

    return build


REGISTRY: dict[str, tuple[Builder, list[tuple]]] = {
    "matmul": (_binary(T.matmul), [((3, 4), (4, 5)), ((1, 7), (7, 2)), ((2, 3, 4), (2, 4, 3))]),
    "conv2d": (_conv("same"), [((2, 3, 8, 8), (4, 3, 3, 3)), ((1, 2, 5, 7), (3, 2, 3, 3)), ((2, 4, 6, 6), (2, 4, 1, 1))]),
    "conv2d_valid": (_conv("valid"), [((1, 2, 6, 6), (3, 2, 3, 3)), ((2, 1, 5, 5), (2, 1, 5, 5)), ((1, 3, 7, 5), (2, 3, 3, 3))]),
    "maxpool2d": (_maxpool, [((1, 2, 4, 4),), ((2, 3, 6, 8),), ((1, 1, 2, 2),)]),
    "avgpool2d": (_unary(lambda x: T.avgpool2d(x, 2)), [((1, 2, 4, 4),), ((2, 1, 6, 8),), ((1, 3, 2, 2),)]),
    "upsample_nearest": (_unary(lambda x: T.upsample_nearest(x, 2)), [((1, 2, 3, 3),), ((2, 1, 2, 4),), ((1, 1, 1, 1),)]),
    "upsample_bilinear": (
        _unary(lambda x: T.upsample_bilinear(x, 2 * x.shape[2] + 1, 3 * x.shape[3])),
        [((1, 2, 3, 3),), ((2, 1, 4, 2),), ((1, 1, 1, 5),)],
    ),
    "softmax": (_unary(lambda x: T.softmax(x, -1)), [((1, 16),), ((3, 5),), ((2, 3, 4),)]),
    "log_softmax": (_unary(lambda x: T.log_softmax(x, 1)), [((1, 16),), ((2, 4, 3, 3),), ((3, 5),)]),
    "relu": (_unary(T.relu), [((2, 3, 4, 4),), ((5, 5),), ((17,),)]),
    "sigmoid": (_unary(T.sigmoid), [((2, 3, 4, 4),), ((5, 5),), ((17,),)]),
    "exp": (_unary(T.exp), [((2, 3),), ((4, 4),), ((1, 2, 2, 2),)]),
    "log": (_log, [((2, 3),), ((4, 4),), ((1, 2, 2, 2),)]),
    "add": (_binary(T.add), [((2, 3), (2, 3)), ((1, 2, 3, 3), (1, 2, 3, 3)), ((5,), (5,))]),
    "mul": (_binary(T.mul), [((2, 3), (2, 3)), ((1, 2, 3, 3), (1, 2, 3, 3)), ((5,), (5,))]),
    "div": (
        _binary(lambda a, b: T.div(a, T.add(T.mul(b, b), 0.5))),
        [((2, 3), (2, 3)), ((1, 2, 3, 3), (1, 2, 3, 3)), ((5,), (5,))],
    ),
    "concat": (
        _binary(lambda a, b: T.concat([a, b], axis=1)),
        [((1, 2, 3, 3), (1, 3, 3, 3)), ((2, 1, 2, 2), (2, 4, 2, 2)), ((2, 3, 1, 1), (2, 1, 1, 1))],
    ),
    "expand_channels": (_unary(lambda x: T.expand_channels(x, 3)), [((1, 1, 3, 3),), ((2, 1, 2, 4),), ((1, 1, 1, 1),)]),
    "transpose": (_unary(lambda x: T.transpose(x, (0, 2, 1))), [((2, 3, 4),), ((1, 5, 2),), ((3, 1, 1),)]),
    "sum": (_unary(lambda x: T.tsum(x, axis=1)), [((2, 3, 4),), ((1, 5),), ((3, 2, 2, 2),)]),
    "batchnorm": (_batchnorm(True), [((4, 3, 3, 3),), ((2, 2, 4, 4),), ((3, 1, 2, 5),)]),
    "batchnorm_eval": (_batchnorm(False), [((4, 3, 3, 3),), ((1, 2, 4, 4),), ((3, 1, 2, 5),)]),
    "attention": (_sdpa_case, [((5, 4), (6, 4), (6, 3)), ((2, 3, 2), (2, 4, 2), (2, 4, 5)), ((1, 8), (1, 8), (1, 2))]),
    "mhsa": (_mhsa_case, [((1, 8, 4, 4),), ((2, 4, 2, 2),), ((1, 8, 2, 4),)]),
    "mhca": (_mhca_case, [((1, 8, 4, 4), (1, 16, 2, 2)), ((2, 4, 4, 4), (2, 8, 2, 2)), ((1, 8, 8, 4), (1, 8, 4, 2))]),
    "local_gate": (_gate_case, [((1, 4, 4, 4), (1, 8, 2, 2)), ((2, 2, 2, 2), (2, 3, 1, 1)), ((1, 3, 4, 2), (1, 2, 2, 1))]),
    "cross_entropy": (_loss_case("ce"), [((2, 4, 3, 3),), ((1, 2, 4, 4),), ((3, 3, 2, 2),)]),
    "dice_loss": (_loss_case("dice"), [((2, 4, 3, 3),), ((1, 2, 4, 4),), ((3, 3, 2, 2),)]),
}


def available_ops() -> list[str]:
    return list(REGISTRY)


def grad_check(op_name: str, input_shapes: tuple | None = None, tolerance: float = TOLERANCE, seed: int = 0) -> CheckReport:
    """Compare analytic and central-difference gradients of ``sum(out * R)``.

    ``R`` is a fixed random projection, so every output element contributes.
    Relative error per element is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if op_name not in REGISTRY:
        raise KeyError(f"unknown op {op_name!r}; available: {', '.join(REGISTRY)}")
    build, default_shapes = REGISTRY[op_name]
    shapes = tuple(input_shapes) if input_shapes is not None else default_shapes[0]
    rng = np.random.default_rng(seed)
    leaves, fn = build(shapes, rng)
    out = fn()
    proj = rng.uniform(-1.0, 1.0, size=out.shape)

    def objective() -> float:
        with T.no_grad():
            return float(np.sum(fn().data * proj))

    for leaf in leaves:
        leaf.grad = None
    T.backward(T.tsum(T.mul(out, Tensor(proj))))

    worst = 0.0
    count = 0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            f_plus = objective()
            flat[i] = orig - STEP
            f_minus = objective()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * STEP)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            count += 1
    return CheckReport(op_name, shapes, worst, count, tolerance)


def check_all(tolerance: float = TOLERANCE, ops: list[str] | None = None) -> list[CheckReport]:
    """Run every registered op over each of its seeded shape sets."""
    reports = []
    for name in ops or available_ops():
        for i, shapes in enumerate(REGISTRY[name][1]):
            reports.append(grad_check(name, shapes, tolerance, seed=i))
    return reports
