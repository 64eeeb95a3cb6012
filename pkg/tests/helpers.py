"""Shared oracles for the test modules."""

import numpy as np

from utransformer import tensor as T
from utransformer.tensor import Tensor


def central_support(model, size: int, seed: int = 1) -> tuple[float, int]:
    """Fraction of input pixels with a nonzero gradient of the central logits, plus the window extent.

    Runs in eval mode so batch statistics do not couple pixels.
    """
    model.eval()
    x = Tensor(np.random.default_rng(seed).uniform(0, 1, (1, 1, size, size)).astype(np.float32), requires_grad=True)
    out = model(x)
    sel = np.zeros(out.shape, dtype=np.float32)
    sel[0, :, size // 2, size // 2] = 1.0
    T.backward(T.tsum(T.mul(out, Tensor(sel))))
    support = x.grad[0, 0] != 0
    rows = np.nonzero(support.any(axis=1))[0]
    extent = int(rows.max() - rows.min() + 1) if rows.size else 0
    return float(support.mean()), extent


def brute_dice(pred, gt, c):
    p = {tuple(ix) for ix in np.argwhere(pred == c)}
    g = {tuple(ix) for ix in np.argwhere(gt == c)}
    if not p and not g:
        return 1.0
    return 2 * len(p & g) / (len(p) + len(g))


def brute_hausdorff(pred, gt, c):
    p = np.argwhere(pred == c).astype(float)
    g = np.argwhere(gt == c).astype(float)
    if len(p) == 0 or len(g) == 0:
        return None

    def directed(a, b):
        worst = 0.0
        for pt in a:
            best = np.inf
            for q in b:
                best = min(best, float(np.hypot(pt[0] - q[0], pt[1] - q[1])))
            worst = max(worst, best)
        return worst

    return max(directed(p, g), directed(g, p))
