import numpy as np
import pytest

from utransformer import gradcheck
from utransformer.gradcheck import REGISTRY, available_ops, check_all, grad_check
from utransformer.tensor import Tensor, _make

CASES = [(name, i) for name in REGISTRY for i in range(len(REGISTRY[name][1]))]


def _scaled_relu(scale):
    def build(shapes, rng):
        x = Tensor(rng.normal(size=shapes[0]), requires_grad=True)

        def fn():
            mask = x.data > 0
            return _make(x.data * mask, (x,), lambda g: (scale * g * mask,))

        return [x], fn

    return build


class TestGradCheck:
    @pytest.mark.parametrize("name,index", CASES, ids=[f"{n}-{i}" for n, i in CASES])
    def test_op(self, name, index):
        report = grad_check(name, REGISTRY[name][1][index], seed=index)
        assert report.passed, f"{name}{report.shapes}: max relative error {report.max_rel_error:.3g}"
        assert report.n_checked > 0

    def test_registry_covers_attention_and_losses(self):
        ops = set(available_ops())
        assert {"conv2d", "matmul", "softmax", "mhsa", "mhca", "cross_entropy", "dice_loss"} <= ops

    def test_wrong_gradient_is_caught(self, monkeypatch):
        monkeypatch.setitem(gradcheck.REGISTRY, "broken", (_scaled_relu(1.01), [((3, 4),)]))
        report = grad_check("broken")
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-3)

    def test_correct_custom_op_passes(self, monkeypatch):
        monkeypatch.setitem(gradcheck.REGISTRY, "relu_copy", (_scaled_relu(1.0), [((3, 4),)]))
        assert grad_check("relu_copy").passed

    def test_unknown_op(self):
        with pytest.raises(KeyError):
            grad_check("not-an-op")

    def test_check_all_subset(self):
        reports = check_all(ops=["relu", "exp"])
        assert len(reports) == 6 and all(r.passed for r in reports)

    def test_float64(self):
        leaves, _ = REGISTRY["conv2d"][0](REGISTRY["conv2d"][1][0], np.random.default_rng(0))
        assert all(leaf.data.dtype == np.float64 for leaf in leaves)
