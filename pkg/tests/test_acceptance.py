"""Acceptance criteria C1..C9 at their stated tolerances.

Each test records a ``criterion`` and a ``detail`` property; ``conftest.py``
prints one PASS/FAIL line per criterion after the run. C6..C8 train real
models and take several minutes to about thirty minutes on one CPU core.
"""

import csv
import time

import numpy as np
import pytest
from click.testing import CliRunner
from scipy import stats

from utransformer import tensor as T
from utransformer.attention import MHCA, MHSA, scaled_dot_product_attention
from utransformer.backbone import VARIANTS, LocalGate, VariantConfig, build_model
from utransformer.cli import cli
from utransformer.data import SyntheticConfig, generate_synthetic, read_pgm, stack, write_pgm
from utransformer.experiments import expand_grid, run_grid
from utransformer.metrics import dice, hausdorff, paired_t_test
from utransformer.nn import initialize
from utransformer.tensor import Tensor
from utransformer.training import (
    AdamState,
    TrainConfig,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_on_arrays,
    train_step,
)

from .helpers import brute_dice, brute_hausdorff, central_support

pytestmark = pytest.mark.slow


@pytest.fixture
def report(record_property):
    def set_(criterion, detail=""):
        record_property("criterion", criterion)
        record_property("detail", detail)

    return set_


def test_c1_gradient_suite(report):
    report("C1 gradient suite")
    start = time.perf_counter()
    res = CliRunner().invoke(cli, ["gradcheck", "--op", "all", "--tolerance", "1e-4"])
    elapsed = time.perf_counter() - start
    checks = [ln for ln in res.output.splitlines() if ln.rstrip().endswith(("ok", "FAIL"))]
    worst = max(float(ln.split()[-2]) for ln in checks)
    report("C1 gradient suite", f"{len(checks)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert res.exit_code == 0, res.output
    assert worst < 1e-4
    assert elapsed < 120


def test_c2_attention_invariants(report):
    report("C2 attention invariants")
    start = time.perf_counter()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        heads = int(rng.choice([1, 2, 4]))
        c = 4 * heads * int(rng.integers(1, 3))
        hw = int(rng.choice([2, 4]))

        # row sums and shift invariance of the raw attention
        n_q, n_k, d = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 6))
        q, k, v = rng.normal(size=(n_q, d)), rng.normal(size=(n_k, d)), rng.normal(size=(n_k, 3))
        _, a = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-6)
        # adding one vector to every key shifts each logit row by a constant
        _, shifted = scaled_dot_product_attention(Tensor(q), Tensor(k + rng.normal(size=d)), Tensor(v))
        np.testing.assert_allclose(shifted.data, a.data, atol=1e-6)
        logits = rng.normal(scale=5, size=(3, 7))
        np.testing.assert_allclose(T.softmax(Tensor(logits + rng.normal(scale=10)), -1).data,
                                   T.softmax(Tensor(logits), -1).data, atol=1e-6)

        # single key: output equals the value
        out, a1 = scaled_dot_product_attention(Tensor(q), Tensor(k[:1]), Tensor(v[:1]))
        assert np.all(a1.data == 1.0)
        np.testing.assert_allclose(out.data, np.repeat(v[:1], n_q, axis=0), atol=1e-12)

        # MHSA and MHCA maps are row-stochastic; gates lie strictly inside (0, 1)
        mhsa = MHSA(c, heads).astype(np.float64)
        initialize(mhsa, seed)
        _, maps = mhsa(Tensor(rng.normal(size=(2, c, hw, hw))))
        for m in maps:
            np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-6)
        mhca = MHCA(c, 2 * c, heads).astype(np.float64)
        initialize(mhca, seed)
        s = Tensor(rng.normal(size=(2, c, 2 * hw, 2 * hw)))
        y = Tensor(rng.normal(size=(2, 2 * c, hw, hw)))
        _, maps, z = mhca(s, y)
        for m in maps:
            np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-6)
        assert z.data.min() > 0 and z.data.max() < 1
        gate = LocalGate(c, 2 * c).astype(np.float64)
        initialize(gate, seed)
        _, alpha = gate(s, y)
        assert alpha.data.min() > 0 and alpha.data.max() < 1

        # Z = 1 gives the plain concatenation
        forced, _, _ = mhca(s, y, z_override=Tensor(np.ones(s.shape)))
        y_up = T.upsample_bilinear(y, 2 * hw, 2 * hw).data
        assert np.array_equal(forced.data, np.concatenate([s.data, y_up], axis=1))
    elapsed = time.perf_counter() - start
    report("C2 attention invariants", f"100 instances, {elapsed:.1f}s")
    assert elapsed < 60


def test_c3_receptive_field_contrast(report):
    report("C3 receptive-field contrast")
    start = time.perf_counter()
    unet, unet_extent = central_support(build_model(VariantConfig(variant="unet", depth=3), 0), 64)
    ut, _ = central_support(build_model(VariantConfig(variant="u-transformer", depth=3), 0), 64)
    elapsed = time.perf_counter() - start
    report(
        "C3 receptive-field contrast",
        f"unet support {unet:.1%} (window {unet_extent}px), u-transformer {ut:.1%}, {elapsed:.1f}s",
    )
    assert ut >= 0.95
    # the depth-3 backbone's theoretical receptive field is 96px, wider than the 64px input
    assert unet < 0.5
    assert elapsed < 60


def test_c4_variant_degeneracy(report):
    report("C4 variant degeneracy")
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 64, 64)).astype(np.float32))
    for seed in range(3):
        unet = build_model(VariantConfig(variant="unet"), seed)
        degenerate = build_model(VariantConfig(variant="u-transformer", heads=0, mhca_levels=()), seed)
        assert unet.registry() == degenerate.registry()
        assert np.array_equal(unet(x).data, degenerate(x).data)
        unet.eval()
        degenerate.eval()
        assert np.array_equal(unet(x).data, degenerate(x).data)
    report("C4 variant degeneracy", "registry and train/eval logits identical for 3 seeds")


def test_c5_metric_oracles(report):
    report("C5 metric oracles")
    worst_hd = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 4, (32, 32))
        pred = np.where(rng.uniform(size=(32, 32)) < 0.8, gt, rng.integers(0, 4, (32, 32)))
        sparse_p = (rng.uniform(size=(32, 32)) < 0.03).astype(int)
        sparse_g = (rng.uniform(size=(32, 32)) < 0.03).astype(int)
        for c in range(4):
            assert dice(pred, gt, c) == brute_dice(pred, gt, c)
        expected = brute_hausdorff(sparse_p, sparse_g, 1)
        got = hausdorff(sparse_p, sparse_g, 1)
        if expected is None:
            assert got is None
        else:
            worst_hd = max(worst_hd, abs(got - expected))
    assert worst_hd <= 1e-9

    cases = [
        ([0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0], [1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4], 0.002833),
        ([2.0, 0, 1, 3, -1], [0.0] * 5, 0.2302),
    ]
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(3, 30))
        a = rng.normal(size=n)
        b = a + rng.normal(0.3, 1.0, size=n)
        cases.append((a, b, stats.ttest_rel(a, b).pvalue))
    worst_p = max(abs(paired_t_test(a, b).p - p) for a, b, p in cases)
    report("C5 metric oracles", f"max |hd err| {worst_hd:.1e}, max |p err| {worst_p:.1e} over {len(cases)} cases")
    assert worst_p < 1e-3


def _pixel_accuracy(model, images, masks):
    return float(np.mean(predict(model, images) == masks))


def test_c6_optimization_sanity(report):
    report("C6 optimization sanity")
    start = time.perf_counter()
    images, masks = stack(generate_synthetic(SyntheticConfig(n_images=4), 11))
    accuracies, drops = {}, {}
    for variant in VARIANTS:
        cfg = VariantConfig(variant=variant)
        per_seed = []
        for seed in range(3):
            model = build_model(cfg, seed)
            model.train()
            state = AdamState.zeros_like(model.parameters())
            steps = 200 if seed == 0 else 51
            tc = TrainConfig(lr0=1e-3, batch_size=4, model=cfg)
            losses = [train_step(model, state, images, masks, tc.lr(i), "ce") for i in range(steps)]
            per_seed.append(1.0 - losses[50] / losses[0])
            if seed == 0:
                accuracies[variant] = _pixel_accuracy(model, images, masks)
        drops[variant] = float(np.median(per_seed))
    elapsed = time.perf_counter() - start
    report(
        "C6 optimization sanity",
        "acc " + " ".join(f"{v}={a:.2%}" for v, a in accuracies.items())
        + "; median 50-step drop " + " ".join(f"{v}={d:.0%}" for v, d in drops.items())
        + f"; {elapsed:.0f}s",
    )
    assert all(a > 0.95 for a in accuracies.values())
    assert all(d >= 0.5 for d in drops.values())
    assert elapsed < 300


def test_c7_context_benchmark(report):
    report("C7 context benchmark")
    start = time.perf_counter()
    samples = generate_synthetic(SyntheticConfig(n_images=600), 7)
    # six folds of 600 give the 500 / 100 split
    base = TrainConfig(lr0=1e-3, epochs=15, batch_size=8, folds=6, fold=0, split_seed=0,
                       evaluate_each_epoch=False, model=VariantConfig(heads=4, pe=True))
    rows = run_grid(samples, base, expand_grid({"variant": ["unet", "u-transformer"]}, [0, 1, 2]))
    target = {v: [r["dice_per_class"][3] for r in rows if r["variant"] == v] for v in ("unet", "u-transformer")}
    med = {v: float(np.median(d)) for v, d in target.items()}
    elapsed = time.perf_counter() - start
    report(
        "C7 context benchmark",
        f"target Dice median unet {med['unet']:.4f} {np.round(target['unet'], 4).tolist()}, "
        f"u-transformer {med['u-transformer']:.4f} {np.round(target['u-transformer'], 4).tolist()}, "
        f"gap {100 * (med['u-transformer'] - med['unet']):+.1f} pts, {elapsed / 60:.1f} min",
    )
    assert med["u-transformer"] > med["unet"]


def test_c8_ablation_harness(report, tmp_path):
    report("C8 ablation harness")
    runner = CliRunner()
    data = tmp_path / "data"
    assert runner.invoke(cli, ["gen", "--out", str(data), "--count", "240", "--seed", "5"]).exit_code == 0
    res = runner.invoke(cli, [
        "ablate", "--data", str(data), "--grid", "heads=0,1,2,4,8", "--grid", "pe=on,off", "--seeds", "0",
        "--include-unet", "--epochs", "3", "--batch", "8", "--lr", "1e-3", "--folds", "6", "--out", str(tmp_path / "grid"),
    ])
    assert res.exit_code == 0, res.output
    with open(tmp_path / "grid" / "grid.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        rows = list(reader)
    assert header[:4] == ["variant", "heads", "pe", "seed"]
    assert {"dice_c0", "dice_c1", "dice_c2", "dice_c3", "dice_mean", "final_loss", "steps"} <= set(header)
    assert len(rows) == 11
    for r in rows:
        assert all(0.0 <= float(r[f"dice_c{c}"]) <= 1.0 for c in range(4))
    unet = [r for r in rows if r["variant"] == "unet"]
    zero = [r for r in rows if r["variant"] != "unet" and r["heads"] == "0"]
    assert len(unet) == 1 and len(zero) == 2
    dice_cols = [f"dice_c{c}" for c in range(4)] + ["final_loss"]
    for r in zero:
        assert [r[k] for k in dice_cols] == [unet[0][k] for k in dice_cols]

    # soft check: at this budget the target class is rarely segmented yet, so foreground mean Dice is compared
    attn = [r for r in rows if r["variant"] != "unet" and r["heads"] != "0"]

    def median(key, pe):
        return float(np.median([float(r[key]) for r in attn if r["pe"] == pe]))

    pe_on, pe_off = median("dice_mean", "on"), median("dice_mean", "off")
    verdict = "holds" if pe_on >= pe_off else "does not hold"
    report(
        "C8 ablation harness",
        f"11 rows well-formed, heads=0 == unet; soft check median foreground Dice PE on {pe_on:.4f} vs off {pe_off:.4f} "
        f"({verdict}, not gated; target class {median('dice_c3', 'on'):.4f} vs {median('dice_c3', 'off'):.4f})",
    )


def test_c9_persistence(report, tmp_path):
    report("C9 persistence")
    images, masks = stack(generate_synthetic(SyntheticConfig(n_images=4), 2))
    cfg = TrainConfig(epochs=2, batch_size=2, lr0=1e-3, model=VariantConfig())
    model, state, step, _ = train_on_arrays(cfg, images, masks)
    path = save_checkpoint(tmp_path / "m.utfm", model, step, cfg, state)
    ck = load_checkpoint(path, cfg.model)
    ours, theirs = model.state_arrays(), ck.model.state_arrays()
    assert list(ours) == list(theirs)
    assert all(ours[n].tobytes() == theirs[n].tobytes() for n in ours)
    model.eval()
    ck.model.eval()
    assert np.array_equal(model(Tensor(images)).data, ck.model(Tensor(images)).data)
    for i, m in enumerate(masks):
        write_pgm(tmp_path / f"{i}.pgm", m.astype(np.uint8))
        assert np.array_equal(read_pgm(tmp_path / f"{i}.pgm"), m)
    report("C9 persistence", f"{len(ours)} tensors bitwise, eval logits identical, 4 masks exact")
