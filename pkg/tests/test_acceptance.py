"""Acceptance criteria: one test per criterion, one printed PASS/FAIL line each.

Criterion 6 trains real models and dominates the wall time; its artifacts
are shared with criterion 7 through session fixtures.
"""

import time

import numpy as np
import pytest

import nlran.cli as cli
import nlran.data as D
import nlran.explain as X
import nlran.metrics as mx
import nlran.model as M
import nlran.modules as mod
import nlran.ops as ops
import nlran.tensor as T
import nlran.train as TR

DESK_DATA_SEED = 5
DESK_SPLIT_SEED = 0


@pytest.fixture
def announce(capfd):
    """Report one pass/fail line per criterion, past pytest's capture."""

    def _announce(criterion, ok, detail):
        line = f"[criterion {criterion}] {'PASS' if ok else 'FAIL'} - {detail}"
        with capfd.disabled():
            print(line, flush=True)
        assert ok, line

    return _announce


# -- shared desk experiment (criteria 6 and 7) ---------------------------


@pytest.fixture(scope="session")
def desk_splits():
    vols = D.generate_phantoms(
        D.PhantomSpec(count_per_class=100, seed=DESK_DATA_SEED)
    )
    recs = D.split(
        [{"index": i, "label": v.label} for i, v in enumerate(vols)],
        seed=DESK_SPLIT_SEED,
    )
    return {
        name: [vols[r["index"]] for r in recs if r["split"] == name]
        for name in ("train", "val", "test")
    }


def run_experiment(network_cfg, splits, seed, max_epochs):
    model = M.build(network_cfg, seed=seed, dtype=np.float32)
    cfg = TR.TrainConfig(momentum=0.9, max_epochs=max_epochs, patience=50, seed=seed)
    log, best = TR.train(model, splits["train"], splits["val"], cfg)
    TR.restore(model, best)
    report, _, _ = TR.evaluate(model, splits["test"])
    return model, report, log


@pytest.fixture(scope="session")
def trained_nlran(desk_splits):
    started = time.perf_counter()
    model, report, log = run_experiment(
        M.NetworkConfig(), desk_splits, seed=0, max_epochs=40
    )
    return model, report, log, time.perf_counter() - started


# -- criteria ------------------------------------------------------------


def test_criterion_1_gradient_correctness(announce):
    started = time.perf_counter()
    rows = cli.gradcheck_table()
    elapsed = time.perf_counter() - started
    worst = max(err for _, err, _ in rows)
    names = {name.split("/")[0] for name, _, _ in rows}
    required = {
        "conv3d", "maxpool3d", "upsample3d", "mixed_attention",
        "channel_attention", "spatial_attention", "global_average_pool",
        "fully_connected", "softmax_cross_entropy", "attention_module",
        "nonlocal_block",
    }
    ok = required <= names and worst < 1e-4 and elapsed < 120.0
    announce(1, ok, f"{len(rows)} ops, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_oracle_equivalence(announce):
    from test_nonlocal import nonlocal_reference
    from test_ops import conv3d_reference

    rng = np.random.default_rng(0)
    worst_conv = 0.0
    for _ in range(50):
        n, cin, cout = (int(rng.integers(1, 4)) for _ in range(3))
        d, h, w = (int(rng.integers(2, 6)) for _ in range(3))
        k = tuple(int(rng.integers(1, min(3, e) + 1)) for e in (d, h, w))
        stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
        padding = tuple(int(rng.integers(0, 2)) for _ in range(3))
        x = rng.standard_normal((n, cin, d, h, w))
        wt = rng.standard_normal((cout, cin) + k)
        b = rng.standard_normal(cout)
        got = ops.conv3d(T.Tensor(x), T.Tensor(wt), T.Tensor(b), stride, padding).data
        want = conv3d_reference(x, wt, b, stride, padding)
        worst_conv = max(worst_conv, float(np.abs(got - want).max()))

    worst_nl = 0.0
    for trial in range(50):
        c = int(rng.integers(2, 6))
        d, h, w = (int(rng.integers(1, 4)) for _ in range(3))
        block = mod.NonLocalBlock(c, mod.Builder(seed=trial, dtype=np.float64))
        block.wz.weight.data[:] = rng.standard_normal(block.wz.weight.shape)
        x = rng.standard_normal((1, c, d, h, w))
        got = block.forward(T.Tensor(x)).data
        want = nonlocal_reference(block, x)
        worst_nl = max(worst_nl, float(np.abs(got - want).max()))

    ok = worst_conv < 1e-10 and worst_nl < 1e-10
    announce(2, ok, f"50+50 instances, conv {worst_conv:.2e}, nonlocal {worst_nl:.2e}")


def test_criterion_3_unit_identities(announce):
    rng = np.random.default_rng(1)
    errors = {}

    # combination rule with a zero mask: H = (1 + 0) * F must equal F exactly
    f = T.Tensor(rng.standard_normal((1, 4, 2, 3, 3)))
    m = T.Tensor(np.zeros_like(f.data))
    h = (T.Tensor(np.asarray(1.0)) + m) * f
    errors["mask_zero"] = float(np.abs(h.data - f.data).max())

    # non-local residual identity at Wz = 0
    block = mod.NonLocalBlock(4, mod.Builder(seed=0, dtype=np.float64))
    x = rng.standard_normal((2, 4, 2, 3, 3))
    errors["nonlocal_identity"] = float(
        np.abs(block.forward(T.Tensor(x)).data - x).max()
    )

    # channel attention: unit L2 norm along the channel axis
    out = ops.channel_attention_activation(T.Tensor(rng.standard_normal((2, 5, 2, 2, 2))))
    errors["channel_norm"] = float(np.abs(np.linalg.norm(out.data, axis=1) - 1.0).max())

    # spatial attention: open unit interval
    sp = ops.spatial_attention_activation(T.Tensor(rng.standard_normal((2, 3, 2, 3, 3)))).data
    in_range = 0.0 < sp.min() and sp.max() < 1.0

    worst = max(errors.values())
    ok = worst < 1e-10 and in_range
    announce(3, ok, f"worst identity error {worst:.2e}, spatial in (0,1): {in_range}")


def test_criterion_4_metrics_identities(announce):
    from fractions import Fraction

    from test_metrics import mann_whitney

    rng = np.random.default_rng(2)
    exact = 0
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        cm = mx.ConfusionMatrix(rng.integers(0, 7, size=(k, k)))
        if cm.total == 0:
            continue
        rep = mx.weighted_metrics(cm)
        exact += rep.exact["weighted_recall"] == rep.exact["accuracy"]

    worst_auc = 0.0
    trials = 0
    for _ in range(200):
        n = int(rng.integers(4, 40))
        scores = rng.integers(0, 6, size=n).astype(float)
        truth = rng.integers(0, 2, size=n)
        if truth.sum() in (0, n):
            continue
        trials += 1
        worst_auc = max(
            worst_auc, abs(mx.roc_auc(scores, truth) - mann_whitney(scores, truth))
        )

    rep = mx.weighted_metrics(mx.confusion([0, 0, 1, 2, 2, 1], [0, 1, 1, 2, 2, 1]))
    worked = (
        rep.exact["accuracy"] == Fraction(5, 6)
        and rep.exact["weighted_precision"] == Fraction(8, 9)
        and rep.exact["weighted_f1"] == Fraction(80, 93)
    )
    ok = exact >= 990 and worst_auc < 1e-12 and worked
    announce(
        4,
        ok,
        f"R==ACC exact on {exact} matrices, AUC vs Mann-Whitney "
        f"{worst_auc:.1e} over {trials} trials, worked example: {worked}",
    )


def test_criterion_5_shape_algebra(announce):
    cfg = M.NetworkConfig(base_channels=64, input_shape=(64, 160, 160))
    rows = dict(M.build(cfg, meta=True).trace_shapes())
    want = {
        "conv1": (64, 32, 80, 80),
        "maxpool": (64, 16, 40, 40),
        "residual1": (256, 16, 40, 40),
        "attention1.1": (256, 16, 40, 40),
        "residual2": (512, 8, 20, 20),
        "attention2.1": (512, 8, 20, 20),
        "residual3": (1024, 4, 10, 10),
        "attention3.1": (1024, 4, 10, 10),
        "tail1": (2048, 2, 5, 5),
        "tail3": (2048, 2, 5, 5),
        "nonlocal": (2048, 2, 5, 5),
        "gap": (2048, 1, 1, 1),
        "fc": (3,),
    }
    bad = {k: (rows.get(k), v) for k, v in want.items() if rows.get(k) != v}
    announce(5, not bad, f"paper-scale stage shapes exact ({len(want)} checked)" if not bad else f"mismatches: {bad}")


def test_criterion_6_end_to_end(announce, desk_splits, trained_nlran):
    model, report, log, elapsed = trained_nlran
    headline_ok = (
        report.accuracy >= 0.90 and len(log.epochs) <= 200 and elapsed < 1800.0
    )

    # directional ablation: identical reduced budget, 3 seeds, mean accuracy
    budget = 25
    nlran_accs, resnet_accs = [], []
    for seed in (0, 1, 2):
        _, rep, _ = run_experiment(M.NetworkConfig(), desk_splits, seed, budget)
        nlran_accs.append(rep.accuracy)
        _, rep, _ = run_experiment(
            M.NetworkConfig(attention_stacks=(0, 0, 0), use_nonlocal=False),
            desk_splits,
            seed,
            budget,
        )
        resnet_accs.append(rep.accuracy)
    mean_nlran = float(np.mean(nlran_accs))
    mean_resnet = float(np.mean(resnet_accs))
    ok = headline_ok and mean_resnet <= mean_nlran
    announce(
        6,
        ok,
        f"test acc {report.accuracy:.3f} in {len(log.epochs)} epochs / "
        f"{elapsed:.0f}s; ablation mean acc resnet {mean_resnet:.3f} <= "
        f"nlran {mean_nlran:.3f} over 3 seeds at {budget} epochs",
    )


def test_criterion_7_explainability(announce, desk_splits, trained_nlran):
    model = trained_nlran[0]

    # bit-exact capture
    probe = desk_splits["test"][0]
    x = T.Tensor((probe.voxels[None, None] / 255.0).astype(np.float32))
    plain = model.forward(x).data
    observed = model.forward(x, record={}).data
    capture_exact = np.array_equal(plain, observed)

    hits = total = 0
    for v in desk_splits["test"]:
        if v.lesion is None or v.lesion.sum() == 0:
            continue
        xv = T.Tensor((v.voxels[None, None] / 255.0).astype(np.float32))
        pred = int(model.forward(xv).data.argmax())
        if pred != v.label_index:
            continue
        total += 1
        h = X.attention_heatmap(model, v)
        diff, voxel_auc = X.overlap_score(h, v.lesion)
        hits += diff > 0.0 and voxel_auc > 0.7
    rate = hits / total if total else 0.0
    ok = capture_exact and total > 0 and rate >= 0.80
    announce(
        7,
        ok,
        f"heat-map hit rate {hits}/{total} ({rate:.0%}) on correct "
        f"lesion-bearing phantoms; capture bit-exact: {capture_exact}",
    )


def test_criterion_8_determinism(announce, tmp_path):
    data_dir = tmp_path / "data"
    vols = D.generate_phantoms(
        D.PhantomSpec(shape=(8, 16, 16), count_per_class=10, seed=1)
    )
    D.write_dataset(vols, data_dir)
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(
        '{"network": {"base_channels": 2, "input_shape": [8, 16, 16],'
        ' "use_nonlocal": false},'
        ' "train": {"max_epochs": 2},'
        ' "target_slices": 8, "crop": [16, 16]}'
    )
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli.main(
            [
                "train",
                "--deterministic",
                "--config",
                str(cfg_path),
                "--manifest",
                str(data_dir / "manifest.jsonl"),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        digests.append((out / "checkpoints" / "best.nlck").read_bytes())
    ok = digests[0] == digests[1]
    announce(8, ok, f"checkpoints byte-identical ({len(digests[0])} bytes)")


def test_criterion_9_throughput(announce, trained_nlran):
    model = trained_nlran[0]
    vols = D.generate_phantoms(D.PhantomSpec(count_per_class=134, seed=11))[:400]
    started = time.perf_counter()
    report, scores, _ = TR.evaluate(model, vols)
    elapsed = time.perf_counter() - started
    ok = scores.shape == (400, 3) and elapsed < 60.0
    announce(
        9,
        ok,
        f"400 desk volumes classified in {elapsed:.1f}s "
        "(paper-scale GPU figure out of desk reach; see README)",
    )
