import dataclasses
import importlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramstrans.data import Dataset, SynthSpec, generate
from ramstrans.model import RamsModel
from ramstrans.train import TrainConfig
from ramstrans.vit import ModelConfig

# the package re-exports train(), which shadows the submodule attribute
TR = importlib.import_module("ramstrans.train")

MICRO = ModelConfig(image_size=16, patch_size=8, embed_dim=8, layers=1, heads=2, num_classes=2)
SPEC16 = SynthSpec(image_size=16, num_classes=2, glyph_size=4, clutter_density=0.3, train_count=24, test_count=8, seed=1)


@pytest.fixture(scope="module")
def micro_data():
    return generate(SPEC16)


# ---------------------------------------------------------------- schedule
def test_lr_examples():
    cfg = TrainConfig(base_lr=0.03, total_steps=1000, warmup_steps=100)
    assert TR.lr_at(100, cfg) == 0.03
    assert TR.lr_at(50, cfg) == pytest.approx(0.015, abs=1e-15)
    assert TR.lr_at(0, cfg) == 0.0
    assert TR.lr_at(999, cfg) < 1e-3 * 0.03
    with pytest.raises(ValueError):
        TR.lr_at(1000, cfg)
    with pytest.raises(ValueError):
        TR.lr_at(-1, cfg)


@settings(max_examples=100, deadline=None)
@given(total=st.integers(2, 5000), frac=st.floats(0, 1), base=st.floats(1e-4, 1.0))
def test_lr_non_negative_and_continuous_at_joint(total, frac, base):
    warm = int(frac * (total - 1))
    cfg = TrainConfig(base_lr=base, total_steps=total, warmup_steps=warm)
    values = [TR.lr_at(s, cfg) for s in range(0, total, max(1, total // 50))]
    assert min(values) >= 0 and max(values) <= base * (1 + 1e-12)
    if warm >= 1:
        assert abs(TR.lr_at(warm, cfg) - TR.lr_at(warm - 1, cfg)) <= base / warm + 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, warmup_steps=11)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(cls_mode="both")
    assert TrainConfig(total_steps=200).eval_interval == 10
    assert TrainConfig(total_steps=5, warmup_steps=1).eval_interval == 1


# ---------------------------------------------------------------- optimizer
def test_sgd_hand_recursion():
    w, v = [np.array([1.0])], [np.zeros(1)]
    seq = []
    for _ in range(2):
        w, v = TR.sgd_step(w, [w[0].copy()], v, 0.1, 0.9)
        seq.append(float(w[0][0]))
    # v2 = 0.9 * 1 + 0.9, so w2 = 0.9 - 0.1 * 1.8
    assert seq == pytest.approx([0.9, 0.72], abs=1e-15)


def test_sgd_plain_and_identity(rng):
    p = rng.normal(size=(3, 2))
    g = rng.normal(size=(3, 2))
    (q,), _ = TR.sgd_step([p], [g], [np.zeros_like(p)], 0.5, 0.0)
    np.testing.assert_allclose(q, p - 0.5 * g)
    (q,), _ = TR.sgd_step([p], [np.zeros_like(p)], [np.zeros_like(p)], 0.5, 0.9)
    np.testing.assert_array_equal(q, p)
    (q,), (v,) = TR.sgd_step([p], [g], [rng.normal(size=(3, 2))], 0.0, 0.9, 0.1)
    np.testing.assert_array_equal(q, p)
    (q,), _ = TR.sgd_step([p], [g], [np.zeros_like(p)], 1.0, 0.0, 0.5)
    np.testing.assert_allclose(q, p - (g + 0.5 * p))
    with pytest.raises(ValueError):
        TR.sgd_step([p], [g[:2]], [np.zeros_like(p)], 0.1, 0.9)


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0]), None]
    assert TR.clip_grad_norm(grads, 1.0) == 5.0
    assert math.hypot(grads[0][0], grads[1][0]) == pytest.approx(1.0)


def test_augment_keeps_shape(rng):
    imgs = rng.random((3, 16, 16, 3)).astype(np.float32)
    out = TR.augment_batch(imgs, rng)
    assert out.shape == imgs.shape and out.dtype == imgs.dtype


# ---------------------------------------------------------------- training loop
def test_zero_steps_returns_initialization(micro_data):
    tr, _ = micro_data
    cfg = TrainConfig(total_steps=0, warmup_steps=0, seed=4)
    res = TR.train(MICRO, tr, cfg)
    seeds = np.random.SeedSequence(4).spawn(4)
    init = RamsModel.create(TR.model_config_for(MICRO, cfg), np.random.default_rng(seeds[0]))
    for k, p in init.params.items():
        assert res.model.params[k].data.tobytes() == p.data.tobytes()
    assert res.metrics == []


def test_training_is_bit_deterministic(micro_data):
    tr, te = micro_data
    cfg = TrainConfig(total_steps=6, warmup_steps=2, batch_size=8, seed=3)
    a = TR.train(MICRO, tr, cfg, te)
    b = TR.train(MICRO, tr, cfg, te)
    for k in a.model.params:
        assert a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes()
    assert a.metrics == b.metrics or all(
        all((x == y) or (x != x and y != y) for x, y in zip(ra.values(), rb.values())) for ra, rb in zip(a.metrics, b.metrics)
    )
    c = TR.train(MICRO, tr, dataclasses.replace(cfg, seed=4), te)
    assert any(c.model.params[k].data.tobytes() != a.model.params[k].data.tobytes() for k in a.model.params)


def test_metrics_rows_and_eval_cadence(micro_data):
    tr, te = micro_data
    res = TR.train(MICRO, tr, TrainConfig(total_steps=6, warmup_steps=1, batch_size=4), te)
    assert [r["step"] for r in res.metrics] == list(range(6))
    assert all(not math.isnan(r["evalAcc"]) for r in res.metrics)
    assert all(abs(r["lossTotal"] - r["lossS1"] - r["lossS2"]) < 1e-5 for r in res.metrics)


def test_training_options_run(micro_data):
    tr, te = micro_data
    for opts in ({"proposal": "fixed"}, {"proposal": "random"}, {"cls_mode": "scale-shared"}, {"augment": True, "clip_norm": 1.0}):
        cfg = TrainConfig(total_steps=2, warmup_steps=0, batch_size=4, **opts)
        res = TR.train(MICRO, tr, cfg)
        assert len(res.metrics) == 2
    assert res.manifest["mode"] == "scale-wise"
    shared = TR.train(MICRO, tr, TrainConfig(total_steps=1, warmup_steps=0, cls_mode="scale-shared"))
    assert shared.model.cfg.num_cls_tokens == 1 and shared.manifest["mode"] == "scale-shared"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(micro_data):
    tr, _ = micro_data
    with pytest.raises(TR.TrainingDiverged, match="step"):
        TR.train(MICRO, tr, TrainConfig(base_lr=1e30, total_steps=5, warmup_steps=0, batch_size=8))


def test_resolution_mismatch_rejected(micro_data):
    tr, _ = micro_data
    with pytest.raises(ValueError):
        TR.train(dataclasses.replace(MICRO, image_size=32), tr, TrainConfig(total_steps=1, warmup_steps=0))


def test_smoke_run_loss_decreases_per_window():
    spec = SynthSpec(image_size=32, num_classes=2, glyph_size=8, clutter_density=0.5, train_count=400, test_count=100, seed=0)
    tr, _ = generate(spec)
    mcfg = ModelConfig(image_size=32, patch_size=8, embed_dim=32, layers=2, heads=2, num_classes=2)
    res = TR.train(mcfg, tr, TrainConfig(base_lr=0.005, batch_size=32, total_steps=200, warmup_steps=0, seed=0))
    windows = np.array([r["lossTotal"] for r in res.metrics]).reshape(10, 20).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


# ---------------------------------------------------------------- evaluation
def test_accuracy_examples(rng):
    labels = rng.integers(0, 2, 2000)
    assert TR.accuracy(labels, labels) == 1.0
    chance = TR.accuracy(rng.integers(0, 2, 2000), labels)
    assert abs(chance - 0.5) < 4 * math.sqrt(0.25 / 2000)
    with pytest.raises(ValueError):
        TR.accuracy([], [])


def test_fixed_box_iou_is_one_on_aligned_boxes(rng):
    model = RamsModel.create(MICRO, 0)
    boxes = np.array([[0, 0, 8, 8], [8, 8, 16, 16], [0, 8, 16, 16]])
    ds = Dataset(rng.random((3, 16, 16, 3)).astype(np.float32), np.array([0, 1, 0]), boxes)
    assert TR.proposal_ious(model, ds, 1.3, "fixed").tolist() == [1.0, 1.0, 1.0]
    rand = TR.proposal_ious(model, ds, 1.3, "random", seed=0)
    assert rand.shape == (3,) and ((rand >= 0) & (rand <= 1)).all()
    with pytest.raises(ValueError):
        TR.proposal_ious(model, ds, 1.3, "oracle")


def test_evaluate(micro_data):
    _, te = micro_data
    model = RamsModel.create(MICRO, 0)
    acc, miou = TR.evaluate(model, te, 1.3, batch=3)
    assert 0 <= acc <= 1 and 0 <= miou <= 1
    assert model.proposal_calls > 0
    no_boxes = Dataset(te.images, te.labels, None)
    acc2, miou2 = TR.evaluate(model, no_boxes)
    assert acc2 == acc and math.isnan(miou2)
    with pytest.raises(ValueError):
        TR.evaluate(model, te.subset(slice(0, 0)))


# ---------------------------------------------------------------- checkpoints and reports
def test_checkpoint_round_trip(tmp_path):
    model = RamsModel.create(MICRO, 2)
    manifest = TR.manifest_for(MICRO, TrainConfig(alpha=1.3))
    TR.save_checkpoint(tmp_path / "m.ckpt", model, manifest)
    back, m2 = TR.load_checkpoint(tmp_path / "m.ckpt")
    assert m2 == manifest and m2["alpha"] == "1.3" and m2["mode"] == "scale-wise"
    assert back.cfg == MICRO
    for k, p in model.params.items():
        assert back.params[k].data.tobytes() == p.data.tobytes()


def test_manifest_codec_handles_unicode():
    m = {"note": "ünï=code", "alpha": "1.3"}
    assert TR.decode_manifest(TR.encode_manifest(m)) == m


def test_metrics_tsv(tmp_path):
    rows = [{"step": 0, "lr": 0.0, "lossTotal": 1.5, "lossS1": 1.0, "lossS2": 0.5, "evalAcc": math.nan, "meanIoU": math.nan}]
    TR.write_metrics_tsv(tmp_path / "m.tsv", rows)
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["step", "lr", "lossTotal", "lossS1", "lossS2", "evalAcc", "meanIoU"]
    assert lines[1].split("\t")[0] == "0" and len(lines) == 2


def test_resize_dataset(micro_data):
    tr, _ = micro_data
    big = TR.resize_dataset(tr, 32)
    assert big.images.shape[1:3] == (32, 32)
    np.testing.assert_array_equal(big.boxes, np.clip(tr.boxes * 2, 0, 32))
    assert TR.resize_dataset(tr, 16) is tr


@pytest.mark.parametrize(
    "kind,grid,rows",
    [
        ("alpha-sweep", None, [1.1, 1.2, 1.3, 1.4]),
        ("proposal-compare", None, ["DPPM", "Random", "FixedBox"]),
        ("cls-mode", None, ["scale-wise", "scale-shared"]),
        ("patch-size", [4, 8], [4, 8]),
        ("resolution", [16, 32], [16, 32]),
    ],
)
def test_ablation_rows(micro_data, kind, grid, rows):
    tr, te = micro_data
    cfg = TrainConfig(total_steps=1, warmup_steps=0, batch_size=4)
    report = TR.run_ablation(kind, grid, MICRO, cfg, tr, te)
    assert [r["variant"] for r in report.rows] == rows
    table = report.table().splitlines()
    assert table[0] == f"# {kind}" and len(table) == 3 + len(rows)
    assert report.tsv().splitlines()[0] == "variant\taccuracy\tmeanIoU"


def test_ablation_errors(micro_data):
    tr, te = micro_data
    cfg = TrainConfig(total_steps=1, warmup_steps=0)
    with pytest.raises(ValueError):
        TR.run_ablation("depth", None, MICRO, cfg, tr, te)
    with pytest.raises(ValueError):
        TR.run_ablation("alpha-sweep", [], MICRO, cfg, tr, te)
    with pytest.raises(ValueError):
        TR.run_ablation("proposal-compare", ["Oracle"], MICRO, cfg, tr, te)
