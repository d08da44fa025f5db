import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import bilinear_reference, union_find_components
from ramstrans import dppm
from ramstrans.dppm import EmptyMask, PatchComponent, PixelRegion
from ramstrans.tensor import bilinear_resize
from ramstrans.vit import ModelConfig

CFG1 = ModelConfig(image_size=32, patch_size=16, embed_dim=8, heads=2, num_cls_tokens=1)
CFG2 = ModelConfig(image_size=64, patch_size=16, embed_dim=8, heads=2, num_cls_tokens=2)


def random_stochastic(rng, shape):
    w = rng.random(shape) + 1e-3
    return w / w.sum(-1, keepdims=True)


# ---------------------------------------------------------------- regularize / rollout
def test_regularize_identity_head():
    np.testing.assert_array_equal(dppm.regularize_layer(np.eye(2)[None]), [[2, 0], [0, 2]])


def test_regularize_uniform_head_unchanged():
    w = np.full((1, 2, 2), 0.5)
    np.testing.assert_allclose(dppm.regularize_layer(w), [[1.5, 0.5], [0.5, 1.5]], atol=1e-15)


def test_regularize_two_heads_average():
    w = np.stack([np.eye(2), np.eye(2)[::-1]])
    np.testing.assert_allclose(dppm.regularize_layer(w), [[1.5, 0.5], [0.5, 1.5]], atol=1e-15)


def test_regularize_rejects_zero_heads():
    with pytest.raises(ValueError):
        dppm.regularize_layer(np.zeros((0, 3, 3)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 4), t=st.integers(1, 20))
def test_regularized_rows_have_mean_one(seed, k, t):
    g = dppm.regularize_layer(random_stochastic(np.random.default_rng(seed), (k, t, t)))
    np.testing.assert_allclose(g.mean(axis=1), 1.0, atol=1e-6)
    assert (g >= 0).all()


def test_rollout_examples():
    np.testing.assert_array_equal(dppm.rollout([np.eye(3)] * 4), np.eye(3))
    a = np.array([[1.5, 0.5], [0.5, 1.5]])
    np.testing.assert_allclose(dppm.rollout([a, a]), [[2.5, 1.5], [1.5, 2.5]])


def test_rollout_order_is_last_layer_first(rng):
    a, b = rng.random((2, 3, 3))
    np.testing.assert_allclose(dppm.rollout([a, b]), b @ a)


def test_rollout_scaling_one_layer(rng):
    layers = list(rng.random((3, 4, 4)))
    base = dppm.rollout(layers)
    layers[1] = layers[1] * 2.5
    np.testing.assert_allclose(dppm.rollout(layers), base * 2.5, rtol=1e-14)


def test_rollout_errors():
    with pytest.raises(ValueError):
        dppm.rollout([])
    with pytest.raises(ValueError):
        dppm.rollout([np.eye(2), np.eye(3)])


# ---------------------------------------------------------------- scores and mask
def test_patch_scores_identity_and_uniform():
    np.testing.assert_array_equal(dppm.patch_scores(np.eye(5), CFG1), np.zeros((2, 2)))
    np.testing.assert_array_equal(dppm.patch_scores(np.full((5, 5), 0.3), CFG1), np.full((2, 2), 0.3))


def test_patch_scores_index_mapping(rng):
    g = rng.random((18, 18))
    s = dppm.patch_scores(g, CFG2)
    for i in range(16):
        assert s.reshape(-1)[i] == g[0, 2 + i]
    with pytest.raises(ValueError):
        dppm.patch_scores(np.eye(5), CFG2)


def test_threshold_examples():
    m = dppm.threshold_mask(np.array([[4.0, 1.0], [1.0, 2.0]]), 1.0)
    np.testing.assert_array_equal(m.grid, [[1, 0], [0, 0]])
    assert m.mean_score == 2.0 and m.alpha == 1.0
    assert dppm.threshold_mask(np.full((3, 3), 0.7), 1.3).grid.sum() == 0
    with pytest.raises(ValueError):
        dppm.threshold_mask(np.ones((2, 2)), 0.0)


@settings(max_examples=100, deadline=None)
@given(
    scores=arrays(np.float64, (4, 4), elements=st.floats(0, 100, allow_nan=False)),
    alpha=st.sampled_from([1.0, 1.3]),
    scale=st.sampled_from([1e-3, 0.5, 2.0, 10.0, 1024.0]),
)
def test_mask_scale_invariance(scores, alpha, scale):
    a = dppm.threshold_mask(scores, alpha).grid
    b = dppm.threshold_mask(scores * scale, alpha).grid
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1}


# ---------------------------------------------------------------- components
def test_component_examples():
    full = dppm.largest_component(np.ones((3, 3)))
    assert full.size == 9 and full.bbox == (0, 0, 2, 2)
    m = np.zeros((3, 3), dtype=int)
    m[0, 0] = m[1, 1] = m[1, 2] = m[2, 1] = 1
    comp = dppm.largest_component(m)
    assert comp.members == {(1, 1), (1, 2), (2, 1)} and comp.bbox == (1, 1, 2, 2)
    with pytest.raises(EmptyMask):
        dppm.largest_component(np.zeros((3, 3)))


def test_component_tie_breaks_to_smallest_corner():
    m = np.zeros((4, 4), dtype=int)
    m[3, 0] = m[3, 1] = 1
    m[0, 2] = m[0, 3] = 1
    assert dppm.largest_component(m).bbox == (0, 2, 0, 3)


def test_component_diagonal_is_not_connected():
    comp = dppm.largest_component(np.eye(3))
    assert comp.size == 1 and comp.bbox == (0, 0, 0, 0)


def test_components_match_union_find(rng):
    for density in np.linspace(0.1, 0.9, 9):
        for _ in range(30):
            grid = (rng.random((8, 8)) < density).astype(np.uint8)
            if not grid.any():
                continue
            got = dppm.largest_component(grid)
            assert set(got.members) == union_find_components(grid)[0]


# ---------------------------------------------------------------- regions and crops
def test_pixel_region_examples():
    comp = PatchComponent(frozenset({(1, 1)}), (1, 1, 2, 2))
    assert dppm.to_pixel_region(comp, 16, 64) == PixelRegion(16, 16, 48, 48)
    assert dppm.to_pixel_region(PatchComponent(frozenset(), (0, 0, 3, 3)), 16, 64) == PixelRegion.full(64)
    assert dppm.to_pixel_region(PatchComponent(frozenset(), (0, 0, 0, 0)), 16, 64) == PixelRegion(0, 0, 16, 16)
    assert PixelRegion(1, 2, 3, 5).as_text() == "1 2 3 5"
    with pytest.raises(ValueError):
        PixelRegion(4, 0, 4, 8)


def test_crop_identity_and_constant(rng):
    img = rng.random((32, 32, 3))
    np.testing.assert_array_equal(dppm.crop_zoom(img, PixelRegion.full(32), 32), img)
    flat = np.full((32, 32, 3), 0.25)
    np.testing.assert_allclose(dppm.crop_zoom(flat, PixelRegion(8, 0, 24, 16), 32), 0.25, atol=1e-15)
    with pytest.raises(ValueError):
        dppm.crop_zoom(img, PixelRegion(0, 0, 48, 16), 32)


def test_crop_matches_independent_resize():
    yy, xx = np.mgrid[0:32, 0:32]
    img = np.stack([xx / 31.0, yy / 31.0, (xx + yy) / 62.0], axis=-1)
    got = dppm.crop_zoom(img, PixelRegion(0, 0, 16, 16), 32)
    np.testing.assert_allclose(got, bilinear_reference(img[:16, :16], 32, 32), atol=1e-12)
    np.testing.assert_array_equal(got, bilinear_resize(img[:16, :16].copy(), 32, 32))


# ---------------------------------------------------------------- end-to-end proposal
def _stack_attending(cfg, patches, layers=2, heads=2, strength=20.0):
    t = cfg.seq_len
    w = np.full((layers, heads, t, t), 1.0)
    for p in patches:
        w[:, :, 0, cfg.num_cls_tokens + p] = strength
    return w / w.sum(-1, keepdims=True)


def test_identity_attention_is_empty():
    t = CFG2.seq_len
    stack = np.broadcast_to(np.eye(t), (2, 2, t, t))
    with pytest.raises(EmptyMask):
        dppm.propose(stack, np.zeros((64, 64, 3)), CFG2, 1.3)
    fb = dppm.propose_or_full(stack, np.zeros((64, 64, 3)), CFG2, 1.3)
    assert fb.fallback and fb.region == PixelRegion.full(64)


def test_top_left_quadrant_attention(rng):
    # patches (0,0),(0,1),(1,0),(1,1) on the 4x4 grid form the top-left quadrant
    stack = _stack_attending(CFG2, [0, 1, 4, 5])
    img = rng.random((64, 64, 3))
    prop = dppm.propose(stack, img, CFG2, 1.3)
    assert prop.region == PixelRegion(0, 0, 32, 32)
    np.testing.assert_array_equal(prop.crop, bilinear_resize(img[:32, :32].copy(), 64, 64))
    assert prop.mask.grid.sum() == 4 and not prop.fallback


def test_proposal_same_softmax_rows_same_region(rng):
    logits = rng.normal(size=(2, 2, 18, 18))
    soft = lambda z: np.exp(z - z.max(-1, keepdims=True)) / np.exp(z - z.max(-1, keepdims=True)).sum(-1, keepdims=True)  # noqa: E731
    img = rng.random((64, 64, 3))
    a = dppm.propose_or_full(soft(logits), img, CFG2, 1.0)
    b = dppm.propose_or_full(soft(logits + 5.0), img, CFG2, 1.0)
    assert a.region == b.region
    assert dppm.propose_or_full(soft(logits), img, CFG2, 1.0).region == a.region


def test_region_is_patch_aligned(rng):
    for _ in range(20):
        stack = random_stochastic(rng, (2, 2, 18, 18)) ** 3
        stack /= stack.sum(-1, keepdims=True)
        r = dppm.propose_or_full(stack, rng.random((64, 64, 3)), CFG2, 1.0).region
        assert all(v % 16 == 0 for v in (r.x0, r.y0, r.x1, r.y1))
        assert 0 <= r.x0 < r.x1 <= 64 and 0 <= r.y0 < r.y1 <= 64


def test_exports():
    m = dppm.threshold_mask(np.array([[4.0, 1.0], [1.0, 2.0]]), 1.0)
    assert dppm.mask_to_text(m) == "10\n00\n"
    h = dppm.heatmap_u8(np.array([[1.0, 2.0], [3.0, 5.0]]))
    assert h.min() == 0 and h.max() == 255 and h.dtype == np.uint8
    assert (dppm.heatmap_u8(np.ones((2, 2))) == 0).all()
