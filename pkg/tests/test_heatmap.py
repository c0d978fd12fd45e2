import numpy as np
import pytest
from scipy.stats import rankdata

from quadpath.bags import BUILTIN_DIM, builtin_features
from quadpath.criterion import CriterionConfig
from quadpath.errors import BackendMismatchError, DimError, UntrainedModelError
from quadpath.heatmap import COLORMAP, HeatmapConfig, attention_map, render_grid, render_overlay, window_rects
from quadpath.mil import AMILModel, CLAMModel, attention_weights
from quadpath.quadtree import QuadtreeConfig, Rect, build_quadtree


def image_and_tree(size=128):
    rng = np.random.default_rng(0)
    img = np.full((size, size, 3), 200, np.uint8)
    img[: size // 2, : size // 2] = rng.integers(0, 256, (size // 2, size // 2, 3), dtype=np.uint8)
    img[size // 2 :, size // 2 :] = (150, 60, 170)
    tree = build_quadtree(img, QuadtreeConfig(CriterionConfig("entropy", "luminance"), 1.0, 2, 16))
    return img, tree


def trained(cls=AMILModel, seed=0):
    m = cls.init(BUILTIN_DIM, d_emb=16, attn_dim=8, seed=seed)
    m.trained_epochs = 1
    return m


def uniform_attention(model):
    for k in model.params:
        if k in ("w", "w0", "w1"):
            model.params[k][:] = 0.0
    return model


# -- attention_map ------------------------------------------------------------------------


def test_zero_overlap_colours_each_leaf_uniformly():
    img, tree = image_and_tree()
    model = trained()
    values, cov = attention_map(img, tree, model, HeatmapConfig(overlap=0.0), mode="quadtree_leaf")
    assert (cov == 1).all()
    leaves = tree.leaves()
    per_leaf = []
    for leaf in leaves:
        block = values[leaf.rect.slices()]
        assert (block == block.flat[0]).all()
        per_leaf.append(block.flat[0])
    X = np.stack([builtin_features(n.patch) for n in leaves])
    raw = attention_weights(model, X)
    assert np.array_equal(rankdata(per_leaf), rankdata(raw))
    assert min(per_leaf) == 0.0 and max(per_leaf) == 255.0


@pytest.mark.parametrize("overlap", [0.0, 0.5])
@pytest.mark.parametrize("cls", [AMILModel, CLAMModel])
def test_uniform_attention_gives_constant_map(overlap, cls):
    img, tree = image_and_tree()
    values, cov = attention_map(img, tree, uniform_attention(trained(cls)), HeatmapConfig(overlap=overlap))
    assert (cov > 0).all()
    assert np.unique(values).size == 1


def test_coverage_counts_overlapping_windows():
    img = np.full((64, 64, 3), 255, np.uint8)
    tree = build_quadtree(img, QuadtreeConfig(CriterionConfig("mean", "haematoxylin"), 0.5, 4, 16))
    assert len(tree) == 1
    _, cov = attention_map(img, tree, trained(), HeatmapConfig(overlap=0.5))
    assert cov[10, 10] == 1 and cov[10, 40] == 2 and cov[40, 40] == 4


def test_window_rects_stride_and_clipping():
    assert window_rects(Rect(0, 0, 8, 8), 0.0, 100, 100) == [Rect(0, 0, 8, 8)]
    got = window_rects(Rect(0, 0, 8, 8), 0.5, 10, 10)
    assert got == [Rect(0, 0, 8, 8), Rect(4, 0, 6, 8), Rect(0, 4, 8, 6), Rect(4, 4, 6, 6)]


def test_values_within_range_and_deterministic():
    img, tree = image_and_tree()
    cfg = HeatmapConfig(overlap=0.5)
    a, ca = attention_map(img, tree, trained(CLAMModel, 3), cfg)
    b, cb = attention_map(img, tree, trained(CLAMModel, 3), cfg)
    assert a.min() >= 0.0 and a.max() <= 255.0
    assert np.array_equal(a, b) and np.array_equal(ca, cb)


def test_untrained_model_rejected():
    img, tree = image_and_tree()
    with pytest.raises(UntrainedModelError):
        attention_map(img, tree, AMILModel.init(BUILTIN_DIM))


def test_backend_mismatches():
    img, tree = image_and_tree()
    model = trained()
    with pytest.raises(BackendMismatchError):
        attention_map(img, tree, model, HeatmapConfig(overlap=0.5), featurize=None)
    with pytest.raises(BackendMismatchError):
        attention_map(img, tree, model, HeatmapConfig(overlap=0.0), features=np.zeros((3, BUILTIN_DIM)))
    with pytest.raises(BackendMismatchError):
        attention_map(img, tree, model, HeatmapConfig(overlap=0.0), features=np.zeros((len(tree), 7)))


def test_precomputed_features_match_builtin():
    img, tree = image_and_tree()
    X = np.stack([builtin_features(n.patch) for n in tree.nodes()])
    cfg = HeatmapConfig(overlap=0.0)
    a, _ = attention_map(img, tree, trained(), cfg)
    b, _ = attention_map(img, tree, trained(), cfg, featurize=None, features=X)
    assert np.array_equal(a, b)


def test_config_validation():
    for kw in ({"overlap": 0.95}, {"alpha": 1.5}, {"branch": 2}):
        with pytest.raises(ValueError):
            HeatmapConfig(**kw)


# -- overlay -------------------------------------------------------------------------------------


def test_alpha_zero_is_identity():
    img, _ = image_and_tree(32)
    out = render_overlay(img, np.random.default_rng(0).uniform(0, 255, (32, 32)), HeatmapConfig(alpha=0.0))
    assert out.tobytes() == img.tobytes()


def test_colormap_endpoints():
    assert COLORMAP.shape == (256, 3)
    assert COLORMAP[0].tolist() == [0, 0, 255] and COLORMAP[255].tolist() == [255, 0, 0]
    img = np.full((4, 4, 3), 90, np.uint8)
    cfg = HeatmapConfig(alpha=1.0)
    assert (render_overlay(img, np.zeros((4, 4)), cfg) == [0, 0, 255]).all()
    assert (render_overlay(img, np.full((4, 4), 255.0), cfg) == [255, 0, 0]).all()


def test_alpha_one_constant_map():
    img = np.random.default_rng(1).integers(0, 256, (6, 6, 3), dtype=np.uint8)
    out = render_overlay(img, np.full((6, 6), 127.5), HeatmapConfig(alpha=1.0))
    assert (out == COLORMAP[128]).all()


def test_uncovered_pixels_unblended():
    img = np.full((4, 4, 3), 40, np.uint8)
    cov = np.zeros((4, 4), int)
    cov[:2] = 1
    out = render_overlay(img, np.full((4, 4), 255.0), HeatmapConfig(alpha=0.5), coverage=cov)
    assert (out[2:] == 40).all()
    assert out[0, 0].tolist() == [148, 20, 20]


def test_overlay_shape_mismatch():
    with pytest.raises(DimError):
        render_overlay(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5)))


def test_grid_outlines_leaves():
    img, tree = image_and_tree()
    out = render_grid(img, tree)
    assert (out[0] == 0).all() and (out[:, 0] == 0).all()
    leaf = tree.find("r.3")
    assert (out[leaf.rect.y + 5, leaf.rect.x + 5] == img[leaf.rect.y + 5, leaf.rect.x + 5]).all()
    overlaid = render_overlay(img, np.zeros(img.shape[:2]), HeatmapConfig(alpha=0.5, draw_grid=True), tree=tree)
    assert (overlaid[-1] == 0).all()
