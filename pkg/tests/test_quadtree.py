import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadpath.criterion import CriterionConfig
from quadpath.errors import SchemaError
from quadpath.imageio import load_image
from quadpath.quadtree import (
    QuadtreeConfig,
    Rect,
    build_quadtree,
    check_tree,
    deserialize_tree,
    max_node_count,
    node_path,
    patch_path,
    resample_patch,
    serialize_tree,
    split_rect,
)

ENTROPY_LUMA = CriterionConfig("entropy", "luminance")
MEAN_H = CriterionConfig("mean", "haematoxylin")


def nine_node_image():
    rng = np.random.default_rng(0)
    img = np.full((1024, 1024, 3), 200, np.uint8)
    img[:512, :512] = rng.integers(0, 256, size=(512, 512, 3), dtype=np.uint8)
    return img


def random_image(seed, shape=None):
    """Blobby image with varied local detail, odd sizes allowed."""
    rng = np.random.default_rng(seed)
    h, w = shape or (int(rng.integers(33, 129)), int(rng.integers(33, 129)))
    img = np.full((h, w, 3), 235, np.uint8)
    for _ in range(int(rng.integers(1, 6))):
        y, x = rng.integers(0, h), rng.integers(0, w)
        r = int(rng.integers(4, max(5, min(h, w) // 2)))
        yy, xx = np.ogrid[:h, :w]
        blob = (yy - y) ** 2 + (xx - x) ** 2 < r * r
        noise = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        img[blob] = noise[blob] // 2 + rng.integers(0, 100)
    return img


def ids(tree):
    return {n.node_id for n in tree.nodes()}


# -- construction ------------------------------------------------------------------


def test_constant_white_is_single_leaf():
    tree = build_quadtree(np.full((300, 200, 3), 255, np.uint8), QuadtreeConfig(MEAN_H, 0.5, 4, 32))
    assert len(tree) == 1 and tree.root.is_leaf
    assert tree.root.patch.shape == (32, 32, 3)


def test_always_split_reaches_full_tree():
    img = random_image(1, (256, 256))
    tree = build_quadtree(img, QuadtreeConfig(MEAN_H, float("-inf"), 4, 8))
    assert len(tree) == 341 == max_node_count(4)
    assert all(n.depth == 4 for n in tree.leaves())
    check_tree(tree)


def test_hand_built_nine_node_case():
    tree = build_quadtree(nine_node_image(), QuadtreeConfig(ENTROPY_LUMA, 1.0, 2, 16))
    assert len(tree) == 9
    assert ids(tree) == {"r", "r.0", "r.1", "r.2", "r.3", "r.0.0", "r.0.1", "r.0.2", "r.0.3"}
    # root and r.0 split; the other 7 nodes are leaves
    assert len(tree.leaves()) == 7
    assert tree.find("r.0.3").rect == Rect(256, 256, 256, 256)
    assert tree.find("r.1").criterion_value == 0.0
    check_tree(tree)


def test_patches_have_configured_size():
    tree = build_quadtree(nine_node_image()[:100, :90], QuadtreeConfig(ENTROPY_LUMA, 0.5, 3, 20))
    assert all(n.patch.shape == (20, 20, 3) for n in tree.nodes())


def test_without_patches():
    tree = build_quadtree(random_image(2), QuadtreeConfig(MEAN_H, 1.0, 3, 16), with_patches=False)
    assert all(n.patch is None for n in tree.nodes())


def test_degenerate_regions_are_forced_leaves():
    img = random_image(3, (3, 40))
    tree = build_quadtree(img, QuadtreeConfig(MEAN_H, float("-inf"), 4, 4))
    for leaf in tree.leaves():
        assert leaf.depth == 4 or leaf.rect.w < 2 or leaf.rect.h < 2
    check_tree(tree)


def test_one_pixel_image():
    tree = build_quadtree(np.zeros((1, 1, 3), np.uint8), QuadtreeConfig(MEAN_H, float("-inf"), 4, 4))
    assert len(tree) == 1


def test_nan_threshold_rejected():
    with pytest.raises(ValueError):
        QuadtreeConfig(MEAN_H, float("nan"))


# -- splitting ---------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(1, 300), st.integers(1, 300))
def test_split_rect_tiles_parent(x, y, w, h):
    kids = split_rect(Rect(x, y, w, h))
    assert sum(k.w * k.h for k in kids) == w * h
    assert kids[0].w == (w + 1) // 2 and kids[0].h == (h + 1) // 2
    assert kids[1].x == x + kids[0].w and kids[2].y == y + kids[0].h
    assert kids[3] == Rect(x + kids[0].w, y + kids[0].h, w - kids[0].w, h - kids[0].h)


def test_node_path_decoding():
    assert node_path("r") == []
    assert node_path("r.0.3") == [0, 3]
    for bad in ("x.0", "r.4", "r.a", "r..1"):
        with pytest.raises(SchemaError):
            node_path(bad)


# -- structural invariants on random images -----------------------------------------------


@pytest.mark.parametrize("seed", range(50))
def test_tiling_and_leaf_rule(seed):
    img = random_image(seed)
    crit = ENTROPY_LUMA if seed % 2 else MEAN_H
    t = [0.5, 2.0, 4.0][seed % 3] if seed % 2 else [1.0, 5.0, 15.0][seed % 3]
    tree = build_quadtree(img, QuadtreeConfig(crit, t, 4, 8), with_patches=False)
    check_tree(tree)
    assert len(tree) <= 341
    for node in tree.nodes():
        if node.is_leaf:
            assert node.criterion_value <= t or node.depth == 4 or min(node.rect.w, node.rect.h) < 2
        else:
            assert node.criterion_value > t and node.depth < 4


@pytest.mark.parametrize("seed", range(20))
def test_threshold_monotonicity(seed):
    img = random_image(100 + seed)
    crit = MEAN_H if seed % 2 else ENTROPY_LUMA
    lo, hi = (2.0, 8.0) if seed % 2 else (1.0, 3.0)
    t1 = build_quadtree(img, QuadtreeConfig(crit, lo, 4, 8), with_patches=False)
    t2 = build_quadtree(img, QuadtreeConfig(crit, hi, 4, 8), with_patches=False)
    assert ids(t2) <= ids(t1)


def test_check_tree_catches_violations():
    tree = build_quadtree(nine_node_image(), QuadtreeConfig(ENTROPY_LUMA, 1.0, 2, 8))
    tree.find("r.1").criterion_value = 5.0  # a leaf that should have split
    with pytest.raises(SchemaError):
        check_tree(tree)


def test_criterion_uses_source_pixels_not_patch():
    img = nine_node_image()
    tree = build_quadtree(img, QuadtreeConfig(ENTROPY_LUMA, 1.0, 1, 4))
    # a 4x4 patch cannot hold ~8 bits of entropy; the source region does
    assert tree.find("r.0").criterion_value > 7.5


def test_determinism():
    img = random_image(7)
    cfg = QuadtreeConfig(MEAN_H, 3.0, 4, 16)
    a, b = build_quadtree(img, cfg), build_quadtree(img, cfg)
    assert [(n.node_id, n.rect, n.criterion_value) for n in a.nodes()] == [
        (n.node_id, n.rect, n.criterion_value) for n in b.nodes()
    ]
    assert all(np.array_equal(x.patch, y.patch) for x, y in zip(a.nodes(), b.nodes()))


# -- resampling --------------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(1, 1), (3, 500), (244, 244), (1000, 37)])
def test_constant_region_stays_constant(shape):
    region = np.empty(shape + (3,), np.uint8)
    region[:] = (37, 99, 200)
    out = resample_patch(region)
    assert out.shape == (244, 244, 3)
    assert (out.reshape(-1, 3) == [37, 99, 200]).all()


def test_same_size_is_exact_copy():
    region = np.random.default_rng(0).integers(0, 256, (244, 244, 3), dtype=np.uint8)
    out = resample_patch(region)
    assert np.array_equal(out, region) and out is not region


def test_checkerboard_mean_preserved():
    blocks = (np.add.outer(np.arange(488) // 2, np.arange(488) // 2) % 2) * 255
    region = np.repeat(blocks[..., None], 3, axis=2).astype(np.uint8)
    out = resample_patch(region)
    assert abs(out.mean() - region.mean()) <= 1.0


# -- serialization ------------------------------------------------------------------------


def test_serialize_round_trip(tmp_path):
    tree = build_quadtree(nine_node_image(), QuadtreeConfig(ENTROPY_LUMA, 1.0, 2, 16), "img")
    serialize_tree(tree, tmp_path / "t", {"seed": 3})
    back = deserialize_tree(tmp_path / "t", load_patches=True)
    assert back.image_id == "img" and back.config == tree.config
    for a, b in zip(tree.nodes(), back.nodes()):
        assert (a.node_id, a.rect, a.depth, a.criterion_value, a.is_leaf) == (
            b.node_id,
            b.rect,
            b.depth,
            b.criterion_value,
            b.is_leaf,
        )
        assert np.array_equal(a.patch, b.patch)
    assert np.array_equal(load_image(patch_path(tmp_path / "t", "r.0.2")), tree.find("r.0.2").patch)
    doc = json.loads((tmp_path / "t" / "tree.json").read_text())
    assert doc["provenance"] == {"seed": 3}
    assert set(doc["nodes"][0]) == {"node_id", "rect", "depth", "criterion_value", "is_leaf"}


def _tree_doc(tmp_path):
    tree = build_quadtree(nine_node_image(), QuadtreeConfig(ENTROPY_LUMA, 1.0, 2, 8))
    serialize_tree(tree, tmp_path / "t", write_patches=False)
    path = tmp_path / "t" / "tree.json"
    return path, json.loads(path.read_text())


def test_three_children_rejected(tmp_path):
    path, doc = _tree_doc(tmp_path)
    doc["nodes"] = [n for n in doc["nodes"] if n["node_id"] != "r.0.3"]
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        deserialize_tree(tmp_path / "t")


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d["nodes"].append(dict(d["nodes"][1])),
        lambda d: d["nodes"][1].update(depth=3),
        lambda d: d["nodes"][2].update(is_leaf=False),
        lambda d: d["nodes"].pop(0),
        lambda d: d.pop("config"),
        lambda d: d["nodes"][2].pop("rect"),
    ],
)
def test_malformed_tree_files_rejected(tmp_path, mutate):
    path, doc = _tree_doc(tmp_path)
    mutate(doc)
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        deserialize_tree(tmp_path / "t")
