import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quadpath.colorspace import (
    OD_MAX,
    RUIFROK_HE,
    ColorSpace,
    StainMatrix,
    deconvolve,
    deconvolve_haematoxylin,
    synthesize,
    to_blue_ratio,
    to_luminance,
    to_plane,
)
from quadpath.errors import EmptyRegionError, SingularMatrixError

from oracles import blue_ratio, luminance

rgb_images = arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)))


def px(r, g, b):
    return np.array([[[r, g, b]]], dtype=np.uint8)


# -- luminance -------------------------------------------------------------------


@pytest.mark.parametrize("pixel,expected", [((255, 255, 255), 255.0), ((0, 0, 0), 0.0), ((255, 0, 0), 76.245)])
def test_luminance_examples(pixel, expected):
    assert to_luminance(px(*pixel))[0, 0] == pytest.approx(expected, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(rgb_images)
def test_luminance_matches_weighted_sum(img):
    got = to_luminance(img)
    for (y, x), v in np.ndenumerate(got):
        assert v == pytest.approx(luminance(*map(float, img[y, x])), abs=1e-9)


# -- blue ratio --------------------------------------------------------------------


def test_blue_ratio_examples():
    assert to_blue_ratio(px(0, 0, 0))[0, 0] == 0.0
    assert to_blue_ratio(px(0, 0, 255))[0, 0] == 255.0
    assert to_blue_ratio(px(255, 255, 255))[0, 0] == pytest.approx(100 * 255 / 511 * 255 / 766, abs=1e-12)
    assert to_blue_ratio(px(255, 255, 255))[0, 0] == pytest.approx(16.61, abs=0.005)


@settings(max_examples=50, deadline=None)
@given(rgb_images)
def test_blue_ratio_matches_formula(img):
    got = to_blue_ratio(img)
    for (y, x), v in np.ndenumerate(got):
        assert v == pytest.approx(blue_ratio(*map(float, img[y, x])), rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 254))
def test_blue_ratio_monotone_in_blue(r, g, b):
    assert to_blue_ratio(px(r, g, b + 1))[0, 0] >= to_blue_ratio(px(r, g, b))[0, 0]


# -- deconvolution ------------------------------------------------------------------


def test_white_has_no_haematoxylin():
    assert deconvolve_haematoxylin(px(255, 255, 255))[0, 0] == 0.0


def test_pure_haematoxylin_pixel():
    hvec = RUIFROK_HE.rows[0]
    rgb = np.rint(255.0 * np.power(10.0, -0.5 * hvec)).astype(np.uint8)
    conc = deconvolve(rgb[None, None, :])[0, 0] * 255.0 / OD_MAX
    assert conc[0] == pytest.approx(0.5 * 255 / OD_MAX, abs=3)
    assert abs(conc[1]) <= 3 and abs(conc[2]) <= 3
    assert deconvolve_haematoxylin(rgb[None, None, :])[0, 0] == pytest.approx(0.5 * 255 / OD_MAX, abs=3)


@pytest.mark.parametrize("perm", [(0, 1, 2), (1, 0, 2), (2, 1, 0), (1, 2, 0)])
def test_permuted_identity_selects_channel(perm):
    stains = StainMatrix(np.eye(3)[list(perm)])
    img = np.array([[[12, 130, 240], [200, 40, 90]]], dtype=np.uint8)
    od = -np.log10((img.astype(float) + 1) / 256)
    expected = np.clip(od[..., perm[0]] * 255 / OD_MAX, 0, 255)
    assert np.allclose(deconvolve_haematoxylin(img, stains), expected, atol=1e-9)


def test_round_trip_from_known_concentrations():
    rng = np.random.default_rng(4)
    conc = rng.uniform(0.0, 1.0, size=(32, 32, 3)) * np.array([1.0, 0.6, 0.1])
    img = synthesize(conc, RUIFROK_HE)
    back = deconvolve(img, RUIFROK_HE)
    visible = np.all(img > 3, axis=-1)
    err = np.abs(back - conc)[visible]
    assert err.max() < 0.02 * OD_MAX


def test_stain_rows_normalized():
    for row in RUIFROK_HE.rows:
        assert abs(np.linalg.norm(row) - 1.0) < 1e-9
    assert np.allclose(RUIFROK_HE.rows[0] * np.linalg.norm([0.65, 0.70, 0.29]), [0.65, 0.70, 0.29])


def test_singular_matrix_rejected():
    with pytest.raises(SingularMatrixError):
        StainMatrix(np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1.0]]))
    with pytest.raises(SingularMatrixError):
        StainMatrix(np.array([[0, 0, 0], [0, 1, 0], [0, 0, 1.0]]))
    with pytest.raises(SingularMatrixError):
        StainMatrix.from_values([1, 2, 3])


def test_from_values_renormalizes():
    m = StainMatrix.from_values([2, 0, 0, 0, 3, 0, 0, 0, 4])
    assert np.allclose(m.rows, np.eye(3))
    assert StainMatrix.from_values(m.to_values()) == m


@settings(max_examples=40, deadline=None)
@given(rgb_images, rgb_images, st.sampled_from(list(ColorSpace)))
def test_transforms_are_pointwise(a, b, space):
    if a.shape[0] != b.shape[0]:
        b = b[: a.shape[0]] if b.shape[0] > a.shape[0] else np.concatenate([b] * math.ceil(a.shape[0] / b.shape[0]))[: a.shape[0]]
    joined = np.concatenate([a, b], axis=1)
    assert np.array_equal(to_plane(joined, space), np.concatenate([to_plane(a, space), to_plane(b, space)], axis=1))


@settings(max_examples=40, deadline=None)
@given(rgb_images, st.sampled_from(list(ColorSpace)))
def test_planes_finite_and_clamped(img, space):
    plane = to_plane(img, space)
    assert plane.shape == img.shape[:2]
    assert np.all(np.isfinite(plane)) and plane.min() >= 0 and plane.max() <= 255


def test_empty_region_rejected():
    with pytest.raises(EmptyRegionError):
        to_luminance(np.zeros((0, 3, 3), np.uint8))
