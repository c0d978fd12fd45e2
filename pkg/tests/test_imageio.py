import io
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from quadpath.errors import (
    DimensionError,
    DimMismatchError,
    DuplicateIdError,
    FormatError,
    LabelError,
    ParseError,
)
from quadpath.imageio import (
    FeatureRecord,
    ManifestEntry,
    as_image,
    atomic_write,
    image_size,
    load_image,
    load_manifest,
    parse_manifest,
    read_features,
    read_features_text,
    read_json,
    save_image,
    write_features,
    write_features_text,
    write_json,
    write_manifest,
)


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


# -- images ------------------------------------------------------------------


def test_load_red_png(tmp_path):
    p = tmp_path / "red.png"
    p.write_bytes(_png_bytes(Image.new("RGB", (2, 2), (255, 0, 0))))
    img = load_image(p)
    assert img.shape == (2, 2, 3) and img.dtype == np.uint8
    assert (img.reshape(-1, 3) == [255, 0, 0]).all()


def test_grayscale_expands_to_equal_channels(tmp_path):
    p = tmp_path / "g.png"
    p.write_bytes(_png_bytes(Image.new("L", (1, 1), 7)))
    assert load_image(p).tolist() == [[[7, 7, 7]]]


def test_rgba_drops_alpha(tmp_path):
    p = tmp_path / "a.png"
    p.write_bytes(_png_bytes(Image.new("RGBA", (3, 1), (1, 2, 3, 4))))
    assert load_image(p).tolist() == [[[1, 2, 3]] * 3]


def test_truncated_file_is_format_error(tmp_path):
    data = _png_bytes(Image.new("RGB", (16, 16), (9, 9, 9)))
    p = tmp_path / "t.png"
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        load_image(p)


def test_garbage_is_format_error(tmp_path):
    p = tmp_path / "x.png"
    p.write_bytes(b"definitely not an image")
    with pytest.raises(FormatError):
        load_image(p)


def test_missing_file_is_oserror(tmp_path):
    with pytest.raises(OSError):
        load_image(tmp_path / "nope.png")


def test_zero_sized_array_rejected():
    with pytest.raises(DimensionError):
        as_image(np.zeros((0, 4, 3), np.uint8))


def test_as_image_expands_2d():
    assert as_image(np.full((2, 3), 5, np.uint8)).shape == (2, 3, 3)


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3))))
def test_png_round_trip_is_exact(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("rt") / "img.png"
    save_image(img, p)
    assert np.array_equal(load_image(p), img)


def test_image_size_reads_header(tmp_path):
    p = tmp_path / "s.png"
    save_image(np.zeros((5, 9, 3), np.uint8), p)
    assert image_size(p) == (9, 5)


# -- atomic writes and json ----------------------------------------------------


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    atomic_write(p, "one")
    atomic_write(p, b"two")
    assert p.read_bytes() == b"two"
    assert os.listdir(p.parent) == ["f.txt"]


def test_json_is_sorted_and_rejects_nan(tmp_path):
    p = tmp_path / "d.json"
    write_json(p, {"b": 1, "a": [1.5]})
    assert read_json(p) == {"a": [1.5], "b": 1}
    assert p.read_text().index('"a"') < p.read_text().index('"b"')
    with pytest.raises(ValueError):
        write_json(p, {"x": float("nan")})


def test_read_json_malformed(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(FormatError):
        read_json(p)


# -- manifest ------------------------------------------------------------------


def _manifest_text(n_neg=71, n_pos=68, folds=3):
    lines = ["# image_id\tpath\tlabel\tfold"]
    for i in range(n_neg + n_pos):
        label = 0 if i < n_neg else 1
        lines.append(f"img{i:03d}\timages/img{i:03d}.png\t{label}\t{i % folds}")
    return "\n".join(lines) + "\n"


def test_manifest_class_counts():
    m = parse_manifest(_manifest_text())
    assert len(m) == 139
    assert m.class_counts() == (71, 68)
    assert m.n_folds == 3


def test_manifest_folds_partition_entries():
    m = parse_manifest(_manifest_text())
    ids = [i for f in range(m.n_folds) for i in m.fold_ids(f)]
    assert sorted(ids) == sorted(e.image_id for e in m)


def test_empty_manifest_is_parse_error(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("")
    with pytest.raises(ParseError):
        load_manifest(p)


def test_comment_only_manifest_is_parse_error():
    with pytest.raises(ParseError):
        parse_manifest("# nothing here\n")


def test_duplicate_id_rejected():
    with pytest.raises(DuplicateIdError):
        parse_manifest("a\ta.png\t0\t0\na\tb.png\t1\t1\n")


@pytest.mark.parametrize("label", ["2", "-1", "x"])
def test_bad_label_rejected(label):
    with pytest.raises(LabelError):
        parse_manifest(f"a\ta.png\t{label}\t0\n")


@pytest.mark.parametrize("line", ["a\ta.png\t0", "a\ta.png\t0\t-1", "a\ta.png\t0\tz"])
def test_malformed_rows_rejected(line):
    with pytest.raises(ParseError):
        parse_manifest(line + "\n")


def test_fold_outside_declared_count_rejected():
    with pytest.raises(ParseError):
        parse_manifest("a\ta.png\t0\t3\n", n_folds=3)


def test_manifest_round_trip_and_resolve(tmp_path):
    entries = [ManifestEntry("a", "x/a.png", 0, 0), ManifestEntry("b", "x/b.png", 1, 1)]
    p = tmp_path / "m.tsv"
    write_manifest(entries, p)
    m = load_manifest(p)
    assert list(m.entries) == entries
    assert m.resolve(entries[0]) == tmp_path / "x" / "a.png"


# -- feature files ---------------------------------------------------------------


def test_feature_round_trip_bit_exact(tmp_path):
    rec = [FeatureRecord("img", "r", np.array([1.0, 2.0, 3.0, 4.0]))]
    p = tmp_path / "f.qpft"
    write_features(rec, p)
    ff = read_features(p)
    assert ff.feature_dim == 4 and len(ff) == 1
    assert ff.records[0].vector.tobytes() == rec[0].vector.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=8), st.integers(1, 5))
def test_feature_round_trip_property(tmp_path_factory, values, count):
    vec = np.array(values)
    recs = [FeatureRecord(f"i{j}", f"r.{j % 4}", vec[::-1] if j % 2 else vec) for j in range(count)]
    p = tmp_path_factory.mktemp("ff") / "f.qpft"
    write_features(recs, p)
    back = read_features(p)
    for a, b in zip(recs, back.records):
        assert (a.image_id, a.node_id) == (b.image_id, b.node_id)
        assert a.vector.tobytes() == b.vector.astype("<f8").tobytes()


def test_feature_layout_header(tmp_path):
    p = tmp_path / "f.qpft"
    write_features([FeatureRecord("ab", "r.1", np.zeros(2))], p)
    raw = p.read_bytes()
    assert raw[:4] == b"QPFT"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 1
    assert raw[20:22] == (2).to_bytes(2, "little") and raw[22:24] == b"ab"
    assert len(raw) == 20 + 2 + 2 + 2 + 3 + 16


def test_mixed_dims_rejected(tmp_path):
    recs = [FeatureRecord("a", "r", np.zeros(4)), FeatureRecord("b", "r", np.zeros(5))]
    with pytest.raises(DimMismatchError):
        write_features(recs, tmp_path / "f.qpft")


def test_duplicate_pairs_rejected(tmp_path):
    recs = [FeatureRecord("a", "r", np.zeros(2)), FeatureRecord("a", "r", np.ones(2))]
    with pytest.raises(ValueError):
        write_features(recs, tmp_path / "f.qpft")


def test_non_finite_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_features([FeatureRecord("a", "r", np.array([np.nan]))], tmp_path / "f.qpft")


def test_512_dim_records_accepted(tmp_path):
    rng = np.random.default_rng(0)
    recs = [FeatureRecord("a", f"r.{i}", rng.standard_normal(512)) for i in range(4)]
    p = tmp_path / "f.qpft"
    write_features(recs, p)
    assert read_features(p).feature_dim == 512


def test_truncated_feature_file(tmp_path):
    p = tmp_path / "f.qpft"
    write_features([FeatureRecord("a", "r", np.arange(3.0))], p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError):
        read_features(p)


def test_wrong_magic(tmp_path):
    p = tmp_path / "f.qpft"
    p.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(FormatError):
        read_features(p)


def test_text_variant_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    recs = [FeatureRecord("img 1", "r.0", rng.standard_normal(3)), FeatureRecord("img 1", "r.1", rng.standard_normal(3))]
    p = tmp_path / "f.txt"
    write_features_text(recs, p)
    back = read_features_text(p)
    assert back.feature_dim == 3
    for a, b in zip(recs, back.records):
        assert a.vector.tobytes() == b.vector.tobytes()
