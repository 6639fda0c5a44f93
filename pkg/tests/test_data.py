import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from usi.data import (
    Dataset,
    DatasetFormatError,
    SyntheticSpec,
    encode_idx_images,
    encode_idx_labels,
    generate_synthetic,
    load_csv,
    load_idx,
    nearest_prototype_accuracy,
    parse_idx_images,
    parse_idx_labels,
    resize_center_crop,
)


def reference_idx(buf):
    """Independent reader: walks the header byte by byte."""
    magic = int.from_bytes(buf[0:4], "big")
    ndim = buf[3]
    dims = [int.from_bytes(buf[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    body = list(buf[4 + 4 * ndim :])
    return magic, dims, body


# two 2x2 images, hand-written
FIXTURE = bytes.fromhex("00000803" "00000002" "00000002" "00000002") + bytes([0, 255, 128, 1, 7, 8, 9, 10])


def test_fixture_against_reference_reader():
    arr = parse_idx_images(FIXTURE)
    magic, dims, body = reference_idx(FIXTURE)
    assert magic == 0x803 and list(arr.shape) == dims == [2, 2, 2]
    assert arr.ravel().tolist() == body


def test_load_idx_scales_to_unit_interval(tmp_path):
    (tmp_path / "i").write_bytes(FIXTURE)
    (tmp_path / "l").write_bytes(encode_idx_labels(np.array([1, 0])))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (2, 1, 2, 2)
    assert ds.images[0, 0, 0, 1] == 1.0 and ds.images[0, 0, 0, 0] == 0.0
    assert ds.labels.tolist() == [1, 0]


@pytest.mark.parametrize("cut", [0, 2, 4, 10, 15, 16, 23])
def test_truncations_name_offset(cut):
    with pytest.raises(DatasetFormatError, match=f"byte offset {cut}"):
        parse_idx_images(FIXTURE[:cut])


def test_bad_magic_and_trailing():
    with pytest.raises(DatasetFormatError, match="bad magic"):
        parse_idx_labels(FIXTURE)
    with pytest.raises(DatasetFormatError, match="trailing"):
        parse_idx_images(FIXTURE + b"\0")


def test_count_mismatch(tmp_path):
    (tmp_path / "i").write_bytes(FIXTURE)
    (tmp_path / "l").write_bytes(encode_idx_labels(np.array([1, 0, 1])))
    with pytest.raises(DatasetFormatError, match="count mismatch"):
        load_idx(tmp_path / "i", tmp_path / "l")


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_fuzzed_bytes_never_crash_unexpectedly(buf):
    try:
        arr = parse_idx_images(buf)
    except DatasetFormatError:
        return
    magic, dims, body = reference_idx(buf)
    assert list(arr.shape) == dims and arr.ravel().tolist() == body


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_idx_round_trip(n, h, w, seed):
    imgs = np.random.default_rng(seed).integers(0, 256, size=(n, h, w))
    np.testing.assert_array_equal(parse_idx_images(encode_idx_images(imgs)), imgs)


def test_csv_loading(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("1,0,255,0,255\n0,255,0,255,0\n")
    ds = load_csv(path, (1, 2, 2))
    assert ds.labels.tolist() == [1, 0] and ds.images.max() == 1.0
    with pytest.raises(DatasetFormatError, match="columns"):
        load_csv(path, (1, 3, 3))


def test_dataset_validation():
    with pytest.raises(DatasetFormatError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 5]), 3)


def test_synthetic_is_seeded_and_split():
    spec = SyntheticSpec(num_classes=4, samples_per_class=20, image_size=8, seed=5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    np.testing.assert_array_equal(a[0].images, b[0].images)
    assert len(a[0]) + len(a[1]) == 80 and len(a[1]) == 8
    assert a[0].images.min() >= 0 and a[0].images.max() <= 1


def test_noise_free_task_is_solved_by_prototypes():
    spec = SyntheticSpec(num_classes=5, samples_per_class=20, image_size=8, noise_sigma=0.0)
    _, val, protos = generate_synthetic(spec)
    assert nearest_prototype_accuracy(val, protos) == 1.0


def test_default_floor_is_strictly_between_chance_and_one():
    spec = SyntheticSpec(image_size=12, noise_sigma=0.4, max_shift=6, smoothness=1.0)
    _, val, protos = generate_synthetic(spec)
    assert 0.1 < nearest_prototype_accuracy(val, protos) < 1.0


def test_center_crop_geometry():
    img = np.arange(64.0).reshape(1, 1, 8, 8)
    assert resize_center_crop(img, 8, 1.0).shape == (1, 1, 8, 8)
    np.testing.assert_array_equal(resize_center_crop(img, 8, 1.0), img)
    assert resize_center_crop(img, 6, 0.75).shape == (1, 1, 6, 6)
