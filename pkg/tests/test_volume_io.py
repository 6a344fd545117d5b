"""Tests for :mod:`volume_io`"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import (
    InvalidSpacingError,
    MalformedHeaderError,
    ShapeError,
    SizeMismatchError,
    SlabError,
    VolumeNotFoundError,
)
from volume_io import (
    HuVolume,
    extract_slab,
    load_float_image,
    load_volume,
    resample_z,
    resize_xy,
    round_half_away,
    save_float_image,
    save_volume,
)


def _write_raw(path, dims, spacing, payload: bytes):
    header = "HUVOL 1\ndims {} {} {}\nspacing {} {} {}\n\n".format(*dims, *spacing)
    path.write_bytes(header.encode("ascii") + payload)
    return path


def test_load_minimal_volume(tmp_path):
    voxels = np.arange(8, dtype="<i2")
    path = _write_raw(tmp_path / "v.huvol", (2, 2, 2), (2, 1, 1), voxels.tobytes())

    vol = load_volume(path)

    assert vol.shape == (2, 2, 2)
    assert vol.spacing_mm == (2.0, 1.0, 1.0)
    assert vol.voxels.dtype == np.int16
    np.testing.assert_array_equal(vol.voxels.ravel(), voxels)


def test_load_rejects_short_payload(tmp_path):
    path = _write_raw(tmp_path / "v.huvol", (2, 2, 2), (2, 1, 1), b"\x00" * 15)
    with pytest.raises(SizeMismatchError):
        load_volume(path)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "v.huvol"
    path.write_bytes(b"NOTVOL 1\ndims 1 1 1\nspacing 1 1 1\n\n\x00\x00")
    with pytest.raises(MalformedHeaderError):
        load_volume(path)


def test_load_rejects_non_positive_spacing(tmp_path):
    path = _write_raw(tmp_path / "v.huvol", (1, 1, 1), (0, 1, 1), b"\x00\x00")
    with pytest.raises(InvalidSpacingError):
        load_volume(path)


def test_load_missing_file(tmp_path):
    with pytest.raises(VolumeNotFoundError):
        load_volume(tmp_path / "missing.huvol")


def test_round_trip_random_volume(tmp_path):
    rng = np.random.default_rng(42)
    voxels = rng.integers(-1024, 3072, size=(4, 5, 6)).astype(np.int16)
    vol = HuVolume(voxels, (2.5, 0.7, 0.7))

    path = tmp_path / "r.huvol"
    save_volume(vol, path)
    loaded = load_volume(path)

    np.testing.assert_array_equal(loaded.voxels, voxels)
    assert loaded.spacing_mm == vol.spacing_mm


def test_saved_payload_length(tmp_path):
    vol = HuVolume(np.zeros((3, 4, 5), dtype=np.int16), (1.0, 1.0, 1.0))
    path = tmp_path / "z.huvol"
    save_volume(vol, path)
    payload = path.read_bytes().split(b"\n\n", 1)[1]
    assert len(payload) == 2 * 3 * 4 * 5


def test_single_voxel_round_trip(tmp_path):
    path = tmp_path / "one.huvol"
    save_volume(HuVolume(np.zeros((1, 1, 1), dtype=np.int16), (1.0, 1.0, 1.0)), path)
    assert int(load_volume(path).voxels[0, 0, 0]) == 0


def test_out_of_clinical_range_is_a_warning(tmp_path, caplog):
    path = tmp_path / "hot.huvol"
    save_volume(HuVolume(np.full((1, 2, 2), 5000, dtype=np.int16), (1.0, 1.0, 1.0)), path)
    vol = load_volume(path)
    assert vol.voxels.max() == 5000
    assert any("clinical range" in record.message for record in caplog.records)


def test_float_image_round_trip(tmp_path):
    pixels = np.random.default_rng(1).random((3, 4, 5)).astype(np.float32)
    path = tmp_path / "img.fimg"
    save_float_image(pixels, path)
    np.testing.assert_array_equal(load_float_image(path), pixels)


def test_volume_rejects_2d_array():
    with pytest.raises(ShapeError):
        HuVolume(np.zeros((4, 4), dtype=np.int16), (1.0, 1.0, 1.0))


# =============================================================================
# RESAMPLING
# =============================================================================

def test_round_half_away():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, -0.5, -1.5, 2.4])),
                                  [1.0, 2.0, -1.0, -2.0, 2.0])


def test_resample_identity():
    voxels = np.random.default_rng(0).integers(-1000, 1000, size=(6, 3, 3)).astype(np.int16)
    vol = HuVolume(voxels, (2.0, 1.0, 1.0))
    out = resample_z(vol, 2.0)
    np.testing.assert_array_equal(out.voxels, voxels)


def test_resample_linear_midpoint():
    voxels = np.stack([np.zeros((2, 2)), np.full((2, 2), 100)]).astype(np.int16)
    out = resample_z(HuVolume(voxels, (4.0, 1.0, 1.0)), 2.0)
    assert out.num_slices == 3
    assert out.spacing_mm[0] == 2.0
    np.testing.assert_array_equal(out.voxels[1], np.full((2, 2), 50))


def test_resample_matches_per_voxel_interpolation():
    rng = np.random.default_rng(3)
    voxels = rng.integers(-1000, 1000, size=(5, 3, 4)).astype(np.int16)
    out = resample_z(HuVolume(voxels, (3.0, 1.0, 1.0)), 2.0)

    source = np.arange(5) * 3.0
    targets = np.arange(out.num_slices) * 2.0
    for y in range(3):
        for x in range(4):
            expected = np.interp(targets, source, voxels[:, y, x].astype(float))
            for k, value in enumerate(expected):
                rounded = math.copysign(math.floor(abs(value) + 0.5), value)
                assert out.voxels[k, y, x] == rounded


def test_resample_rejects_bad_target():
    vol = HuVolume(np.zeros((2, 1, 1), dtype=np.int16), (1.0, 1.0, 1.0))
    with pytest.raises(InvalidSpacingError):
        resample_z(vol, 0.0)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(2, 8),
    st.floats(0.5, 5.0),
    st.floats(0.3, 6.0),
    st.integers(0, 2**32 - 1),
)
def test_resample_stays_within_bracketing_slices(nz, source_z, target_z, seed):
    voxels = np.random.default_rng(seed).integers(-1024, 3071, size=(nz, 2, 3)).astype(np.int16)
    out = resample_z(HuVolume(voxels, (source_z, 1.0, 1.0)), target_z)
    for k in range(out.num_slices):
        below = min(int(np.floor(k * target_z / source_z)), nz - 2)
        pair = voxels[below:below + 2].astype(np.int64)
        assert np.all(out.voxels[k] >= pair.min(axis=0) - 0.5)
        assert np.all(out.voxels[k] <= pair.max(axis=0) + 0.5)


def test_resize_identity():
    image = np.random.default_rng(0).random((80, 80))
    result = resize_xy(image, 80)
    assert result.scale == 1.0
    np.testing.assert_array_equal(result.pixels, image)


def test_resize_aspect_arithmetic():
    result = resize_xy(np.zeros((400, 200)), 800)
    assert result.pixels.shape == (800, 400)
    assert result.scale == 2.0


def test_resize_constant_stays_constant():
    result = resize_xy(np.full((37, 91), 0.3125), 800)
    assert result.pixels.shape[1] == 800
    np.testing.assert_allclose(result.pixels, 0.3125, rtol=0, atol=1e-12)


def test_resize_rejects_empty():
    with pytest.raises(ShapeError):
        resize_xy(np.zeros((0, 4)), 8)


@pytest.mark.parametrize("nz, center, n_ctx, expected", [
    (5, 2, 3, (1, 2, 3)),
    (5, 0, 3, (0, 0, 1)),
    (5, 4, 3, (3, 4, 4)),
    (20, 10, 9, tuple(range(6, 15))),
])
def test_extract_slab_indices(nz, center, n_ctx, expected):
    voxels = np.broadcast_to(np.arange(nz, dtype=np.int16)[:, None, None], (nz, 2, 2))
    slab = extract_slab(HuVolume(voxels, (1.0, 1.0, 1.0)), center, n_ctx)
    assert slab.source_indices == expected
    np.testing.assert_array_equal(slab.slices[:, 0, 0], expected)


@pytest.mark.parametrize("center, n_ctx", [(2, 4), (5, 3), (-1, 3)])
def test_extract_slab_rejects(center, n_ctx):
    vol = HuVolume(np.zeros((5, 2, 2), dtype=np.int16), (1.0, 1.0, 1.0))
    with pytest.raises(SlabError):
        extract_slab(vol, center, n_ctx)
