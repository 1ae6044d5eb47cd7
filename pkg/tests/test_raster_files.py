"""
Tests for the PFM/PGM/PPM raster codecs.
"""

import numpy as np
import pytest

from mvgc.errors import DimensionMismatch
from mvgc.raster_files import (
    depth_paths,
    read_depth,
    read_pfm,
    read_pgm_mask,
    read_ppm,
    write_depth,
    write_pfm,
    write_pgm_mask,
    write_ppm,
)
from mvgc.warp import DepthMap, RgbImage


def test_pfm_keeps_float32_values(tmp_path):
    """Should restore float32-representable values exactly and keep row order."""
    values = np.arange(12, dtype=np.float32).reshape(3, 4) * 0.5 + 1.0
    path = write_pfm(tmp_path / "d.pfm", values)
    restored = read_pfm(path)
    assert restored.shape == (3, 4)
    assert restored.dtype == np.float64
    assert np.array_equal(restored, values.astype(np.float64))


def test_pfm_header_is_little_endian(tmp_path):
    """Should write a grayscale header with a negative scale."""
    path = write_pfm(tmp_path / "d.pfm", np.ones((2, 5)))
    assert path.read_bytes().startswith(b"Pf\n5 2\n-1.0\n")
    assert path.stat().st_size == len(b"Pf\n5 2\n-1.0\n") + 2 * 5 * 4


def test_pfm_rejects_non_2d(tmp_path):
    """Should refuse arrays that are not 2D."""
    with pytest.raises(DimensionMismatch):
        write_pfm(tmp_path / "d.pfm", np.ones((2, 2, 2)))


def test_pfm_rejects_foreign_magic(tmp_path):
    """Should raise DimensionMismatch for a file that is not PFM."""
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(DimensionMismatch):
        read_pfm(path)


def test_truncated_header(tmp_path):
    """Should raise DimensionMismatch when the header ends early."""
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n4")
    with pytest.raises(DimensionMismatch):
        read_pgm_mask(path)


def test_truncated_payload(tmp_path):
    """Should raise DimensionMismatch when the pixel data ends early."""
    pfm = write_pfm(tmp_path / "d.pfm", np.ones((3, 4)))
    pfm.write_bytes(pfm.read_bytes()[:-5])
    with pytest.raises(DimensionMismatch, match="truncated payload"):
        read_pfm(pfm)

    pgm = write_pgm_mask(tmp_path / "m.pgm", np.ones((3, 4), dtype=bool))
    pgm.write_bytes(pgm.read_bytes()[:-1])
    with pytest.raises(DimensionMismatch, match="truncated payload"):
        read_pgm_mask(pgm)

    ppm = write_ppm(tmp_path / "i.ppm", RgbImage(np.full((3, 4, 3), 0.5)))
    ppm.write_bytes(ppm.read_bytes()[:-2])
    with pytest.raises(DimensionMismatch, match="truncated payload"):
        read_ppm(ppm)


def test_mask_round_trip(tmp_path):
    """Should keep every mask bit."""
    mask = np.random.default_rng(0).random((5, 7)) > 0.5
    path = write_pgm_mask(tmp_path / "m.mask.pgm", mask)
    assert np.array_equal(read_pgm_mask(path), mask)


def test_ppm_quantises_to_8_bits(tmp_path):
    """Should restore images within half a quantisation step."""
    image = RgbImage(np.random.default_rng(1).random((4, 6, 3)))
    restored = read_ppm(write_ppm(tmp_path / "i.ppm", image))
    assert restored.values.shape == (4, 6, 3)
    assert np.max(np.abs(restored.values - image.values)) <= 0.5 / 255.0 + 1e-12


def test_header_comments_are_skipped(tmp_path):
    """Should accept comment lines inside the header."""
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# written by hand\n2 1\n255\n" + bytes([255, 0]))
    assert read_pgm_mask(path).tolist() == [[True, False]]


def test_depth_paths_siblings(tmp_path):
    """Should place the mask next to the depth file."""
    pfm, mask = depth_paths(tmp_path / "CAM_FRONT")
    assert pfm.name == "CAM_FRONT.pfm"
    assert mask.name == "CAM_FRONT.mask.pgm"


def test_depth_round_trip_with_mask(tmp_path):
    """Should restore validity from the mask and zero invalid depths."""
    values = np.array([[1.5, 2.0], [3.25, 4.0]])
    valid = np.array([[True, False], [True, True]])
    write_depth(tmp_path / "v", DepthMap(values, valid))
    restored = read_depth(tmp_path / "v")
    assert np.array_equal(restored.valid, valid)
    assert np.array_equal(restored.values[valid], values[valid])
    assert restored.values[0, 1] == 0.0


def test_depth_without_mask_uses_positive_values(tmp_path):
    """Should treat positive depths as valid when no mask file exists."""
    write_pfm(tmp_path / "v.pfm", np.array([[0.0, 2.0]]))
    restored = read_depth(tmp_path / "v")
    assert restored.valid.tolist() == [[False, True]]


def test_depth_mask_size_disagreement(tmp_path):
    """Should raise DimensionMismatch when mask and depth sizes differ."""
    write_pfm(tmp_path / "v.pfm", np.ones((2, 2)))
    write_pgm_mask(tmp_path / "v.mask.pgm", np.ones((3, 3), dtype=bool))
    with pytest.raises(DimensionMismatch):
        read_depth(tmp_path / "v")
