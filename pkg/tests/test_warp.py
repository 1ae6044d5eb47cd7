"""
Tests for correspondences, sampling and pair enumeration.
"""

import numpy as np
import pytest

from mvgc.camgeom import CameraIntrinsics, CameraView, RigidTransform, make_preset_rig, relative_transform
from mvgc.errors import DegenerateDepth, DimensionMismatch, InvalidSpec
from mvgc.warp import (
    DepthMap,
    RgbImage,
    ViewPair,
    bilinear_sample,
    depth_sample_partials,
    depth_to_points,
    enumerate_pairs,
    pair_views,
    sample_depth,
    warp_depth,
    zbuffer_occlusion,
)


# =============================================================================
# Fixtures
# =============================================================================


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics(fx=10.0, fy=10.0, cx=8.0, cy=6.0, width=16, height=12)


@pytest.fixture
def small_view(small_intrinsics):
    return CameraView("CAM", small_intrinsics, RigidTransform.identity())


def _uniform(value, shape=(12, 16)):
    return DepthMap(np.full(shape, value), np.ones(shape, dtype=bool))


# =============================================================================
# Rasters
# =============================================================================


def test_depth_map_rejects_nonpositive_valid_depth():
    """Should raise DegenerateDepth when a valid pixel holds 0."""
    values = np.ones((2, 2))
    values[0, 0] = 0.0
    with pytest.raises(DegenerateDepth):
        DepthMap(values, np.ones((2, 2), dtype=bool))


def test_depth_map_rejects_shape_mismatch():
    """Should raise DimensionMismatch for a mask of another shape."""
    with pytest.raises(DimensionMismatch):
        DepthMap(np.ones((2, 2)), np.ones((3, 2), dtype=bool))


def test_depth_map_from_array_masks_bad_values():
    """Should invalidate NaN and nonpositive entries."""
    depth = DepthMap.from_array(np.array([[1.0, np.nan], [-1.0, 2.0]]))
    assert depth.valid.tolist() == [[True, False], [False, True]]
    assert depth.values[0, 1] == 0.0


def test_rgb_image_rejects_out_of_range():
    """Should refuse values above 1."""
    with pytest.raises(DimensionMismatch):
        RgbImage(np.full((2, 2, 3), 1.5))


# =============================================================================
# Point clouds
# =============================================================================


def test_depth_to_points_uniform(small_view):
    """Should give every point the uniform depth as z."""
    cloud = depth_to_points(small_view, _uniform(4.0))
    assert len(cloud) == 12 * 16
    assert np.all(cloud.points[:, 2] == 4.0)


def test_depth_to_points_principal_point(small_view):
    """Should lift a lone principal-point pixel to (0, 0, 3)."""
    values = np.zeros((12, 16))
    valid = np.zeros((12, 16), dtype=bool)
    values[6, 8] = 3.0
    valid[6, 8] = True
    cloud = depth_to_points(small_view, DepthMap(values, valid))
    assert len(cloud) == 1
    assert np.allclose(cloud.points[0], [0.0, 0.0, 3.0])
    assert cloud.pixel_index[0] == 6 * 16 + 8


def test_depth_to_points_counts_valid(small_view):
    """Should emit one point per valid pixel in row-major order."""
    rng = np.random.default_rng(0)
    valid = rng.random((12, 16)) > 0.5
    cloud = depth_to_points(small_view, DepthMap(np.where(valid, 2.0, 0.0), valid))
    assert len(cloud) == valid.sum()
    assert np.all(np.diff(cloud.pixel_index) > 0)


def test_depth_to_points_shape_mismatch(small_view):
    """Should raise DimensionMismatch for a raster of another size."""
    with pytest.raises(DimensionMismatch):
        depth_to_points(small_view, _uniform(1.0, (4, 4)))


# =============================================================================
# Warping
# =============================================================================


def test_identity_warp_is_bit_exact(small_view):
    """Should return own pixel centers and depths for src = dst."""
    rng = np.random.default_rng(1)
    valid = rng.random((12, 16)) > 0.2
    depth = DepthMap(np.where(valid, rng.uniform(1, 50, (12, 16)), 0.0), valid)
    field = warp_depth(small_view, small_view, depth)
    vs, us = np.mgrid[0:12, 0:16].astype(np.float64)
    assert np.array_equal(field.mask, valid)
    assert np.array_equal(field.target_px[..., 0][valid], us[valid])
    assert np.array_equal(field.target_px[..., 1][valid], vs[valid])
    assert np.array_equal(field.warped_depth[valid], depth.values[valid])
    assert np.all(np.isnan(field.warped_depth[~valid]))


def test_forward_translation_reduces_depth(small_intrinsics, small_view):
    """Should report depth 8 for a uniform 10 m map seen from 2 m further ahead."""
    dst = CameraView("DST", small_intrinsics, RigidTransform(np.eye(3), [0.0, 0.0, 2.0]))
    field = warp_depth(small_view, dst, _uniform(10.0))
    assert field.count > 0
    assert np.allclose(field.warped_depth[field.mask], 8.0)
    assert not field.mask.all()


def test_warp_rejects_mismatched_depth(small_view):
    """Should raise DimensionMismatch for a depth raster of another size."""
    with pytest.raises(DimensionMismatch):
        warp_depth(small_view, small_view, _uniform(1.0, (6, 8)))


def test_mask_soundness(small_intrinsics, small_view):
    """Should return every masked correspondence to its source pixel within 1e-6 px."""
    rot = np.array(
        [[np.cos(0.1), 0.0, np.sin(0.1)], [0.0, 1.0, 0.0], [-np.sin(0.1), 0.0, np.cos(0.1)]]
    )
    dst = CameraView("DST", small_intrinsics, RigidTransform(rot, [0.3, -0.1, 0.2]))
    rng = np.random.default_rng(2)
    depth = DepthMap(rng.uniform(2.0, 30.0, (12, 16)), np.ones((12, 16), dtype=bool))
    field = warp_depth(small_view, dst, depth)
    assert field.count > 0

    back = relative_transform(dst, small_view)
    u, v = field.target_px[..., 0][field.mask], field.target_px[..., 1][field.mask]
    z = field.warped_depth[field.mask]
    points = np.stack([(u - 8.0) * z / 10.0, (v - 6.0) * z / 10.0, z], axis=-1)
    src_points = back.apply(points)
    su = 10.0 * src_points[:, 0] / src_points[:, 2] + 8.0
    sv = 10.0 * src_points[:, 1] / src_points[:, 2] + 6.0
    vs, us = np.mgrid[0:12, 0:16].astype(np.float64)
    assert np.max(np.abs(su - us[field.mask])) < 1e-6
    assert np.max(np.abs(sv - vs[field.mask])) < 1e-6


def test_fronto_plane_consistency(small_intrinsics, small_view):
    """Should sample the target plane depth equal to warped depth to 1e-9."""
    dst = CameraView("DST", small_intrinsics, RigidTransform(np.eye(3), [0.5, 0.0, 0.0]))
    field = warp_depth(small_view, dst, _uniform(10.0))
    sample, ok, _ = sample_depth(_uniform(10.0), field.target_px[..., 0], field.target_px[..., 1])
    both = field.mask & ok
    assert both.sum() > 0
    assert np.max(np.abs(sample[both] - field.warped_depth[both])) < 1e-9


def test_zbuffer_masks_hidden_point():
    """Should flag the farther of two points sharing a footprint."""
    u = np.array([3.5, 3.5, 6.0])
    v = np.array([2.5, 2.5, 6.0])
    depth = np.array([5.0, 10.0, 7.0])
    occluded = zbuffer_occlusion(u, v, depth, np.ones(3, dtype=bool), (8, 8), 0.05)
    assert occluded.tolist() == [False, True, False]


def test_zbuffer_tolerance_keeps_near_ties():
    """Should keep points within the relative tolerance of the nearest splat."""
    u = np.array([3.0, 3.0])
    v = np.array([3.0, 3.0])
    depth = np.array([10.0, 10.4])
    occluded = zbuffer_occlusion(u, v, depth, np.ones(2, dtype=bool), (8, 8), 0.05)
    assert not occluded.any()


# =============================================================================
# Bilinear sampling
# =============================================================================


def test_bilinear_integer_coordinate():
    """Should return the exact pixel value at integer coordinates."""
    values = np.arange(1, 13, dtype=np.float64).reshape(3, 4)
    depth = DepthMap(values, np.ones((3, 4), dtype=bool))
    value, ok = bilinear_sample(depth, (2.0, 1.0))
    assert ok
    assert value == 7.0


def test_bilinear_midpoint():
    """Should average two horizontal neighbours at their midpoint."""
    values = np.array([[2.0, 6.0], [1.0, 1.0]])
    depth = DepthMap(values, np.ones((2, 2), dtype=bool))
    value, ok = bilinear_sample(depth, (0.5, 0.0))
    assert ok
    assert value == pytest.approx(4.0)


def test_bilinear_last_pixel_in_bounds():
    """Should accept an integer coordinate on the last row and column."""
    depth = DepthMap(np.full((3, 4), 5.0), np.ones((3, 4), dtype=bool))
    value, ok = bilinear_sample(depth, (3.0, 2.0))
    assert ok
    assert value == 5.0


def test_bilinear_outside():
    """Should flag coordinates outside the raster."""
    depth = _uniform(1.0, (3, 4))
    _, ok = bilinear_sample(depth, (3.5, 1.0))
    assert not ok
    _, ok = bilinear_sample(depth, (-0.1, 1.0))
    assert not ok


def test_bilinear_invalid_neighbour():
    """Should flag depth samples touching an invalid pixel."""
    valid = np.ones((3, 4), dtype=bool)
    valid[1, 2] = False
    depth = DepthMap(np.where(valid, 1.0, 0.0), valid)
    _, ok = bilinear_sample(depth, (1.5, 0.5))
    assert not ok
    _, ok = bilinear_sample(depth, (0.5, 0.5))
    assert ok


def test_bilinear_rgb_midpoint():
    """Should interpolate every channel of an image."""
    values = np.zeros((2, 2, 3))
    values[0, 1] = [1.0, 0.5, 0.0]
    value, ok = bilinear_sample(RgbImage(values), (0.5, 0.0))
    assert ok
    assert np.allclose(value, [0.5, 0.25, 0.0])


def test_inverse_interpolation_exact_on_plane():
    """Should reproduce a perspective plane exactly with inverse-depth interpolation."""
    rows, cols = np.mgrid[0:8, 0:8].astype(np.float64)
    values = 1.0 / (0.01 * cols + 0.02 * rows + 0.1)
    depth = DepthMap(values, np.ones((8, 8), dtype=bool))
    u, v = np.array([2.3, 5.75]), np.array([1.6, 4.2])
    sample, ok, _ = sample_depth(depth, u, v, "inverse")
    assert ok.all()
    assert np.allclose(sample, 1.0 / (0.01 * u + 0.02 * v + 0.1), rtol=1e-12)
    linear, _, _ = sample_depth(depth, u, v, "linear")
    assert not np.allclose(linear, sample, rtol=1e-9)


def test_unknown_interpolation():
    """Should raise InvalidSpec for an unknown interpolation mode."""
    with pytest.raises(InvalidSpec):
        sample_depth(_uniform(1.0, (3, 3)), np.array([0.5]), np.array([0.5]), "cubic")


def test_depth_partials_match_finite_differences():
    """Should agree with central differences of the sampler in u and v."""
    rng = np.random.default_rng(4)
    depth = DepthMap(rng.uniform(2.0, 10.0, (6, 6)), np.ones((6, 6), dtype=bool))
    u, v, h = np.array([2.3]), np.array([3.6]), 1e-6
    for interp in ("linear", "inverse"):
        _, _, fp = sample_depth(depth, u, v, interp)
        ds_du, ds_dv, _ = depth_sample_partials(depth, fp, interp)
        up = sample_depth(depth, u + h, v, interp)[0]
        um = sample_depth(depth, u - h, v, interp)[0]
        vp = sample_depth(depth, u, v + h, interp)[0]
        vm = sample_depth(depth, u, v - h, interp)[0]
        assert ds_du[0] == pytest.approx((up - um)[0] / (2 * h), rel=1e-5)
        assert ds_dv[0] == pytest.approx((vp - vm)[0] / (2 * h), rel=1e-5)


# =============================================================================
# Pair enumeration
# =============================================================================


def test_enumerate_mono_single_frame_is_empty():
    """Should yield no pairs for one camera and one frame."""
    assert enumerate_pairs(make_preset_rig("mono1"), 1, 0) == []


def test_enumerate_nuscenes6_single_frame():
    """Should yield both directions of the six ring adjacencies."""
    pairs = enumerate_pairs(make_preset_rig("nuscenes6"), 1, 0)
    assert len(pairs) == 12
    assert not any(p.temporal for p in pairs)


def test_enumerate_nuscenes6_two_frames():
    """Should yield 24 spatial then 12 temporal pairs."""
    rig = make_preset_rig("nuscenes6")
    pairs = enumerate_pairs(rig, 2, 1)
    assert len(pairs) == 36
    assert [p.temporal for p in pairs] == [False] * 24 + [True] * 12
    assert len({p.pair_id for p in pairs}) == 36

    brute = {
        (a, b, f, f) for f in range(2) for x, y in rig.adjacency for a, b in ((x, y), (y, x))
    } | {(v, v, f, g) for v in rig.ids for f in range(2) for g in range(2) if f != g}
    assert {(p.src_view, p.dst_view, p.src_frame, p.dst_frame) for p in pairs} == brute


def test_enumerate_is_deterministic():
    """Should return the same order on every call."""
    rig = make_preset_rig("nuscenes6")
    assert enumerate_pairs(rig, 3, 2) == enumerate_pairs(rig, 3, 2)


def test_enumerate_rejects_negative_window():
    """Should raise InvalidSpec for a negative window."""
    with pytest.raises(InvalidSpec):
        enumerate_pairs(make_preset_rig("mono1"), 2, -1)


def test_pair_id_format():
    """Should render pairs as VIEW@frame->VIEW@frame."""
    assert ViewPair("CAM_A", "CAM_B", 0, 1).pair_id == "CAM_A@0->CAM_B@1"


def test_pair_views_pose_temporal_pairs():
    """Should move temporal views into the world frame with the ego poses."""
    rig = make_preset_rig("mono1")
    poses = [RigidTransform.identity(), RigidTransform(np.eye(3), [1.0, 0.0, 0.0])]
    src, dst = pair_views(rig, ViewPair("CAM_FRONT", "CAM_FRONT", 0, 1), poses)
    assert np.allclose(dst.center - src.center, [1.0, 0.0, 0.0])
    rel = relative_transform(src, dst)
    # the camera moved 1 m along its optical axis
    assert np.allclose(rel.translation, [0.0, 0.0, -1.0])
