"""
Tests for the finite-difference gradient verifier.
"""

import numpy as np
import pyarrow as pa
import pytest

from mvgc.camgeom import CameraIntrinsics, CameraRig, CameraView, RigidTransform, make_preset_rig
from mvgc.consist import VISIBILITY_MASKED, LossConfig, LossWeights, perturbed_depths
from mvgc.errors import InvalidSpec, NoSamples
from mvgc.gradcheck import finite_difference_check
from mvgc.synthrig import SceneSpec, bundle_poses, bundle_rasters, render_scene
from mvgc.warp import DepthMap, RgbImage, ViewPair, enumerate_pairs


# =============================================================================
# Fixtures
# =============================================================================


@pytest.fixture(scope="module")
def scene():
    rig = make_preset_rig("front3", width=176, height=64)
    bundles = render_scene(rig, SceneSpec(seed=5, frames=2))
    depths, images = bundle_rasters(bundles)
    return rig, bundle_poses(bundles), perturbed_depths(depths, seed=5), images


# =============================================================================
# Check
# =============================================================================


def test_gradient_matches_central_differences(scene):
    """Should agree with central differences on spatial and temporal pairs."""
    rig, poses, depths, images = scene
    report = finite_difference_check(
        rig, enumerate_pairs(rig, 2, 1), depths, images, eps=1e-3, samples=60, seed=1, ego_poses=poses
    )
    assert len(report.samples) > 0
    assert report.max_rel_err < 1e-4
    assert report.passed


def test_gradient_with_inverse_interpolation(scene):
    """Should stay exact with perspective-correct depth sampling and edge rejection."""
    rig, poses, depths, images = scene
    config = LossConfig(depth_interp="inverse", edge_ratio=1.03)
    report = finite_difference_check(
        rig, enumerate_pairs(rig, 1, 0), depths, images, samples=40, seed=2, config=config
    )
    assert report.passed


def test_gradient_with_sum_reduction_and_weights(scene):
    """Should honour the sum reduction and unequal loss weights."""
    rig, poses, depths, images = scene
    report = finite_difference_check(
        rig,
        enumerate_pairs(rig, 1, 0),
        depths,
        images,
        weights=LossWeights(1.0, 0.3, 2.0),
        samples=40,
        seed=3,
        config=LossConfig(reduction="sum"),
    )
    assert report.passed


def test_identity_warp_uniform_offset_is_exact():
    """Should reproduce the exact +-1/N gradients of a same-pose pair to 1e-8."""
    intr = CameraIntrinsics(fx=20.0, fy=20.0, cx=15.0, cy=11.0, width=32, height=24)
    rig = CameraRig(
        (CameraView("A", intr, RigidTransform.identity()), CameraView("B", intr, RigidTransform.identity()))
    )
    base = np.random.default_rng(8).uniform(4.0, 12.0, (24, 32))
    full = np.ones((24, 32), dtype=bool)
    depths = {("A", 0): DepthMap(base + 0.5, full), ("B", 0): DepthMap(base, full)}
    gray = RgbImage(np.full((24, 32, 3), 0.5))
    images = {("A", 0): gray, ("B", 0): gray}

    report = finite_difference_check(
        rig, [ViewPair("A", "B", 0, 0)], depths, images, weights=LossWeights(0.0, 1.0, 0.0), samples=50, seed=8
    )
    assert len(report.samples) == 50
    assert report.max_rel_err < 1e-8
    for sample in report.samples:
        expected = 1.0 / (24 * 32) if sample.view == "A" else -1.0 / (24 * 32)
        assert sample.analytic == pytest.approx(expected, rel=1e-9)


def test_check_is_deterministic(scene):
    """Should pick the same pixels and errors for the same seed."""
    rig, poses, depths, images = scene
    pairs = enumerate_pairs(rig, 1, 0)
    a = finite_difference_check(rig, pairs, depths, images, samples=10, seed=4)
    b = finite_difference_check(rig, pairs, depths, images, samples=10, seed=4)
    assert [(s.view, s.row, s.col, s.rel_err) for s in a.samples] == [
        (s.view, s.row, s.col, s.rel_err) for s in b.samples
    ]


def test_report_table_and_dict(scene):
    """Should export one table row per checked pixel and a summary dict."""
    rig, poses, depths, images = scene
    report = finite_difference_check(rig, enumerate_pairs(rig, 1, 0), depths, images, samples=5, seed=6)
    table = report.to_table()
    assert isinstance(table, pa.Table)
    assert table.num_rows == len(report.samples)
    assert table.column_names == ["view", "frame", "row", "col", "depth", "analytic", "numeric", "rel_err"]
    summary = report.to_dict()
    assert summary["checked"] == len(report.samples)
    assert summary["worst"]["rel_err"] == report.max_rel_err


def test_rejects_zbuffer_profile(scene):
    """Should refuse z-buffered visibility."""
    rig, poses, depths, images = scene
    with pytest.raises(InvalidSpec):
        finite_difference_check(rig, enumerate_pairs(rig, 1, 0), depths, images, config=VISIBILITY_MASKED)


def test_rejects_bad_eps_and_samples(scene):
    """Should refuse nonpositive eps and zero samples."""
    rig, poses, depths, images = scene
    pairs = enumerate_pairs(rig, 1, 0)
    with pytest.raises(InvalidSpec):
        finite_difference_check(rig, pairs, depths, images, eps=0.0)
    with pytest.raises(NoSamples):
        finite_difference_check(rig, pairs, depths, images, samples=0)


def test_no_pairs_means_no_samples(scene):
    """Should raise NoSamples when no pixel takes part in a pair."""
    rig, poses, depths, images = scene
    with pytest.raises(NoSamples):
        finite_difference_check(rig, [], depths, images, samples=5)
