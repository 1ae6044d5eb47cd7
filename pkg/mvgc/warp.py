"""Correspondence engine: warp a source depth map into a target view.

For every valid source pixel p with depth d the warp lifts p to the source
camera frame, maps it through ``relative_transform(src, dst)`` and projects it
into the target camera, giving the subpixel target location p* and the depth
D* of the same 3D point as seen by the target camera.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from mvgc.camgeom import (
    MIN_DEPTH,
    CameraRig,
    CameraView,
    RigidTransform,
    posed_view,
    relative_transform,
)
from mvgc.errors import DegenerateDepth, DimensionMismatch, InvalidSpec

logger = logging.getLogger(__name__)


DEPTH_INTERP_MODES = ("linear", "inverse")


# =============================================================================
# Rasters
# =============================================================================


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel camera-z depth in meters with a validity mask.

    Invalid entries are stored as 0 so that zero-weight neighbours never
    poison an interpolation.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise DimensionMismatch(
                f"depth values {values.shape} and mask {valid.shape} must be equal 2D shapes"
            )
        good = np.isfinite(values) & (values > 0)
        if np.any(valid & ~good):
            raise DegenerateDepth("valid depth pixels must be finite and positive")
        values[~valid] = 0.0
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, values: np.ndarray, valid: Optional[np.ndarray] = None) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        good = np.isfinite(values) & (values > 0)
        if valid is None:
            valid = good
        return cls(np.where(good, values, 0.0), np.asarray(valid, dtype=bool) & good)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def scaled(self, factor: float) -> "DepthMap":
        return DepthMap(self.values * factor, self.valid)


@dataclass(frozen=True, eq=False)
class RgbImage:
    """Linear RGB image with values in [0, 1], shape (H, W, 3)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 3:
            raise DimensionMismatch(f"expected an (H, W, 3) image, got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise DimensionMismatch("image values must be finite and within [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[:2]


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) camera frame
    pixel_index: np.ndarray  # (N,) row-major source pixel index

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class CorrespondenceField:
    """Subpixel target coordinates p*, warped depth D* and validity.

    ``target_px[..., 0]`` is the column (u) and ``target_px[..., 1]`` the row
    (v). Entries outside ``mask`` are NaN.
    """

    target_px: np.ndarray
    warped_depth: np.ndarray
    mask: np.ndarray
    target_shape: Tuple[int, int]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def coverage(self) -> float:
        """Fraction of source pixels with a correspondence."""
        return float(self.mask.mean()) if self.mask.size else 0.0


def _check_view_raster(view: CameraView, shape: Tuple[int, int], what: str) -> None:
    if tuple(shape) != view.intrinsics.shape:
        raise DimensionMismatch(
            f"{what} raster {tuple(shape)} does not match view {view.id} "
            f"{view.intrinsics.shape}"
        )


# =============================================================================
# Bilinear sampling
# =============================================================================


@dataclass(frozen=True, eq=False)
class BilinearFootprint:
    """Neighbour indices and weights of a batch of subpixel coordinates.

    Only neighbours carrying a nonzero weight belong to the footprint, so an
    integer coordinate on the last row or column is still in bounds.
    """

    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    inside: np.ndarray

    @property
    def weights(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Weights of (y0,x0), (y0,x1), (y1,x0), (y1,x1)."""
        gx, gy = 1.0 - self.fx, 1.0 - self.fy
        return gx * gy, self.fx * gy, gx * self.fy, self.fx * self.fy

    @property
    def corners(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(self.y0, self.x0), (self.y0, self.x1), (self.y1, self.x0), (self.y1, self.x1)]

    def used(self) -> List[np.ndarray]:
        """Whether each corner carries weight."""
        has_x, has_y = self.fx > 0, self.fy > 0
        return [np.ones_like(has_x), has_x, has_y, has_x & has_y]

    def single(self) -> np.ndarray:
        return (self.fx == 0) & (self.fy == 0)

    def take(self, selector: np.ndarray) -> "BilinearFootprint":
        """Footprint of the selected samples only."""
        return BilinearFootprint(
            self.x0[selector], self.x1[selector], self.y0[selector], self.y1[selector],
            self.fx[selector], self.fy[selector], self.inside[selector],
        )


def bilinear_footprint(shape: Tuple[int, int], u: np.ndarray, v: np.ndarray) -> BilinearFootprint:
    height, width = shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (v >= 0) & (u <= width - 1) & (v <= height - 1)

    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    fx = uc - x0
    fy = vc - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return BilinearFootprint(x0, x1, y0, y1, fx, fy, inside)


def footprint_valid(fp: BilinearFootprint, valid: np.ndarray) -> np.ndarray:
    """True where every weighted neighbour is a valid pixel."""
    ok = fp.inside.copy()
    for (rows, cols), used in zip(fp.corners, fp.used()):
        ok &= valid[rows, cols] | ~used
    return ok


def sample_depth(
    depth: DepthMap, u: np.ndarray, v: np.ndarray, interp: str = "linear"
) -> Tuple[np.ndarray, np.ndarray, BilinearFootprint]:
    """Vectorised depth sampling: values, in-bounds flags and the footprint.

    ``interp="inverse"`` interpolates 1/D, which reproduces planar surfaces
    exactly under perspective projection.
    """
    if interp not in DEPTH_INTERP_MODES:
        raise InvalidSpec(f"unknown depth interpolation {interp!r}")

    fp = bilinear_footprint(depth.shape, u, v)
    ok = footprint_valid(fp, depth.valid)
    corners = [depth.values[rows, cols] for rows, cols in fp.corners]
    weights = fp.weights

    if interp == "linear":
        value = sum(w * d for w, d in zip(weights, corners))
    else:
        inverse = [np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0) for d in corners]
        q = sum(w * q_k for w, q_k in zip(weights, inverse))
        value = np.where(q > 0, 1.0 / np.where(q > 0, q, 1.0), 0.0)
        value = np.where(fp.single(), corners[0], value)

    return np.where(ok, value, np.nan), ok, fp


def depth_sample_partials(
    depth: DepthMap, fp: BilinearFootprint, interp: str = "linear"
) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
    """Partials of a depth sample w.r.t. u, v and each footprint corner value."""
    corners = [depth.values[rows, cols] for rows, cols in fp.corners]
    gx, gy = 1.0 - fp.fx, 1.0 - fp.fy

    if interp == "linear":
        d00, d10, d01, d11 = corners
        ds_du = gy * (d10 - d00) + fp.fy * (d11 - d01)
        ds_dv = gx * (d01 - d00) + fp.fx * (d11 - d10)
        return ds_du, ds_dv, list(fp.weights)

    q = [np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0) for d in corners]
    q00, q10, q01, q11 = q
    Q = sum(w * q_k for w, q_k in zip(fp.weights, q))
    s = np.where(Q > 0, 1.0 / np.where(Q > 0, Q, 1.0), 0.0)
    s2 = s * s
    dq_du = gy * (q10 - q00) + fp.fy * (q11 - q01)
    dq_dv = gx * (q01 - q00) + fp.fx * (q11 - q10)
    dcorner = [s2 * w * q_k * q_k for w, q_k in zip(fp.weights, q)]
    return -s2 * dq_du, -s2 * dq_dv, dcorner


def sample_image(image: RgbImage, u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray, BilinearFootprint]:
    """Vectorised RGB sampling; returns (..., 3) values and in-bounds flags."""
    fp = bilinear_footprint(image.shape, u, v)
    value = sum(
        w[..., None] * image.values[rows, cols]
        for w, (rows, cols) in zip(fp.weights, fp.corners)
    )
    return np.where(fp.inside[..., None], value, np.nan), fp.inside, fp


def image_sample_partials(image: RgbImage, fp: BilinearFootprint) -> Tuple[np.ndarray, np.ndarray]:
    """Partials of an RGB sample w.r.t. u and v, shape (..., 3) each."""
    i00, i10, i01, i11 = [image.values[rows, cols] for rows, cols in fp.corners]
    fx, fy = fp.fx[..., None], fp.fy[..., None]
    di_du = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01)
    di_dv = (1.0 - fx) * (i01 - i00) + fx * (i11 - i10)
    return di_du, di_dv


def bilinear_sample(
    raster: Union[DepthMap, RgbImage], at: Sequence[float]
) -> Tuple[Union[float, np.ndarray], bool]:
    """Sample a raster at one subpixel location ``(u, v)``.

    Returns the interpolated value and whether the sample may be used; depth
    samples touching an invalid pixel are flagged out.
    """
    u = np.array([float(at[0])])
    v = np.array([float(at[1])])
    if isinstance(raster, DepthMap):
        value, ok, _ = sample_depth(raster, u, v)
        return float(value[0]), bool(ok[0])
    value, ok, _ = sample_image(raster, u, v)
    return value[0], bool(ok[0])


# =============================================================================
# Warping
# =============================================================================


def depth_to_points(view: CameraView, depth: DepthMap) -> PointCloud:
    """Backproject every valid pixel, row-major."""
    _check_view_raster(view, depth.shape, "depth")
    intr = view.intrinsics
    rows, cols = np.nonzero(depth.valid)
    d = depth.values[rows, cols]
    points = np.stack(
        [(cols - intr.cx) * d / intr.fx, (rows - intr.cy) * d / intr.fy, d], axis=-1
    )
    return PointCloud(points.reshape(-1, 3), rows * intr.width + cols)


@dataclass(frozen=True, eq=False)
class PixelWarp:
    """Warp of an arbitrary set of source pixels (shared by losses and gradients)."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    ahead: np.ndarray
    rotated_ray: np.ndarray  # R @ K^-1 p, the derivative of the target point w.r.t. depth
    target_point: np.ndarray
    identity: bool


def warp_pixels(
    src: CameraView, dst: CameraView, us: np.ndarray, vs: np.ndarray, depths: np.ndarray
) -> PixelWarp:
    """Warp source pixels (us, vs) with depths into the destination camera."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    rel = relative_transform(src, dst)
    si, di = src.intrinsics, dst.intrinsics

    ray = np.stack([(us - si.cx) / si.fx, (vs - si.cy) / si.fy, np.ones_like(us)], axis=-1)
    rotated = ray @ rel.rotation.T

    if rel.equals(RigidTransform.identity()) and si == di:
        points = np.stack([(us - si.cx) * depths / si.fx, (vs - si.cy) * depths / si.fy, depths], -1)
        return PixelWarp(us.copy(), vs.copy(), depths.copy(), depths > 0, rotated, points, True)

    points = np.stack(
        [(us - si.cx) * depths / si.fx, (vs - si.cy) * depths / si.fy, depths], axis=-1
    )
    target = rel.apply(points)
    z = target[..., 2]
    ahead = z > MIN_DEPTH
    safe_z = np.where(ahead, z, 1.0)
    u = np.where(ahead, di.fx * target[..., 0] / safe_z + di.cx, np.nan)
    v = np.where(ahead, di.fy * target[..., 1] / safe_z + di.cy, np.nan)
    return PixelWarp(u, v, z, ahead, rotated, target, False)


def zbuffer_occlusion(
    u: np.ndarray, v: np.ndarray, depth: np.ndarray, candidates: np.ndarray,
    shape: Tuple[int, int], tolerance: float,
) -> np.ndarray:
    """Flag warped points hidden behind other warped points of the same source.

    Each candidate splats its depth onto its 2x2 target footprint; a point is
    occluded when it lies more than ``tolerance`` (relative) behind the nearest
    splat on its own footprint.
    """
    occluded = np.zeros(candidates.shape, dtype=bool)
    if not np.any(candidates):
        return occluded

    fp = bilinear_footprint(shape, u[candidates], v[candidates])
    d = depth[candidates]
    zbuf = np.full(shape, np.inf)
    for rows, cols in fp.corners:
        np.minimum.at(zbuf, (rows, cols), d)

    nearest = np.min(np.stack([zbuf[rows, cols] for rows, cols in fp.corners]), axis=0)
    occluded[candidates] = d > nearest * (1.0 + tolerance)
    return occluded


def field_from_pixels(
    src: CameraView,
    dst: CameraView,
    us: np.ndarray,
    vs: np.ndarray,
    depth_values: np.ndarray,
    valid: np.ndarray,
    zbuffer: bool = False,
    zbuffer_tolerance: float = 0.05,
) -> Tuple[CorrespondenceField, PixelWarp]:
    """Correspondences for a grid of source pixels (a full raster or a patch)."""
    depths = np.where(valid, depth_values, 1.0)
    pw = warp_pixels(src, dst, us, vs, depths)
    dst_h, dst_w = dst.intrinsics.shape
    inside = (
        pw.ahead
        & (pw.u >= 0) & (pw.u <= dst_w - 1)
        & (pw.v >= 0) & (pw.v <= dst_h - 1)
    )
    mask = valid & inside & (pw.depth > 0)

    if zbuffer and not pw.identity:
        mask &= ~zbuffer_occlusion(pw.u, pw.v, pw.depth, mask, (dst_h, dst_w), zbuffer_tolerance)

    target_px = np.stack([np.where(mask, pw.u, np.nan), np.where(mask, pw.v, np.nan)], axis=-1)
    warped = np.where(mask, pw.depth, np.nan)
    return CorrespondenceField(target_px, warped, mask, (dst_h, dst_w)), pw


def warp_depth(
    src: CameraView,
    dst: CameraView,
    depth_src: DepthMap,
    zbuffer: bool = False,
    zbuffer_tolerance: float = 0.05,
) -> CorrespondenceField:
    """Warp a full source depth map into ``dst``.

    The mask keeps valid source pixels that land in front of the target camera
    and inside its raster; with ``zbuffer`` it also drops self-occluded points.
    """
    _check_view_raster(src, depth_src.shape, "source depth")
    height, width = depth_src.shape
    vs, us = np.mgrid[0:height, 0:width].astype(np.float64)
    field, _ = field_from_pixels(
        src, dst, us, vs, depth_src.values, depth_src.valid, zbuffer, zbuffer_tolerance
    )
    logger.debug(
        f"warp {src.id} -> {dst.id}: {field.count:,} correspondences "
        f"({field.coverage() * 100:.1f}% of source)"
    )
    return field


# =============================================================================
# Pair enumeration
# =============================================================================


@dataclass(frozen=True)
class ViewPair:
    src_view: str
    dst_view: str
    src_frame: int
    dst_frame: int

    @property
    def pair_id(self) -> str:
        return f"{self.src_view}@{self.src_frame}->{self.dst_view}@{self.dst_frame}"

    @property
    def temporal(self) -> bool:
        return self.src_frame != self.dst_frame


def enumerate_pairs(rig: CameraRig, frames: int, temporal_window: int) -> List[ViewPair]:
    """Ordered spatial then temporal pairs.

    Spatial: per frame, each adjacency in rig order, both directions.
    Temporal: per view in rig order, per frame f, every g with 0 < |g - f| <= window.
    """
    if temporal_window < 0:
        raise InvalidSpec("temporal_window must be >= 0")
    if frames < 0:
        raise InvalidSpec("frames must be >= 0")

    pairs: List[ViewPair] = []
    for f in range(frames):
        for a, b in rig.adjacency:
            pairs.append(ViewPair(a, b, f, f))
            pairs.append(ViewPair(b, a, f, f))

    for view_id in rig.ids:
        for f in range(frames):
            for g in range(max(0, f - temporal_window), min(frames, f + temporal_window + 1)):
                if g != f:
                    pairs.append(ViewPair(view_id, view_id, f, g))
    return pairs


def pair_views(
    rig: CameraRig,
    pair: ViewPair,
    ego_poses: Optional[Sequence[RigidTransform]] = None,
) -> Tuple[CameraView, CameraView]:
    """Views of a pair; across frames both are posed in the world frame."""
    src = rig.view(pair.src_view)
    dst = rig.view(pair.dst_view)
    if pair.temporal and ego_poses is not None:
        src = posed_view(src, ego_poses[pair.src_frame])
        dst = posed_view(dst, ego_poses[pair.dst_frame])
    return src, dst
