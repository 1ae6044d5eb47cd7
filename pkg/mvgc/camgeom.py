"""Camera and rig model for surround-view multi-camera setups.

Conventions:
    ego frame     x forward, y left, z up (meters)
    camera frame  x right, y down, z along the optical axis
    extrinsics    camera-to-ego, so ``extrinsics.apply(p_cam)`` is in the ego frame

A view pair's relative transform is ``dst.extrinsics^-1 o src.extrinsics``.
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from mvgc import config
from mvgc.errors import (
    DegenerateDepth,
    InvalidCamera,
    InvalidShift,
    OutOfRange,
    UnknownPreset,
)

logger = logging.getLogger(__name__)


ORTHONORMAL_TOL = 1e-9
MIN_DEPTH = 1e-9

# nuscenes6 layout: (id, yaw in degrees, CCW from ego forward)
NUSCENES6_LAYOUT = [
    ("CAM_FRONT", 0.0),
    ("CAM_FRONT_RIGHT", -60.0),
    ("CAM_BACK_RIGHT", -120.0),
    ("CAM_BACK", 180.0),
    ("CAM_BACK_LEFT", 120.0),
    ("CAM_FRONT_LEFT", 60.0),
]
RIG_HEIGHT_M = 1.5
RIG_RING_RADIUS_M = 0.6
# 190 px focal length on a 352 px raster is a ~85.6 deg horizontal FOV, which
# puts adjacent 60 deg-spaced views at roughly 30% overlap.
PRESET_FOCAL_PX = 190.0

PRESETS = ("nuscenes6", "front3", "mono1")
SHIFT_MODES = ("height", "pitch", "all", "custom")


# =============================================================================
# Value types
# =============================================================================


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCamera(f"focal lengths must be positive: {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidCamera(f"invalid raster size {self.width}x{self.height}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidCamera(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} raster"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> Tuple[int, int]:
        """Raster shape as (height, width)."""
        return (self.height, self.width)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation, applied as ``R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidCamera("transform contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidCamera("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidCamera("rotation is not proper (det != +1)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self o other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def equals(self, other: "RigidTransform") -> bool:
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


@dataclass(frozen=True)
class CameraView:
    id: str
    intrinsics: CameraIntrinsics
    extrinsics: RigidTransform

    @property
    def yaw(self) -> float:
        """Heading of the optical axis in the ego x-y plane (radians, CCW)."""
        axis = self.extrinsics.rotation[:, 2]
        return math.atan2(axis[1], axis[0])

    @property
    def center(self) -> np.ndarray:
        return self.extrinsics.translation


@dataclass(frozen=True)
class CameraRig:
    views: Tuple[CameraView, ...]
    adjacency: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        views = tuple(self.views)
        adjacency = tuple(tuple(pair) for pair in self.adjacency)
        if not views:
            raise InvalidCamera("a rig needs at least one view")

        ids = [view.id for view in views]
        if len(set(ids)) != len(ids):
            raise InvalidCamera(f"duplicate view ids in {ids}")

        for a, b in adjacency:
            if a == b:
                raise InvalidCamera(f"self-adjacency for {a}")
            if a not in ids or b not in ids:
                raise InvalidCamera(f"adjacency ({a}, {b}) references unknown view")

        object.__setattr__(self, "views", views)
        object.__setattr__(self, "adjacency", adjacency)

    @property
    def ids(self) -> List[str]:
        return [view.id for view in self.views]

    def view(self, view_id: str) -> CameraView:
        for view in self.views:
            if view.id == view_id:
                return view
        raise KeyError(view_id)

    def __len__(self) -> int:
        return len(self.views)


@dataclass(frozen=True)
class ShiftSpec:
    """Extrinsic perturbation between a source and a target rig.

    Translations are in the ego frame (meters); pitch (positive tilts the
    optical axis down) and yaw (positive turns it left) are in radians and
    applied about each camera's own axes. In ``all`` mode ``dz`` and ``dyaw``
    are signed per view side: as given for left-facing views, negated for
    right-facing views and zero for views facing straight forward or backward.
    ``dx`` and ``dy`` move every view alike.
    """

    mode: str = "custom"
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dpitch: float = 0.0
    dyaw: float = 0.0

    def __post_init__(self):
        if self.mode not in SHIFT_MODES:
            raise InvalidShift(f"unknown shift mode {self.mode!r}; expected {SHIFT_MODES}")

        values = {
            "dx": self.dx,
            "dy": self.dy,
            "dz": self.dz,
            "dpitch": self.dpitch,
            "dyaw": self.dyaw,
        }
        for name, value in values.items():
            if not math.isfinite(value):
                raise InvalidShift(f"{name} must be finite")

        allowed = {"height": {"dz"}, "pitch": {"dpitch"}}.get(self.mode)
        if allowed is not None:
            extra = [name for name, value in values.items() if value != 0.0 and name not in allowed]
            if extra:
                raise InvalidShift(f"mode={self.mode} does not allow {extra}")

    @property
    def is_zero(self) -> bool:
        return not any((self.dx, self.dy, self.dz, self.dpitch, self.dyaw))

    @property
    def magnitude(self) -> float:
        """Scalar used to order study rows (meters or degrees)."""
        if self.mode == "pitch":
            return math.degrees(abs(self.dpitch))
        if self.mode == "height":
            return abs(self.dz)
        return float(np.linalg.norm([self.dx, self.dy, self.dz]))

    def label(self) -> str:
        if self.is_zero:
            return "zero"
        if self.mode == "height":
            return f"height dz={self.dz:+.2f}m"
        if self.mode == "pitch":
            return f"pitch {math.degrees(self.dpitch):+.1f}deg"
        return (
            f"{self.mode} d=({self.dx:+.2f},{self.dy:+.2f},{self.dz:+.2f})m "
            f"pitch={math.degrees(self.dpitch):+.1f}deg yaw={math.degrees(self.dyaw):+.1f}deg"
        )

    @classmethod
    def height(cls, dz: float) -> "ShiftSpec":
        return cls(mode="height", dz=dz)

    @classmethod
    def pitch(cls, degrees: float) -> "ShiftSpec":
        return cls(mode="pitch", dpitch=math.radians(degrees))


# Target rigs of the CARLA-style collection: each installs the same cameras
# differently from the source rig.
SHIFT_PRESETS: Dict[str, ShiftSpec] = {
    "zero": ShiftSpec(mode="custom"),
    "height": ShiftSpec(mode="height", dz=0.65),
    "pitch": ShiftSpec(mode="pitch", dpitch=math.radians(5.0)),
    "all": ShiftSpec(mode="all", dx=-0.12, dy=0.65, dz=0.2, dyaw=math.radians(5.0)),
}


# =============================================================================
# Projection
# =============================================================================


def project(view: CameraView, point_cam) -> Tuple[np.ndarray, np.ndarray]:
    """Project camera-frame point(s) of shape (..., 3) to pixels and depth."""
    points = np.asarray(point_cam, dtype=np.float64)
    z = points[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise DegenerateDepth("cannot project a point at or behind the camera plane")

    intr = view.intrinsics
    u = intr.fx * points[..., 0] / z + intr.cx
    v = intr.fy * points[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def backproject(view: CameraView, pixel, depth) -> np.ndarray:
    """Lift pixel(s) with camera-z depth(s) to camera-frame points."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise DegenerateDepth("depth must be positive")

    intr = view.intrinsics
    x = (pixel[..., 0] - intr.cx) * depth / intr.fx
    y = (pixel[..., 1] - intr.cy) * depth / intr.fy
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def relative_transform(src: CameraView, dst: CameraView) -> RigidTransform:
    """Map source-camera coordinates into destination-camera coordinates."""
    if src.extrinsics.equals(dst.extrinsics):
        return RigidTransform.identity()
    return dst.extrinsics.inverse().compose(src.extrinsics)


def posed_view(view: CameraView, ego_pose: RigidTransform) -> CameraView:
    """Express a view in the world frame given the ego pose (ego-to-world)."""
    return CameraView(view.id, view.intrinsics, ego_pose.compose(view.extrinsics))


def depth_scale_shift(ground_range: float, h0: float, dh: float) -> Tuple[float, float, float]:
    """Range to a ground point before and after the camera rises by ``dh``."""
    if ground_range <= 0 or h0 <= 0 or h0 + dh <= 0:
        raise OutOfRange(
            f"need ground_range > 0, h0 > 0, h0 + dh > 0 (got {ground_range}, {h0}, {dh})"
        )
    d0 = math.hypot(ground_range, h0)
    d1 = math.hypot(ground_range, h0 + dh)
    return d0, d1, d1 - d0


# =============================================================================
# Rig construction
# =============================================================================


def base_rotation(yaw: float) -> np.ndarray:
    """Camera-to-ego rotation of a level camera heading ``yaw`` (radians)."""
    s, c = math.sin(yaw), math.cos(yaw)
    return np.array(
        [
            [s, 0.0, c],
            [-c, 0.0, s],
            [0.0, -1.0, 0.0],
        ]
    )


def preset_intrinsics(
    width: int = config.RASTER_WIDTH,
    height: int = config.RASTER_HEIGHT,
    focal: float = PRESET_FOCAL_PX,
) -> CameraIntrinsics:
    scale = width / config.RASTER_WIDTH
    return CameraIntrinsics(
        fx=focal * scale,
        fy=focal * scale,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


def _ring_view(view_id: str, yaw_deg: float, intrinsics: CameraIntrinsics) -> CameraView:
    yaw = math.radians(yaw_deg)
    translation = np.array(
        [
            RIG_RING_RADIUS_M * math.cos(yaw),
            RIG_RING_RADIUS_M * math.sin(yaw),
            RIG_HEIGHT_M,
        ]
    )
    return CameraView(view_id, intrinsics, RigidTransform(base_rotation(yaw), translation))


def make_preset_rig(
    name: str,
    width: int = config.RASTER_WIDTH,
    height: int = config.RASTER_HEIGHT,
) -> CameraRig:
    """Build one of the documented rigs.

    nuscenes6: six views on a 0.6 m ring at 1.5 m height, 60 deg yaw spacing,
    fx = fy = 190 px at 352x128 (scaled with width), ring adjacency.
    front3: the three forward-facing views of nuscenes6.
    mono1: CAM_FRONT alone.
    """
    if name not in PRESETS:
        raise UnknownPreset(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")

    intrinsics = preset_intrinsics(width, height)
    layout = dict(NUSCENES6_LAYOUT)

    if name == "nuscenes6":
        ids = [view_id for view_id, _ in NUSCENES6_LAYOUT]
        adjacency = [(ids[i], ids[(i + 1) % len(ids)]) for i in range(len(ids))]
    elif name == "front3":
        ids = ["CAM_FRONT_LEFT", "CAM_FRONT", "CAM_FRONT_RIGHT"]
        adjacency = [("CAM_FRONT_LEFT", "CAM_FRONT"), ("CAM_FRONT", "CAM_FRONT_RIGHT")]
    else:
        ids = ["CAM_FRONT"]
        adjacency = []

    views = [_ring_view(view_id, layout[view_id], intrinsics) for view_id in ids]
    return CameraRig(tuple(views), tuple(adjacency))


def _local_rotation(axis: str, angle: float) -> np.ndarray:
    return Rotation.from_euler(axis, angle).as_matrix()


def perturb_view(view: CameraView, shift: ShiftSpec) -> CameraView:
    side = 0.0
    if shift.mode == "all":
        side = float(np.sign(round(math.sin(view.yaw), 12)))

    dz = shift.dz * side if shift.mode == "all" else shift.dz
    dyaw = shift.dyaw * side if shift.mode == "all" else shift.dyaw

    R = view.extrinsics.rotation
    # Yaw about the camera's down axis, then pitch about its right axis.
    if dyaw != 0.0:
        R = R @ _local_rotation("y", -dyaw)
    if shift.dpitch != 0.0:
        R = R @ _local_rotation("x", -shift.dpitch)

    t = view.extrinsics.translation
    offset = np.array([shift.dx, shift.dy, dz])
    if np.any(offset != 0.0):
        t = t + offset

    if R is view.extrinsics.rotation and t is view.extrinsics.translation:
        return view
    return replace(view, extrinsics=RigidTransform(R, t))


def perturb_rig(rig: CameraRig, shift: ShiftSpec) -> CameraRig:
    """Apply an installation shift to every view; the input rig is untouched."""
    views = tuple(perturb_view(view, shift) for view in rig.views)
    logger.debug(f"Perturbed {len(views)} views with {shift.label()}")
    return CameraRig(views, rig.adjacency)


def frustum_overlap_fraction(
    rig: CameraRig, src_id: str, dst_id: str, distance: float = 40.0
) -> float:
    """Fraction of ``src`` pixels whose ray point at ``distance`` lands in ``dst``."""
    src, dst = rig.view(src_id), rig.view(dst_id)
    intr = src.intrinsics
    vs, us = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    rays = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], -1)
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    points = relative_transform(src, dst).apply(rays * distance)

    z = points[..., 2]
    ahead = z > MIN_DEPTH
    safe_z = np.where(ahead, z, 1.0)
    u = dst.intrinsics.fx * points[..., 0] / safe_z + dst.intrinsics.cx
    v = dst.intrinsics.fy * points[..., 1] / safe_z + dst.intrinsics.cy
    inside = ahead & (u >= 0) & (u <= dst.intrinsics.width - 1) & (v >= 0) & (v <= dst.intrinsics.height - 1)
    return float(inside.mean())


# =============================================================================
# JSON I/O
# =============================================================================


def rig_to_dict(rig: CameraRig) -> dict:
    views = []
    for view in rig.views:
        intr = view.intrinsics
        views.append(
            {
                "id": view.id,
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "width": intr.width,
                "height": intr.height,
                "rotation": [float(x) for x in view.extrinsics.rotation.reshape(-1)],
                "translation": [float(x) for x in view.extrinsics.translation],
            }
        )
    return {"views": views, "adjacency": [list(pair) for pair in rig.adjacency]}


def rig_from_dict(data: dict) -> CameraRig:
    try:
        views = []
        for item in data["views"]:
            intrinsics = CameraIntrinsics(
                fx=float(item["fx"]),
                fy=float(item["fy"]),
                cx=float(item["cx"]),
                cy=float(item["cy"]),
                width=int(item["width"]),
                height=int(item["height"]),
            )
            extrinsics = RigidTransform(
                np.array(item["rotation"], dtype=np.float64).reshape(3, 3),
                np.array(item["translation"], dtype=np.float64),
            )
            views.append(CameraView(str(item["id"]), intrinsics, extrinsics))
        adjacency = tuple((str(a), str(b)) for a, b in data.get("adjacency", []))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, InvalidCamera):
            raise
        raise InvalidCamera(f"malformed rig description: {e}") from e
    return CameraRig(tuple(views), adjacency)


def save_rig(rig: CameraRig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(rig_to_dict(rig), f, indent=2)
    return path


def load_rig(path: Union[str, Path]) -> CameraRig:
    with open(path, "r") as f:
        return rig_from_dict(json.load(f))


def shift_to_dict(shift: ShiftSpec) -> dict:
    return {
        "mode": shift.mode,
        "dx": shift.dx,
        "dy": shift.dy,
        "dz": shift.dz,
        "dpitch_deg": math.degrees(shift.dpitch),
        "dyaw_deg": math.degrees(shift.dyaw),
    }


def shift_from_dict(data: dict) -> ShiftSpec:
    try:
        return ShiftSpec(
            mode=str(data.get("mode", "custom")),
            dx=float(data.get("dx", 0.0)),
            dy=float(data.get("dy", 0.0)),
            dz=float(data.get("dz", 0.0)),
            dpitch=math.radians(float(data.get("dpitch_deg", 0.0))),
            dyaw=math.radians(float(data.get("dyaw_deg", 0.0))),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, InvalidShift):
            raise
        raise InvalidShift(f"malformed shift description: {e}") from e


def load_shift(path: Union[str, Path]) -> ShiftSpec:
    with open(path, "r") as f:
        return shift_from_dict(json.load(f))


def save_shift(shift: ShiftSpec, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(shift_to_dict(shift), f, indent=2)
    return path
