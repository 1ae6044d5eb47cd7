"""
Multi-view overlap depth constraint and photometric consistency.

For an ordered pair (i -> j) every source pixel with a correspondence yields

    overlap residual   r = <D_j>(p*) - D*            (depth seen twice)
    photometric pair   x = I_i(p),  y = <I_j>(p*)    (compared by SSIM)

where <.> is bilinear sampling. L_ov is the mean |r| and L_p the mean
(1 - SSIM) / 2 over 3x3 windows whose pixels all have a correspondence.
Means are global: sums and counts are pooled over all pairs before dividing.
Analytic gradients with respect to every depth raster are provided by
``loss_gradient``.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mvgc.camgeom import CameraRig, CameraView, RigidTransform
from mvgc.errors import DimensionMismatch, InvalidSpec
from mvgc.parallel_utils import ParallelMapper
from mvgc.warp import (
    DEPTH_INTERP_MODES,
    BilinearFootprint,
    CorrespondenceField,
    DepthMap,
    PixelWarp,
    RgbImage,
    ViewPair,
    depth_sample_partials,
    field_from_pixels,
    image_sample_partials,
    pair_views,
    sample_depth,
    sample_image,
)

logger = logging.getLogger(__name__)


RasterKey = Tuple[str, int]

REDUCTIONS = ("mean", "sum")
OCCLUSION_MODES = ("none", "zbuffer")


# =============================================================================
# Configuration
# =============================================================================


@dataclass(frozen=True)
class LossWeights:
    lambda_det: float = 1.0
    lambda_ov: float = 1.0
    lambda_p: float = 1.0

    def __post_init__(self):
        values = (self.lambda_det, self.lambda_ov, self.lambda_p)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise InvalidSpec(f"loss weights must be finite and >= 0, got {values}")
        if not any(values):
            raise InvalidSpec("at least one loss weight must be nonzero")


@dataclass(frozen=True)
class SsimParams:
    """Uniform-window SSIM with the usual stabilisers c1 = (0.01 L)^2, c2 = (0.03 L)^2."""

    window: int = 3
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidSpec(f"SSIM window must be odd and >= 3, got {self.window}")
        if not (self.dynamic_range > 0 and self.k1 > 0 and self.k2 > 0):
            raise InvalidSpec("SSIM constants must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossConfig:
    """How correspondences are sampled, masked and reduced.

    The defaults are the literal occlusion-blind formulation. ``edge_ratio``
    drops samples whose depth footprint spans a max/min ratio above it.
    """

    reduction: str = "mean"
    depth_interp: str = "linear"
    occlusion: str = "none"
    zbuffer_tolerance: float = 0.05
    edge_ratio: Optional[float] = None
    ssim: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise InvalidSpec(f"reduction must be one of {REDUCTIONS}")
        if self.depth_interp not in DEPTH_INTERP_MODES:
            raise InvalidSpec(f"depth_interp must be one of {DEPTH_INTERP_MODES}")
        if self.occlusion not in OCCLUSION_MODES:
            raise InvalidSpec(f"occlusion must be one of {OCCLUSION_MODES}")
        if self.zbuffer_tolerance < 0:
            raise InvalidSpec("zbuffer_tolerance must be >= 0")
        if self.edge_ratio is not None and self.edge_ratio < 1.0:
            raise InvalidSpec("edge_ratio must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ssim"] = asdict(self.ssim)
        return out


# Profile for analytic scenes with exact depth: perspective-correct depth
# interpolation, z-buffered visibility and rejection of footprints that
# straddle a depth discontinuity.
VISIBILITY_MASKED = LossConfig(
    depth_interp="inverse",
    occlusion="zbuffer",
    zbuffer_tolerance=0.05,
    edge_ratio=1.03,
)


# =============================================================================
# Reports
# =============================================================================


@dataclass
class PairLoss:
    pair_id: str
    l_ov: float
    l_p: float
    valid_count: int
    window_count: int
    ov_sum: float
    p_sum: float


@dataclass
class LossReport:
    l_ov: float
    l_p: float
    l_total: float
    l_det: float
    weights: LossWeights
    reduction: str
    per_pair: List[PairLoss]
    total_valid: int
    total_windows: int

    def to_dict(self) -> dict:
        return {
            "l_ov": self.l_ov,
            "l_p": self.l_p,
            "l_total": self.l_total,
            "l_det": self.l_det,
            "weights": asdict(self.weights),
            "reduction": self.reduction,
            "total_valid": self.total_valid,
            "total_windows": self.total_windows,
            "per_pair": [asdict(p) for p in self.per_pair],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(eq=False)
class GradField:
    """dL/dD per depth raster, keyed by (view id, frame)."""

    grads: Dict[RasterKey, np.ndarray]

    def __getitem__(self, key: RasterKey) -> np.ndarray:
        return self.grads[key]

    def keys(self):
        return self.grads.keys()

    def max_abs(self) -> float:
        return max((float(np.abs(g).max()) for g in self.grads.values()), default=0.0)


def _reduce(total: float, count: int, reduction: str) -> float:
    if count == 0:
        return 0.0
    return total / count if reduction == "mean" else total


# =============================================================================
# Overlap depth term
# =============================================================================


@dataclass(eq=False)
class OverlapTerms:
    support: np.ndarray
    residual: np.ndarray  # zero outside support
    footprint: BilinearFootprint


def footprint_edge_ok(depth: DepthMap, fp: BilinearFootprint, ratio: float) -> np.ndarray:
    """True where the weighted footprint depths stay within ``ratio`` of each other."""
    corners = [depth.values[rows, cols] for rows, cols in fp.corners]
    picked = [np.where(used, c, corners[0]) for c, used in zip(corners, fp.used())]
    hi = np.maximum.reduce(picked)
    lo = np.minimum.reduce(picked)
    return hi <= ratio * lo


def overlap_terms(field: CorrespondenceField, depth_dst: DepthMap, config: LossConfig) -> OverlapTerms:
    if tuple(field.target_shape) != depth_dst.shape:
        raise DimensionMismatch(
            f"field targets {field.target_shape} but destination depth is {depth_dst.shape}"
        )
    u, v = field.target_px[..., 0], field.target_px[..., 1]
    sample, ok, fp = sample_depth(depth_dst, u, v, config.depth_interp)
    support = field.mask & ok
    if config.edge_ratio is not None:
        support &= footprint_edge_ok(depth_dst, fp, config.edge_ratio)
    residual = np.where(support, sample - np.where(support, field.warped_depth, 0.0), 0.0)
    return OverlapTerms(support, residual, fp)


def overlap_depth_loss(
    field: CorrespondenceField, depth_dst: DepthMap, config: Optional[LossConfig] = None
) -> Tuple[float, int]:
    """Mean (or summed) |<D_j>(p*) - D*| over usable correspondences."""
    config = config or LossConfig()
    terms = overlap_terms(field, depth_dst, config)
    count = int(terms.support.sum())
    return _reduce(float(np.abs(terms.residual).sum()), count, config.reduction), count


# =============================================================================
# Photometric term
# =============================================================================


@dataclass(eq=False)
class SsimWindows:
    pe: np.ndarray  # (Hw, Ww) mean over channels of (1 - SSIM) / 2
    ssim: np.ndarray  # (Hw, Ww, 3)
    alpha: Optional[np.ndarray] = None  # dSSIM/dy_k = alpha + beta x_k + gamma y_k
    beta: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None


def ssim_windows(x: np.ndarray, y: np.ndarray, params: SsimParams, need_grad: bool = False) -> SsimWindows:
    """SSIM of every full window of two (H, W, 3) rasters."""
    w = params.window
    n = float(w * w)
    xw = sliding_window_view(x, (w, w), axis=(0, 1))
    yw = sliding_window_view(y, (w, w), axis=(0, 1))
    mx = xw.mean(axis=(-2, -1))
    my = yw.mean(axis=(-2, -1))
    dx = xw - mx[..., None, None]
    dy = yw - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cxy = (dx * dy).mean(axis=(-2, -1))

    c1, c2 = params.c1, params.c2
    a1 = 2.0 * mx * my + c1
    a2 = mx * mx + my * my + c1
    b1 = 2.0 * cxy + c2
    b2 = vx + vy + c2
    s = (a1 * b1) / (a2 * b2)
    out = SsimWindows(pe=((1.0 - s) / 2.0).mean(axis=-1), ssim=s)

    if need_grad:
        out.alpha = s * (2.0 * mx / (n * a1) - 2.0 * my / (n * a2) - 2.0 * mx / (n * b1) + 2.0 * my / (n * b2))
        out.beta = 2.0 * s / (n * b1)
        out.gamma = -2.0 * s / (n * b2)
    return out


def ssim_map(x: np.ndarray, y: np.ndarray, params: Optional[SsimParams] = None) -> np.ndarray:
    """Per-window, per-channel SSIM of two (H, W, 3) rasters."""
    return ssim_windows(np.asarray(x, float), np.asarray(y, float), params or SsimParams()).ssim


@dataclass(eq=False)
class PhotometricTerms:
    support: np.ndarray
    window_valid: np.ndarray
    x: np.ndarray
    y: np.ndarray  # zero outside support
    footprint: BilinearFootprint
    windows: Optional[SsimWindows]

    @property
    def window_count(self) -> int:
        return int(self.window_valid.sum())

    @property
    def pe_sum(self) -> float:
        if self.windows is None:
            return 0.0
        return float(self.windows.pe[self.window_valid].sum())


def photometric_terms(
    field: CorrespondenceField,
    x: np.ndarray,
    img_dst: RgbImage,
    params: SsimParams,
    extra_support: Optional[np.ndarray] = None,
    need_grad: bool = False,
) -> PhotometricTerms:
    if tuple(field.target_shape) != img_dst.shape:
        raise DimensionMismatch(
            f"field targets {field.target_shape} but destination image is {img_dst.shape}"
        )
    if x.shape[:2] != field.shape:
        raise DimensionMismatch(f"source image {x.shape[:2]} does not match field {field.shape}")

    u, v = field.target_px[..., 0], field.target_px[..., 1]
    y, inside, fp = sample_image(img_dst, u, v)
    support = field.mask & inside
    if extra_support is not None:
        support &= extra_support
    y = np.where(support[..., None], y, 0.0)

    w = params.window
    height, width = field.shape
    if height < w or width < w:
        empty = np.zeros((max(height - w + 1, 0), max(width - w + 1, 0)), dtype=bool)
        return PhotometricTerms(support, empty, x, y, fp, None)

    window_valid = sliding_window_view(support, (w, w)).all(axis=(-2, -1))
    windows = ssim_windows(x, y, params, need_grad) if window_valid.any() else None
    return PhotometricTerms(support, window_valid, x, y, fp, windows)


def photometric_loss(
    field: CorrespondenceField,
    img_src_view_of_dst: RgbImage,
    img_dst: RgbImage,
    params: Optional[SsimParams] = None,
    config: Optional[LossConfig] = None,
    depth_dst: Optional[DepthMap] = None,
) -> Tuple[float, int]:
    """Mean (1 - SSIM) / 2 between the source image and its reconstruction from ``img_dst``.

    ``depth_dst`` is only consulted when ``config.edge_ratio`` is set.
    """
    config = config or LossConfig()
    params = params or config.ssim
    extra = None
    if depth_dst is not None and config.edge_ratio is not None:
        extra = overlap_terms(field, depth_dst, config).support
    terms = photometric_terms(field, img_src_view_of_dst.values, img_dst, params, extra)
    return _reduce(terms.pe_sum, terms.window_count, config.reduction), terms.window_count


# =============================================================================
# Pair evaluation
# =============================================================================


@dataclass(frozen=True, eq=False)
class PairContext:
    """Everything needed to evaluate one ordered pair."""

    pair: ViewPair
    src: CameraView
    dst: CameraView
    depth_src: DepthMap
    depth_dst: DepthMap
    img_src: RgbImage
    img_dst: RgbImage

    @property
    def src_key(self) -> RasterKey:
        return (self.pair.src_view, self.pair.src_frame)

    @property
    def dst_key(self) -> RasterKey:
        return (self.pair.dst_view, self.pair.dst_frame)


@dataclass(eq=False)
class PairEvaluation:
    context: PairContext
    field: CorrespondenceField
    warp: PixelWarp
    overlap: OverlapTerms
    photometric: PhotometricTerms

    @property
    def ov_sum(self) -> float:
        return float(np.abs(self.overlap.residual).sum())

    @property
    def ov_count(self) -> int:
        return int(self.overlap.support.sum())


def _lookup(rasters: Mapping[RasterKey, object], key: RasterKey, what: str):
    try:
        return rasters[key]
    except KeyError:
        raise DimensionMismatch(f"no {what} raster for view {key[0]} frame {key[1]}") from None


def build_contexts(
    rig: CameraRig,
    pairs: Sequence[ViewPair],
    depths: Mapping[RasterKey, DepthMap],
    images: Mapping[RasterKey, RgbImage],
    ego_poses: Optional[Sequence[RigidTransform]] = None,
    dst_depths: Optional[Mapping[RasterKey, DepthMap]] = None,
    dst_images: Optional[Mapping[RasterKey, RgbImage]] = None,
) -> List[PairContext]:
    """Resolve views and rasters; destination rasters may come from another domain."""
    dst_depths = dst_depths if dst_depths is not None else depths
    dst_images = dst_images if dst_images is not None else images
    contexts = []
    for pair in pairs:
        src, dst = pair_views(rig, pair, ego_poses)
        src_key = (pair.src_view, pair.src_frame)
        dst_key = (pair.dst_view, pair.dst_frame)
        ctx = PairContext(
            pair=pair,
            src=src,
            dst=dst,
            depth_src=_lookup(depths, src_key, "depth"),
            depth_dst=_lookup(dst_depths, dst_key, "depth"),
            img_src=_lookup(images, src_key, "image"),
            img_dst=_lookup(dst_images, dst_key, "image"),
        )
        for view, raster, what in (
            (ctx.src, ctx.depth_src, "source depth"),
            (ctx.dst, ctx.depth_dst, "destination depth"),
            (ctx.src, ctx.img_src, "source image"),
            (ctx.dst, ctx.img_dst, "destination image"),
        ):
            if tuple(raster.shape) != view.intrinsics.shape:
                raise DimensionMismatch(
                    f"{what} {tuple(raster.shape)} does not match view {view.id} {view.intrinsics.shape}"
                )
        contexts.append(ctx)
    return contexts


def evaluate_grid(
    ctx: PairContext,
    config: LossConfig,
    us: np.ndarray,
    vs: np.ndarray,
    depth_values: np.ndarray,
    valid: np.ndarray,
    x: np.ndarray,
    need_grad: bool = False,
) -> PairEvaluation:
    """Evaluate a pair on a grid of source pixels (the full raster or a patch)."""
    field_, pw = field_from_pixels(
        ctx.src,
        ctx.dst,
        us,
        vs,
        depth_values,
        valid,
        zbuffer=config.occlusion == "zbuffer",
        zbuffer_tolerance=config.zbuffer_tolerance,
    )
    overlap = overlap_terms(field_, ctx.depth_dst, config)
    extra = overlap.support if config.edge_ratio is not None else None
    photometric = photometric_terms(field_, x, ctx.img_dst, config.ssim, extra, need_grad)
    return PairEvaluation(ctx, field_, pw, overlap, photometric)


def evaluate_pair(ctx: PairContext, config: LossConfig, need_grad: bool = False) -> PairEvaluation:
    height, width = ctx.depth_src.shape
    vs, us = np.mgrid[0:height, 0:width].astype(np.float64)
    return evaluate_grid(
        ctx, config, us, vs, ctx.depth_src.values, ctx.depth_src.valid, ctx.img_src.values, need_grad
    )


def evaluate_contexts(
    contexts: Sequence[PairContext],
    config: LossConfig,
    need_grad: bool = False,
    max_workers: Optional[int] = None,
) -> List[PairEvaluation]:
    mapper = ParallelMapper(max_workers=max_workers)
    return mapper.map(
        lambda ctx: evaluate_pair(ctx, config, need_grad),
        contexts,
        name="pair losses",
        labels=[ctx.pair.pair_id for ctx in contexts],
    )


def _pair_loss(ev: PairEvaluation, reduction: str) -> PairLoss:
    ov_sum, ov_count = ev.ov_sum, ev.ov_count
    p_sum, p_count = ev.photometric.pe_sum, ev.photometric.window_count
    return PairLoss(
        pair_id=ev.context.pair.pair_id,
        l_ov=_reduce(ov_sum, ov_count, reduction),
        l_p=_reduce(p_sum, p_count, reduction),
        valid_count=ov_count,
        window_count=p_count,
        ov_sum=ov_sum,
        p_sum=p_sum,
    )


def evaluate_pairs(
    rig: CameraRig,
    pairs: Sequence[ViewPair],
    depths: Mapping[RasterKey, DepthMap],
    images: Mapping[RasterKey, RgbImage],
    config: Optional[LossConfig] = None,
    ego_poses: Optional[Sequence[RigidTransform]] = None,
    dst_depths: Optional[Mapping[RasterKey, DepthMap]] = None,
    dst_images: Optional[Mapping[RasterKey, RgbImage]] = None,
    max_workers: Optional[int] = None,
) -> List[PairLoss]:
    """Per-pair losses, in the order of ``pairs``."""
    config = config or LossConfig()
    contexts = build_contexts(rig, pairs, depths, images, ego_poses, dst_depths, dst_images)
    evaluations = evaluate_contexts(contexts, config, False, max_workers)
    return [_pair_loss(ev, config.reduction) for ev in evaluations]


def total_loss(
    l_det: float,
    pair_losses: Sequence[PairLoss],
    weights: LossWeights,
    reduction: str = "mean",
) -> LossReport:
    """Weighted total; pooled sums are divided by pooled counts under ``mean``."""
    if not (l_det >= 0 and math.isfinite(l_det)):
        raise InvalidSpec(f"l_det must be finite and >= 0, got {l_det}")

    total_valid = sum(p.valid_count for p in pair_losses)
    total_windows = sum(p.window_count for p in pair_losses)
    l_ov = _reduce(math.fsum(p.ov_sum for p in pair_losses), total_valid, reduction)
    l_p = _reduce(math.fsum(p.p_sum for p in pair_losses), total_windows, reduction)
    l_total = weights.lambda_det * l_det + weights.lambda_ov * l_ov + weights.lambda_p * l_p

    return LossReport(
        l_ov=l_ov,
        l_p=l_p,
        l_total=l_total,
        l_det=l_det,
        weights=weights,
        reduction=reduction,
        per_pair=list(pair_losses),
        total_valid=total_valid,
        total_windows=total_windows,
    )


def consistency_loss(
    rig: CameraRig,
    pairs: Sequence[ViewPair],
    depths: Mapping[RasterKey, DepthMap],
    images: Mapping[RasterKey, RgbImage],
    weights: Optional[LossWeights] = None,
    l_det: float = 0.0,
    config: Optional[LossConfig] = None,
    ego_poses: Optional[Sequence[RigidTransform]] = None,
    dst_depths: Optional[Mapping[RasterKey, DepthMap]] = None,
    dst_images: Optional[Mapping[RasterKey, RgbImage]] = None,
    max_workers: Optional[int] = None,
) -> LossReport:
    """Evaluate every pair and fold the results into a ``LossReport``."""
    config = config or LossConfig()
    weights = weights or LossWeights()
    pair_losses = evaluate_pairs(
        rig, pairs, depths, images, config, ego_poses, dst_depths, dst_images, max_workers
    )
    report = total_loss(l_det, pair_losses, weights, config.reduction)
    logger.info(
        f"✓ {len(pair_losses)} pairs: l_ov={report.l_ov:.6f} m "
        f"l_p={report.l_p:.6f} ({report.total_valid:,} correspondences)"
    )
    return report


# =============================================================================
# Gradients
# =============================================================================


def projection_partials(pw: PixelWarp, dst: CameraView) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """d(u*, v*, D*)/dd for every warped pixel."""
    a = pw.rotated_ray
    if pw.identity:
        zeros = np.zeros(pw.depth.shape)
        return zeros, zeros, a[..., 2].copy()

    q = pw.target_point
    z = np.where(pw.ahead, q[..., 2], 1.0)
    z2 = z * z
    intr = dst.intrinsics
    du = intr.fx * (a[..., 0] * z - q[..., 0] * a[..., 2]) / z2
    dv = intr.fy * (a[..., 1] * z - q[..., 1] * a[..., 2]) / z2
    return du, dv, a[..., 2]


def window_sums_to_pixels(coef: np.ndarray, window: int) -> np.ndarray:
    """Sum window-grid values onto every pixel each window covers."""
    pad = window - 1
    widths = ((pad, pad), (pad, pad)) + ((0, 0),) * (coef.ndim - 2)
    padded = np.pad(coef, widths)
    return sliding_window_view(padded, (window, window), axis=(0, 1)).sum(axis=(-2, -1))


@dataclass(eq=False)
class PairGradient:
    src_grad: np.ndarray
    dst_rows: List[np.ndarray]
    dst_cols: List[np.ndarray]
    dst_values: List[np.ndarray]


def pair_gradient(
    ev: PairEvaluation, coef_ov: float, coef_p: float, config: LossConfig
) -> PairGradient:
    """Gradient contributions of one pair to its source and destination depths."""
    ctx = ev.context
    du, dv, dz = projection_partials(ev.warp, ctx.dst)
    src_grad = np.zeros(ev.field.shape)
    rows_out, cols_out, values_out = [], [], []

    ov = ev.overlap
    if coef_ov != 0.0 and ov.support.any():
        sel = ov.support
        sign = np.sign(ov.residual[sel])
        fp = ov.footprint
        sub = fp.take(sel)
        ds_du, ds_dv, dcorner = depth_sample_partials(ctx.depth_dst, sub, config.depth_interp)
        src_grad[sel] += coef_ov * sign * (ds_du * du[sel] + ds_dv * dv[sel] - dz[sel])
        for (rows, cols), weight in zip(sub.corners, dcorner):
            rows_out.append(rows)
            cols_out.append(cols)
            values_out.append(coef_ov * sign * weight)

    ph = ev.photometric
    if coef_p != 0.0 and ph.windows is not None and ph.window_valid.any():
        w = config.ssim.window
        channels = ph.x.shape[-1]
        cw = np.where(ph.window_valid, -coef_p / (2.0 * channels), 0.0)[..., None]
        dl_dy = (
            window_sums_to_pixels(cw * ph.windows.alpha, w)
            + ph.x * window_sums_to_pixels(cw * ph.windows.beta, w)
            + ph.y * window_sums_to_pixels(cw * ph.windows.gamma, w)
        )
        sel = ph.support
        fp = ph.footprint
        sub = fp.take(sel)
        di_du, di_dv = image_sample_partials(ctx.img_dst, sub)
        chain = di_du * du[sel][:, None] + di_dv * dv[sel][:, None]
        src_grad[sel] += (dl_dy[sel] * chain).sum(axis=-1)

    return PairGradient(src_grad, rows_out, cols_out, values_out)


def global_coefficients(
    evaluations: Sequence[PairEvaluation], weights: LossWeights, reduction: str
) -> Tuple[float, float]:
    """Weights of one residual / one window in the pooled loss."""
    n_ov = sum(ev.ov_count for ev in evaluations)
    n_p = sum(ev.photometric.window_count for ev in evaluations)
    if reduction == "mean":
        coef_ov = weights.lambda_ov / n_ov if n_ov else 0.0
        coef_p = weights.lambda_p / n_p if n_p else 0.0
    else:
        coef_ov, coef_p = weights.lambda_ov, weights.lambda_p
    return coef_ov, coef_p


def loss_gradient(
    rig: CameraRig,
    pairs: Sequence[ViewPair],
    depths: Mapping[RasterKey, DepthMap],
    images: Mapping[RasterKey, RgbImage],
    weights: Optional[LossWeights] = None,
    config: Optional[LossConfig] = None,
    ego_poses: Optional[Sequence[RigidTransform]] = None,
    max_workers: Optional[int] = None,
) -> GradField:
    """d(lambda_ov L_ov + lambda_p L_p)/dD for every depth raster.

    Each source depth enters through the warped point (p* and D*), each
    destination depth through the bilinear weights of its samples. Masks are
    treated as locally constant and sign(0) = 0. Contributions are accumulated
    in pair order.
    """
    config = config or LossConfig()
    weights = weights or LossWeights()
    contexts = build_contexts(rig, pairs, depths, images, ego_poses)
    evaluations = evaluate_contexts(contexts, config, True, max_workers)
    coef_ov, coef_p = global_coefficients(evaluations, weights, config.reduction)
    return accumulate_gradient(evaluations, depths, coef_ov, coef_p, config, max_workers)


def accumulate_gradient(
    evaluations: Sequence[PairEvaluation],
    depths: Mapping[RasterKey, DepthMap],
    coef_ov: float,
    coef_p: float,
    config: LossConfig,
    max_workers: Optional[int] = None,
) -> GradField:
    """Sum per-pair contributions into one gradient raster per depth map."""
    mapper = ParallelMapper(max_workers=max_workers)
    contributions = mapper.map(
        lambda ev: pair_gradient(ev, coef_ov, coef_p, config), evaluations, name="pair gradients"
    )

    grads = {key: np.zeros(depth.shape) for key, depth in depths.items()}
    for ev, contrib in zip(evaluations, contributions):
        grads[ev.context.src_key] += contrib.src_grad
        target = grads[ev.context.dst_key]
        for rows, cols, values in zip(contrib.dst_rows, contrib.dst_cols, contrib.dst_values):
            np.add.at(target, (rows, cols), values)

    return GradField(grads)


def perturbed_depths(
    depths: Mapping[RasterKey, DepthMap],
    amplitude: float = 0.05,
    period_px: float = 40.0,
    seed: int = 0,
) -> Dict[RasterKey, DepthMap]:
    """Multiply every depth map by a smooth seeded field 1 + amplitude * s(u, v), |s| <= 1.

    Moves residuals off zero so |.| is differentiable at almost every pixel.
    """
    if not 0.0 <= amplitude < 1.0:
        raise InvalidSpec(f"amplitude must lie in [0, 1), got {amplitude}")
    rng = np.random.default_rng(seed)
    out = {}
    for key in sorted(depths):
        depth = depths[key]
        phase_u, phase_v = rng.uniform(0.0, 2.0 * np.pi, size=2)
        rows, cols = np.mgrid[0 : depth.height, 0 : depth.width]
        wave = np.sin(2.0 * np.pi * cols / period_px + phase_u) * np.cos(2.0 * np.pi * rows / period_px + phase_v)
        out[key] = DepthMap(depth.values * (1.0 + amplitude * wave), depth.valid)
    return out
