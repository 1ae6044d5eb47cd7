"""
Central finite-difference verification of ``consist.loss_gradient``.

Each sampled pixel is perturbed by +-eps and only the loss terms that depend
on it are re-evaluated:

  * as a source pixel: a 5x5 patch around it covers its own residual and
    every SSIM window containing it;
  * as a destination pixel: every correspondence whose bilinear footprint
    puts weight on it is re-sampled.

Pooled counts stay fixed, matching the gradient's treatment of masks as
locally constant. A sample is skipped when the perturbation changes any
discrete structure (supports, floor cells, residual signs, window validity).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pyarrow as pa
from scipy.ndimage import binary_erosion

from mvgc import config as settings
from mvgc.camgeom import CameraRig, RigidTransform
from mvgc.consist import (
    LossConfig,
    LossWeights,
    PairContext,
    PairEvaluation,
    RasterKey,
    accumulate_gradient,
    build_contexts,
    evaluate_contexts,
    evaluate_grid,
    footprint_edge_ok,
    global_coefficients,
)
from mvgc.errors import InvalidSpec, NoSamples
from mvgc.warp import DepthMap, RgbImage, ViewPair, sample_depth

logger = logging.getLogger(__name__)


PATCH_RADIUS = 2
BORDER_PX = 2
REL_ERR_FLOOR = 1e-12


@dataclass
class GradcheckSample:
    view: str
    frame: int
    row: int
    col: int
    depth: float
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FiniteDifferenceReport:
    eps: float
    tolerance: float
    seed: int
    requested: int
    candidates: int
    skipped: int
    samples: List[GradcheckSample] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((s.rel_err for s in self.samples), default=0.0)

    @property
    def mean_rel_err(self) -> float:
        if not self.samples:
            return 0.0
        return float(np.mean([s.rel_err for s in self.samples]))

    @property
    def worst(self) -> Optional[GradcheckSample]:
        if not self.samples:
            return None
        return max(self.samples, key=lambda s: s.rel_err)

    @property
    def passed(self) -> bool:
        return bool(self.samples) and self.max_rel_err < self.tolerance

    def to_dict(self) -> dict:
        worst = self.worst
        return {
            "eps": self.eps,
            "tolerance": self.tolerance,
            "seed": self.seed,
            "requested": self.requested,
            "checked": len(self.samples),
            "candidates": self.candidates,
            "skipped": self.skipped,
            "max_rel_err": self.max_rel_err,
            "mean_rel_err": self.mean_rel_err,
            "worst": None if worst is None else worst.__dict__.copy(),
            "passed": self.passed,
        }

    def to_table(self) -> pa.Table:
        return pa.Table.from_pylist(
            [s.__dict__.copy() for s in self.samples],
            schema=pa.schema(
                [
                    ("view", pa.string()),
                    ("frame", pa.int64()),
                    ("row", pa.int64()),
                    ("col", pa.int64()),
                    ("depth", pa.float64()),
                    ("analytic", pa.float64()),
                    ("numeric", pa.float64()),
                    ("rel_err", pa.float64()),
                ]
            ),
        )


# =============================================================================
# Local functional
# =============================================================================


@dataclass(eq=False)
class _DestinationTerm:
    ctx: PairContext
    u: np.ndarray
    v: np.ndarray
    warped: np.ndarray


def _with_pixel(depth: DepthMap, row: int, col: int, value: float) -> DepthMap:
    values = depth.values.copy()
    values[row, col] = value
    return DepthMap(values, depth.valid)


class _PixelStencil:
    """Every pooled-loss term that depends on depth pixel (row, col) of one raster."""

    def __init__(
        self,
        key: RasterKey,
        row: int,
        col: int,
        evaluations: Sequence[PairEvaluation],
        config: LossConfig,
        coef_ov: float,
        coef_p: float,
    ):
        self.key = key
        self.row = row
        self.col = col
        self.config = config
        self.coef_ov = coef_ov
        self.coef_p = coef_p
        self.sources: List[PairContext] = []
        self.destinations: List[_DestinationTerm] = []

        r0, r1 = row - PATCH_RADIUS, row + PATCH_RADIUS + 1
        c0, c1 = col - PATCH_RADIUS, col + PATCH_RADIUS + 1
        for ev in evaluations:
            ctx = ev.context
            if ctx.src_key == key:
                self.sources.append(ctx)
            if ctx.dst_key != key:
                continue
            fp = ev.overlap.footprint
            touches = np.zeros(ev.field.shape, dtype=bool)
            for (rows, cols), used in zip(fp.corners, fp.used()):
                touches |= used & (rows == row) & (cols == col)
            touches &= ev.field.mask
            if ctx.src_key == key:
                # the patch already covers these source pixels
                touches[max(r0, 0) : r1, max(c0, 0) : c1] = False
            if touches.any():
                self.destinations.append(
                    _DestinationTerm(
                        ctx,
                        ev.field.target_px[..., 0][touches],
                        ev.field.target_px[..., 1][touches],
                        ev.field.warped_depth[touches],
                    )
                )

    @property
    def participates(self) -> bool:
        return bool(self.sources or self.destinations)

    def evaluate(self, value: float) -> Tuple[float, List[np.ndarray]]:
        """Local loss with the pixel set to ``value`` and the discrete structure it used."""
        total = 0.0
        structure: List[np.ndarray] = []
        row, col = self.row, self.col
        window = slice(row - PATCH_RADIUS, row + PATCH_RADIUS + 1), slice(
            col - PATCH_RADIUS, col + PATCH_RADIUS + 1
        )
        modified: Dict[int, DepthMap] = {}

        for ctx in self.sources:
            depth_values = ctx.depth_src.values[window].copy()
            depth_values[PATCH_RADIUS, PATCH_RADIUS] = value
            if ctx.dst_key == self.key:
                ctx = replace(ctx, depth_dst=_with_pixel(ctx.depth_dst, row, col, value))
            vs, us = np.mgrid[window].astype(np.float64)
            ev = evaluate_grid(
                ctx, self.config, us, vs, depth_values, ctx.depth_src.valid[window], ctx.img_src.values[window]
            )
            total += self.coef_ov * ev.ov_sum + self.coef_p * ev.photometric.pe_sum
            ov, ph = ev.overlap, ev.photometric
            structure += [
                ov.support,
                np.sign(ov.residual),
                np.where(ov.support, ov.footprint.x0, -1),
                np.where(ov.support, ov.footprint.y0, -1),
                ph.support,
                ph.window_valid,
                np.where(ph.support, ph.footprint.x0, -1),
                np.where(ph.support, ph.footprint.y0, -1),
            ]

        for term in self.destinations:
            depth_key = id(term.ctx.depth_dst)
            if depth_key not in modified:
                modified[depth_key] = _with_pixel(term.ctx.depth_dst, row, col, value)
            depth = modified[depth_key]
            sample, ok, fp = sample_depth(depth, term.u, term.v, self.config.depth_interp)
            support = ok
            if self.config.edge_ratio is not None:
                support = support & footprint_edge_ok(depth, fp, self.config.edge_ratio)
            residual = np.where(support, sample - term.warped, 0.0)
            total += self.coef_ov * float(np.abs(residual).sum())
            structure += [support, np.sign(residual)]

        return total, structure


def _same_structure(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# =============================================================================
# Check
# =============================================================================


def _candidate_pixels(
    depths: Mapping[RasterKey, DepthMap], evaluations: Sequence[PairEvaluation]
) -> List[Tuple[RasterKey, int, int]]:
    """Valid pixels away from mask boundaries and the raster border that feed some loss term."""
    used = {key: np.zeros(depth.shape, dtype=bool) for key, depth in depths.items()}
    for ev in evaluations:
        used[ev.context.src_key] |= ev.overlap.support | ev.photometric.support
        fp = ev.overlap.footprint
        target = used[ev.context.dst_key]
        for (rows, cols), corner_used in zip(fp.corners, fp.used()):
            sel = ev.overlap.support & corner_used
            target[rows[sel], cols[sel]] = True

    candidates = []
    for key in sorted(used):
        depth = depths[key]
        interior = binary_erosion(depth.valid, structure=np.ones((3, 3), dtype=bool), border_value=0)
        interior[:BORDER_PX, :] = False
        interior[-BORDER_PX:, :] = False
        interior[:, :BORDER_PX] = False
        interior[:, -BORDER_PX:] = False
        rows, cols = np.nonzero(interior & used[key])
        candidates.extend((key, int(r), int(c)) for r, c in zip(rows, cols))
    return candidates


def finite_difference_check(
    rig: CameraRig,
    pairs: Sequence[ViewPair],
    depths: Mapping[RasterKey, DepthMap],
    images: Mapping[RasterKey, RgbImage],
    weights: Optional[LossWeights] = None,
    eps: float = settings.GRADCHECK_EPS,
    samples: int = settings.GRADCHECK_SAMPLES,
    seed: int = settings.DEFAULT_SEED,
    config: Optional[LossConfig] = None,
    ego_poses: Optional[Sequence[RigidTransform]] = None,
    tolerance: float = settings.GRADCHECK_TOLERANCE,
    max_workers: Optional[int] = None,
) -> FiniteDifferenceReport:
    """Compare ``loss_gradient`` with central differences at seeded random pixels."""
    if samples < 1:
        raise NoSamples(f"at least one sample is required, got {samples}")
    if not eps > 0:
        raise InvalidSpec(f"eps must be > 0, got {eps}")
    config = config or LossConfig()
    if config.occlusion == "zbuffer":
        raise InvalidSpec("z-buffer visibility couples distant pixels; check gradients without it")
    weights = weights or LossWeights()

    logger.info("=" * 70)
    logger.info(f"Gradient check: {len(pairs)} pairs, {samples} samples, eps={eps:g}")
    logger.info("=" * 70)

    contexts = build_contexts(rig, pairs, depths, images, ego_poses)
    evaluations = evaluate_contexts(contexts, config, True, max_workers)
    coef_ov, coef_p = global_coefficients(evaluations, weights, config.reduction)
    grad = accumulate_gradient(evaluations, depths, coef_ov, coef_p, config, max_workers)

    candidates = _candidate_pixels(depths, evaluations)
    if not candidates:
        raise NoSamples("no valid interior pixel takes part in any pair")
    order = np.random.default_rng(seed).permutation(len(candidates))

    report = FiniteDifferenceReport(
        eps=eps, tolerance=tolerance, seed=seed, requested=samples, candidates=len(candidates), skipped=0
    )
    for idx in order:
        if len(report.samples) >= samples:
            break
        key, row, col = candidates[idx]
        stencil = _PixelStencil(key, row, col, evaluations, config, coef_ov, coef_p)
        if not stencil.participates:
            continue

        d0 = float(depths[key].values[row, col])
        plus, s_plus = stencil.evaluate(d0 + eps)
        minus, s_minus = stencil.evaluate(d0 - eps)
        _, s_zero = stencil.evaluate(d0)
        if not (_same_structure(s_plus, s_zero) and _same_structure(s_minus, s_zero)):
            report.skipped += 1
            continue

        numeric = (plus - minus) / (2.0 * eps)
        analytic = float(grad[key][row, col])
        rel_err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_FLOOR)
        report.samples.append(GradcheckSample(key[0], key[1], row, col, d0, analytic, numeric, rel_err))

    if not report.samples:
        raise NoSamples("every candidate pixel sat on a structural kink")
    if len(report.samples) < samples:
        logger.warning(f"⚠ Only {len(report.samples)} of {samples} samples could be checked")

    mark = "✓" if report.passed else "✗"
    logger.info(
        f"{mark} max rel err {report.max_rel_err:.3e}, mean {report.mean_rel_err:.3e} "
        f"over {len(report.samples)} pixels ({report.skipped} skipped)"
    )
    return report
