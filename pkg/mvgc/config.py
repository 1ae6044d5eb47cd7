"""Toolkit-wide configuration constants."""

import logging
import os
from typing import Optional

from mvgc import __version__

logger = logging.getLogger(__name__)


TOOL_VERSION = __version__

# Raster size of the synthetic rig (half of the 256x704 detector input)
RASTER_HEIGHT = 128
RASTER_WIDTH = 352

DEFAULT_SEED = 7
DEFAULT_FRAMES = 2
DEFAULT_TEMPORAL_WINDOW = 1

# Loss weights (lambda_det, lambda_ov, lambda_p); never published, kept at 1
DEFAULT_LOSS_WEIGHTS = (1.0, 1.0, 1.0)

DEFAULT_ADAPTER_RATIO = 4
# Raster (H, W) the structure table is counted on; spatial maps grow with H*W
ADAPTER_BENCH_RASTER = (8, 8)

# Evaluation
EVAL_RANGE_M = 50.0
EVAL_THRESHOLDS_M = (0.5, 1.0, 2.0, 4.0)
AUGMENT_BAND_RAD = 3.141592653589793

# Gradient check
GRADCHECK_EPS = 1e-3
GRADCHECK_SAMPLES = 1000
GRADCHECK_TOLERANCE = 1e-4

THREADS_ENV = "MVGC_THREADS"
MAX_DEFAULT_THREADS = 8


def threads_from_env(override: Optional[int] = None) -> int:
    """Resolve the worker cap from an explicit value or ``MVGC_THREADS``."""
    if override is not None:
        return max(1, int(override))

    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning(f"⚠ Ignoring non-integer {THREADS_ENV}={raw!r}")

    return max(1, min(MAX_DEFAULT_THREADS, os.cpu_count() or 1))
