"""Raster file codecs: PFM depth, PGM validity masks, PPM images.

PFM files are little-endian (scale -1.0) grayscale float32 maps stored
bottom row first. Invalid depth pixels are written as 0 and described by the
sibling ``.mask.pgm`` file (255 valid, 0 invalid).
"""

import logging
import re
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from mvgc.errors import DimensionMismatch
from mvgc.warp import DepthMap, RgbImage

logger = logging.getLogger(__name__)


_HEADER_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _read_tokens(data: bytes, count: int) -> Tuple[list, int]:
    """Read ``count`` whitespace-separated header tokens (comments allowed)."""
    tokens = []
    pos = 0
    for _ in range(count):
        match = _HEADER_TOKEN.match(data, pos)
        if match is None:
            raise DimensionMismatch("truncated raster header")
        tokens.append(match.group(2))
        pos = match.end()
    # exactly one whitespace byte separates the header from the payload
    return tokens, pos + 1


def _payload(data: bytes, offset: int, dtype, count: int, path) -> np.ndarray:
    need = offset + count * np.dtype(dtype).itemsize
    if len(data) < need:
        raise DimensionMismatch(f"{path}: truncated payload, {len(data) - offset} of {need - offset} bytes")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset)


def write_pfm(path: Union[str, Path], values: np.ndarray) -> Path:
    path = Path(path)
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise DimensionMismatch(f"PFM writer expects a 2D array, got {values.shape}")
    height, width = values.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(values).tobytes())
    return path


def read_pfm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, width, height, scale), offset = _read_tokens(data, 4)
    if magic not in (b"Pf", b"PF"):
        raise DimensionMismatch(f"{path}: not a PFM file")
    channels = 3 if magic == b"PF" else 1
    width, height, scale = int(width), int(height), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"

    count = width * height * channels
    values = _payload(data, offset, dtype, count, path)
    shape = (height, width, channels) if channels == 3 else (height, width)
    return np.flipud(values.reshape(shape)).astype(np.float64)


def write_pgm_mask(path: Union[str, Path], mask: np.ndarray) -> Path:
    path = Path(path)
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())
    return path


def read_pgm_mask(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, width, height, maxval), offset = _read_tokens(data, 4)
    if magic != b"P5" or int(maxval) > 255:
        raise DimensionMismatch(f"{path}: expected an 8-bit binary PGM")
    width, height = int(width), int(height)
    values = _payload(data, offset, np.uint8, width * height, path)
    return values.reshape(height, width) > 0


def write_ppm(path: Union[str, Path], image: RgbImage) -> Path:
    path = Path(path)
    quantized = np.round(image.values * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())
    return path


def read_ppm(path: Union[str, Path]) -> RgbImage:
    data = Path(path).read_bytes()
    (magic, width, height, maxval), offset = _read_tokens(data, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise DimensionMismatch(f"{path}: expected a binary PPM with maxval 255")
    width, height = int(width), int(height)
    values = _payload(data, offset, np.uint8, width * height * 3, path)
    return RgbImage(values.reshape(height, width, 3).astype(np.float64) / 255.0)


def depth_paths(base: Union[str, Path]) -> Tuple[Path, Path]:
    """``<base>.pfm`` and its ``<base>.mask.pgm`` sibling."""
    base = Path(base)
    return base.with_name(base.name + ".pfm"), base.with_name(base.name + ".mask.pgm")


def write_depth(base: Union[str, Path], depth: DepthMap) -> Tuple[Path, Path]:
    pfm_path, mask_path = depth_paths(base)
    write_pfm(pfm_path, depth.values)
    write_pgm_mask(mask_path, depth.valid)
    return pfm_path, mask_path


def read_depth(base: Union[str, Path]) -> DepthMap:
    pfm_path, mask_path = depth_paths(base)
    values = read_pfm(pfm_path)
    valid = read_pgm_mask(mask_path) if mask_path.exists() else values > 0
    if values.shape != valid.shape:
        raise DimensionMismatch(f"{pfm_path} and {mask_path} disagree on raster size")
    return DepthMap.from_array(values, valid)
