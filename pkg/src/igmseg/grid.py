"""Spatial primitives shared across the pipeline.

Images are float64 arrays of shape (height, width), masks are bool arrays of
the same shape and label maps are non-negative integer arrays with 0 reserved
for background. Coordinates are (row, col), stored row-major.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

# A requested radius of 1 would admit no neighbour under the strict "<" rule.
# Clamp so 4-neighbours (distance 1) qualify while diagonals (sqrt 2) do not.
MIN_BAND_RADIUS = 1.25


class Offset(NamedTuple):
    dy: int
    dx: int

    @classmethod
    def of(cls, dy, dx) -> "Offset":
        dy, dx = int(dy), int(dx)
        if dy == 0 and dx == 0:
            raise ValueError("offset (0, 0) is not an edge")
        return cls(dy, dx)

    @property
    def length(self) -> float:
        return math.hypot(self.dy, self.dx)


def as_image(values) -> np.ndarray:
    image = np.asarray(values, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"image must be a non-empty 2-D array, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite intensities")
    return image


def as_mask(values, shape=None) -> np.ndarray:
    mask = np.asarray(values, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match {tuple(shape)}")
    return mask


def as_labels(values, shape=None) -> np.ndarray:
    labels = np.asarray(values)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if shape is not None and labels.shape != tuple(shape):
        raise ValueError(f"label map shape {labels.shape} does not match {tuple(shape)}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("label map must hold integers")
    labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    return labels


def pixel_index(row: int, col: int, width: int, height: int | None = None) -> int:
    """Row-major linear index of (row, col)."""
    if width < 1:
        raise ValueError("width must be positive")
    if not 0 <= col < width:
        raise IndexError(f"column {col} outside [0, {width})")
    if row < 0 or (height is not None and row >= height):
        raise IndexError(f"row {row} outside [0, {height})")
    return row * width + col


def pixel_coords(index: int, width: int) -> tuple[int, int]:
    if index < 0:
        raise IndexError(f"negative index {index}")
    return divmod(index, width)


def disc_footprint(radius: float) -> np.ndarray:
    """Boolean footprint of all offsets strictly closer than ``radius``."""
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) < radius * radius


def mask_boundary_band(mask, d: float, region=None) -> np.ndarray:
    """Pixels whose radius-``d`` disc meets both ``mask`` and its complement.

    With ``region`` given, the complement is taken inside the region only and
    the band is restricted to region pixels.
    """
    if d < 1:
        raise ValueError(f"band radius must be >= 1, got {d}")
    mask = as_mask(mask)
    if region is None:
        region = np.ones_like(mask)
    else:
        region = as_mask(region, mask.shape)
    inside = mask & region
    outside = region & ~mask
    if not inside.any() or not outside.any():
        return np.zeros_like(mask)
    footprint = disc_footprint(max(float(d), MIN_BAND_RADIUS))
    near_inside = ndimage.binary_dilation(inside, structure=footprint)
    near_outside = ndimage.binary_dilation(outside, structure=footprint)
    return near_inside & near_outside & region


# --- PGM ------------------------------------------------------------------

def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError("truncated PGM header")
    return data[start:pos], pos


def read_pgm_raw(path) -> tuple[np.ndarray, int]:
    """Return the stored integer samples and maxval of a binary P5 file."""
    data = Path(path).read_bytes()
    magic, pos = _read_header_token(data, 0)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    width, pos = _read_header_token(data, pos)
    height, pos = _read_header_token(data, pos)
    maxval, pos = _read_header_token(data, pos)
    width, height, maxval = int(width), int(height), int(maxval)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    raster = data[pos:pos + count * dtype.itemsize]
    if len(raster) != count * dtype.itemsize:
        raise ValueError(f"{path}: truncated raster")
    samples = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return samples.astype(np.int64), maxval


def _write_pgm(path, samples: np.ndarray, maxval: int) -> None:
    height, width = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + samples.astype(dtype).tobytes())


def read_image(path) -> np.ndarray:
    samples, maxval = read_pgm_raw(path)
    return samples.astype(np.float64) / maxval


def write_image(path, image, maxval: int = 65535) -> None:
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    image = as_image(image)
    samples = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    _write_pgm(path, samples, maxval)


def read_labels(path) -> np.ndarray:
    samples, _ = read_pgm_raw(path)
    return samples


def write_labels(path, labels) -> None:
    labels = as_labels(labels)
    if labels.size and labels.max() > 65535:
        raise ValueError("label values above 65535 cannot be stored in PGM")
    _write_pgm(path, labels, 65535)
