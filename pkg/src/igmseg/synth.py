"""Synthetic instance images whose segments are independent by construction.

Each segment (every blob, plus the background as segment 0) draws its own
weight vector ``w ~ N(m0, diag(v0))`` and renders ``x = phi(p) . w + noise``
where ``phi`` holds a constant and a few random-direction cosine/sine pairs
at spatial frequency ``1 / correlation_length``. The generator hands the
exact same laws to :class:`~igmseg.model.OracleBlobModel`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .model import OracleBlobModel, SegmentLaw

@dataclass(frozen=True)
class GenConfig:
    height: int = 96
    width: int = 96
    instances: tuple[int, int] = (3, 5)
    radius: tuple[float, float] = (9.0, 15.0)
    base_mean: float = 0.6
    base_variance: float = 0.02
    field_variance: float = 0.004
    correlation_length: float = 6.0
    noise_variance: float = 1e-4
    background_mean: float = 0.15
    background_variance: float = 0.002
    touching_probability: float = 0.8
    n_waves: int = 3
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.instances
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid instance range {self.instances}")
        rlo, rhi = self.radius
        if rlo <= 1 or rhi < rlo:
            raise ValueError(f"invalid radius range {self.radius}")
        if min(self.height, self.width) < 4:
            raise ValueError("image too small")
        for name in ("base_variance", "field_variance", "noise_variance", "background_variance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.touching_probability <= 1.0:
            raise ValueError("touching_probability must be in [0, 1]")
        if self.correlation_length <= 0:
            raise ValueError("correlation_length must be positive")


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    oracle: OracleBlobModel
    requested: int = 0
    placed: int = 0

    def __iter__(self):
        return iter((self.image, self.labels, self.oracle))


def _segment_law(cfg: GenConfig, rng, mean: float, variance: float) -> SegmentLaw:
    k = cfg.n_waves
    angle0 = rng.uniform(0.0, math.pi)
    angles = angle0 + math.pi * np.arange(k) / max(k, 1)
    omega = 1.0 / cfg.correlation_length
    freqs = np.stack([omega * np.sin(angles), omega * np.cos(angles)], axis=1)
    # Floor keeps the prior precision finite for degenerate configs.
    wave_var = max(cfg.field_variance / max(k, 1), 1e-12)
    prior_mean = np.concatenate([[mean], np.zeros(2 * k)])
    prior_var = np.concatenate([[max(variance, 1e-12)], np.full(2 * k, wave_var)])
    return SegmentLaw(freqs.reshape(k, 2), prior_mean, prior_var)


def _blob_shape(cfg: GenConfig, rng) -> np.ndarray:
    """Footprint of an irregular superellipse centred in its own window."""
    a, b = rng.uniform(cfg.radius[0], cfg.radius[1], size=2)
    p = rng.uniform(1.6, 3.0)
    theta = rng.uniform(0.0, math.pi)
    harmonics = rng.normal(0.0, 0.06, size=3)
    phases = rng.uniform(0.0, 2 * math.pi, size=3)
    r = int(math.ceil(max(a, b) * 1.25)) + 1
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    u = xx * math.cos(theta) + yy * math.sin(theta)
    v = -xx * math.sin(theta) + yy * math.cos(theta)
    rho = (np.abs(u / a) ** p + np.abs(v / b) ** p) ** (1.0 / p)
    ang = np.arctan2(v / b, u / a)
    wobble = 1.0 + sum(c * np.cos((k + 2) * ang + ph) for k, (c, ph) in enumerate(zip(harmonics, phases)))
    shape = rho <= wobble
    shape[r, r] = True
    return shape


def _stamp(shape: np.ndarray, center, size) -> np.ndarray | None:
    """Place ``shape`` at ``center``; None if any part falls outside."""
    h, w = size
    r = shape.shape[0] // 2
    cy, cx = center
    if cy - r < 0 or cx - r < 0 or cy + r >= h or cx + r >= w:
        # allow only if the clipped part is empty
        ys, xs = np.nonzero(shape)
        ys, xs = ys + cy - r, xs + cx - r
        if ys.min() < 0 or xs.min() < 0 or ys.max() >= h or xs.max() >= w:
            return None
        out = np.zeros(size, dtype=bool)
        out[ys, xs] = True
        return out
    out = np.zeros(size, dtype=bool)
    out[cy - r:cy + r + 1, cx - r:cx + r + 1] = shape
    return out


def shared_boundary(a: np.ndarray, b: np.ndarray) -> int:
    """Number of 4-adjacent pixel pairs between two disjoint masks."""
    n = np.count_nonzero(a[1:, :] & b[:-1, :]) + np.count_nonzero(a[:-1, :] & b[1:, :])
    n += np.count_nonzero(a[:, 1:] & b[:, :-1]) + np.count_nonzero(a[:, :-1] & b[:, 1:])
    return int(n)


def _place_touching(cfg, rng, blobs, occupied):
    size = (cfg.height, cfg.width)
    anchor = blobs[int(rng.integers(len(blobs)))]
    shape = _blob_shape(cfg, rng)
    ys, xs = np.nonzero(anchor)
    cy, cx = ys.mean(), xs.mean()
    angle = rng.uniform(0.0, 2 * math.pi)
    dy, dx = math.sin(angle), math.cos(angle)
    for step in range(1, cfg.height + cfg.width):
        center = (int(round(cy + step * dy)), int(round(cx + step * dx)))
        stamp = _stamp(shape, center, size)
        if stamp is None:
            return None
        if (stamp & occupied).any():
            continue
        if shared_boundary(stamp, anchor) >= 3:
            return stamp
        return None
    return None


def _place_free(cfg, rng, occupied):
    size = (cfg.height, cfg.width)
    shape = _blob_shape(cfg, rng)
    r = shape.shape[0] // 2
    if 2 * r + 1 > min(size):
        return None
    center = (int(rng.integers(r, size[0] - r)), int(rng.integers(r, size[1] - r)))
    stamp = _stamp(shape, center, size)
    if stamp is None:
        return None
    # Free blobs keep at least a two-pixel gap to everything else.
    halo = ndimage.binary_dilation(occupied, structure=np.ones((5, 5), dtype=bool))
    if (stamp & halo).any():
        return None
    return stamp


def place_blobs(cfg: GenConfig, rng, count: int) -> list[np.ndarray]:
    blobs: list[np.ndarray] = []
    occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
    for _ in range(count):
        for _attempt in range(cfg.max_retries):
            touching = bool(blobs) and rng.uniform() < cfg.touching_probability
            stamp = _place_touching(cfg, rng, blobs, occupied) if touching else _place_free(cfg, rng, occupied)
            if stamp is not None and stamp.any():
                blobs.append(stamp)
                occupied |= stamp
                break
        else:
            break
    return blobs


def generate(cfg: GenConfig) -> Sample:
    """Draw an image, its true labels and the matching oracle model."""
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.instances
    count = int(rng.integers(lo, hi + 1))
    blobs = place_blobs(cfg, rng, count)
    if len(blobs) < count:
        warnings.warn(f"placed {len(blobs)} of {count} instances", RuntimeWarning)
    labels = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    for k, blob in enumerate(blobs, 1):
        labels[blob] = k
    laws = {0: _segment_law(cfg, rng, cfg.background_mean, cfg.background_variance)}
    for k in range(1, len(blobs) + 1):
        laws[k] = _segment_law(cfg, rng, cfg.base_mean, cfg.base_variance)
    image = np.zeros(labels.shape)
    rows, cols = np.indices(labels.shape)
    for u, law in laws.items():
        sel = labels == u
        w = rng.normal(law.prior_mean, np.sqrt(law.prior_variance))
        phi = law.features(rows[sel], cols[sel])
        image[sel] = phi @ w
    if cfg.noise_variance > 0:
        image = image + rng.normal(0.0, math.sqrt(cfg.noise_variance), size=image.shape)
    oracle = OracleBlobModel(labels, laws, cfg.noise_variance)
    return Sample(image, labels, oracle, count, len(blobs))


def true_foreground(labels: np.ndarray) -> np.ndarray:
    return np.asarray(labels) > 0
