"""Greedy split evolution and recursive patch decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .grid import as_image, as_mask, mask_boundary_band
from .igm import banded_measure, side_errors
from .model import InpaintModel

DEFAULT_SIGMAS = (0.1, 1.0, 5.0, 10.0)


@dataclass(frozen=True)
class SplitConfig:
    iterations: int = 20
    d0: float = 6.0
    smoothing_sigmas: Sequence[float] = DEFAULT_SIGMAS
    min_region: int = 16
    max_depth: int = 8
    seed: int = 0
    # False holds the band radius at d0 for every iteration.
    schedule: bool = True
    normalized_smoothing: bool = True
    # Initial splits tried per region before declaring it a leaf: the seeded
    # orientation, then the other one, then seeded random cut positions.
    attempts: int = 2
    # Opt-in: reject steps that raise the measure (see evolve_mask).
    monotone: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.d0 < 1:
            raise ValueError("d0 must be >= 1")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")
        if self.max_depth < 0 or self.min_region < 0:
            raise ValueError("max_depth and min_region must be non-negative")
        object.__setattr__(self, "smoothing_sigmas", tuple(float(s) for s in self.smoothing_sigmas))


def band_radius(t: int, cfg: SplitConfig) -> float:
    """Band radius at iteration ``t``.

    Constant ``d0`` for the first half, then linear down to 1 at the last
    iteration; every odd iteration uses 1.
    """
    if not cfg.schedule:
        return float(cfg.d0)
    if t % 2 == 1:
        return 1.0
    T = cfg.iterations
    start = math.ceil(T / 2)
    if t < start:
        return float(cfg.d0)
    span = T - 1 - start
    if span <= 0:
        return 1.0
    return float(cfg.d0) + (1.0 - float(cfg.d0)) * (t - start) / span


def smooth_errors(errors: np.ndarray, sigmas: Sequence[float], support=None) -> np.ndarray:
    """Pixel-wise error plus its Gaussian blurs at each sigma.

    With ``support`` given, each blur is a normalised convolution over the
    support pixels only, so sparse maps are averaged rather than diluted.
    """
    out = errors.copy()
    for sigma in sigmas:
        blurred = ndimage.gaussian_filter(errors, sigma, mode="constant", cval=0.0, truncate=4.0)
        if support is not None:
            weight = ndimage.gaussian_filter(support.astype(np.float64), sigma, mode="constant",
                                             cval=0.0, truncate=4.0)
            blurred = np.divide(blurred, weight, out=np.zeros_like(blurred), where=weight > 0)
        out += blurred
    return out


def _node_rng(seed: int, path: tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=path))


def initial_split(shape, seed: int = 0, orientation: Optional[str] = None,
                  region=None, fraction: float = 0.5) -> Optional[np.ndarray]:
    """Half-plane split of a patch (or of a region's bounding box).

    ``orientation`` is ``"vertical"`` (mask = left columns) or
    ``"horizontal"`` (mask = top rows); when omitted a seeded coin decides.
    The cut sits at ``fraction`` of the extent, rounded up, so the mask side
    gets the extra row/column of an odd-sized halving. For a region whose
    split is degenerate in both orientations, returns ``None``.
    """
    h, w = int(shape[0]), int(shape[1])
    if region is None:
        if h < 2 or w < 2:
            raise ValueError(f"cannot split a {h}x{w} patch")
        region = np.ones((h, w), dtype=bool)
    else:
        region = as_mask(region, (h, w))
    if orientation is None:
        orientation = "vertical" if np.random.default_rng(seed).integers(2) == 0 else "horizontal"
    if orientation not in ("vertical", "horizontal"):
        raise ValueError(f"unknown orientation {orientation!r}")
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    order = [orientation, "horizontal" if orientation == "vertical" else "vertical"]
    rows, cols = np.nonzero(region)
    if rows.size < 2:
        return None
    for kind in order:
        coords = cols if kind == "vertical" else rows
        lo, hi = coords.min(), coords.max()
        cut = lo + math.ceil((hi - lo + 1) * fraction)
        grid = np.arange(w)[None, :] if kind == "vertical" else np.arange(h)[:, None]
        mask = region & (grid < cut)
        if mask.any() and (region & ~mask).any():
            return mask
    return None


def _evaluate(model, image, mask, d, cfg, region, context):
    """Band, raw RIG, update RIG (smoothed if configured) and both measures."""
    band = mask_boundary_band(mask, d, region)
    e_mask, e_comp = side_errors(model, image, band, mask, context)
    raw = e_comp - e_mask
    rig = raw
    if cfg.smoothing_sigmas and band.any():
        grid_mask = np.zeros(image.shape)
        grid_comp = np.zeros(image.shape)
        grid_mask[band] = e_mask
        grid_comp[band] = e_comp
        support = band if cfg.normalized_smoothing else None
        rig = (smooth_errors(grid_comp, cfg.smoothing_sigmas, support)
               - smooth_errors(grid_mask, cfg.smoothing_sigmas, support))[band]
    return band, raw, rig, banded_measure(band, mask, raw), banded_measure(band, mask, rig)


def evolve_mask(model: InpaintModel, image, mask0, cfg: SplitConfig, region=None):
    """Greedily evolve a split to lower the banded information-gain measure.

    Every band pixel moves to the side whose RIG sign favours it. With
    ``cfg.monotone`` a step that would raise the measure (at the same band
    radius) is cut back to the most confident half of its flips, a few times,
    and dropped if it still does not descend.

    Returns the final mask and the measure recorded before every update plus
    once for the final mask. Stops early when one side becomes empty, or
    when a fixed-radius unsmoothed run stalls.
    """
    image = as_image(image)
    if region is None:
        region = np.ones(image.shape, dtype=bool)
        context = None
    else:
        region = as_mask(region, image.shape)
        context = ~region
    mask = as_mask(mask0, image.shape) & region
    if not mask.any() or not (region & ~mask).any():
        raise ValueError("initial mask must be a non-empty proper subset of the region")

    def evaluate(m, d):
        return _evaluate(model, image, m, d, cfg, region, context)

    trace = []
    cached = None  # (d, evaluation) of the current mask
    d = float(cfg.d0)
    for t in range(cfg.iterations):
        d = band_radius(t, cfg)
        if cached is not None and cached[0] == d:
            band, raw, rig, measure, objective = cached[1]
        else:
            band, raw, rig, measure, objective = evaluate(mask, d)
        trace.append(measure)
        claimed = np.zeros_like(band)
        claimed[band] = rig > 0
        candidate = (mask & ~band) | claimed
        cached = None
        if cfg.monotone:
            candidate, cached = _descend(evaluate, mask, candidate, band, rig, d, objective)
            if candidate is mask:
                if not cfg.schedule and (band_radius(t + 1, cfg) == d):
                    break
                continue
        mask = candidate
        if not mask.any() or not (region & ~mask).any():
            trace.append(0.0)
            return mask, trace
    if cached is not None and cached[0] == d:
        trace.append(cached[1][3])
    else:
        trace.append(evaluate(mask, d)[3])
    return mask, trace


def _descend(evaluate, mask, candidate, band, rig, d, objective, halvings=3):
    """Largest prefix of the flips (by |RIG|) that does not raise the objective."""
    flips = np.flatnonzero(candidate != mask)
    if flips.size == 0:
        return mask, None
    strength = np.zeros(mask.shape)
    strength[band] = np.abs(rig)
    order = flips[np.argsort(-strength.ravel()[flips], kind="stable")]
    keep = flips.size
    for _ in range(halvings + 1):
        trial = mask.copy().ravel()
        trial[order[:keep]] = ~trial[order[:keep]]
        trial = trial.reshape(mask.shape)
        result = evaluate(trial, d)
        if result[4] <= objective:
            return trial, (d, result)
        if keep == 1:
            break
        keep = (keep + 1) // 2
    return mask, None


@dataclass
class SegmentNode:
    mask: np.ndarray
    children: tuple["SegmentNode", ...] = ()
    trace: list = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class SegmentTree:
    """Binary split hierarchy of one patch; leaves partition the patch."""

    bounds: tuple[int, int, int, int]  # y0, x0, height, width
    root: SegmentNode

    def leaves(self) -> list[SegmentNode]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def leaf_labels(self) -> np.ndarray:
        labels = np.zeros(self.root.mask.shape, dtype=np.int64)
        for k, leaf in enumerate(self.leaves(), 1):
            labels[leaf.mask] = k
        return labels

    def depth(self) -> int:
        def _depth(node):
            return 0 if node.is_leaf else 1 + max(_depth(c) for c in node.children)
        return _depth(self.root)


def hierarchical_split(model: InpaintModel, image, cfg: SplitConfig,
                       bounds=(0, 0, None, None)) -> SegmentTree:
    """Recursively split a patch until splits stop producing two sides."""
    image = as_image(image)

    def recurse(region, depth, path):
        node = SegmentNode(region)
        if depth >= cfg.max_depth or region.sum() < cfg.min_region:
            return node
        seed_rng = _node_rng(cfg.seed, path)
        first = "vertical" if seed_rng.integers(2) == 0 else "horizontal"
        other = "horizontal" if first == "vertical" else "vertical"
        whole = region.all()
        tried = []
        for k in range(cfg.attempts):
            if k < 2:
                orientation, fraction = (first, other)[k], 0.5
            else:
                orientation = ("vertical", "horizontal")[seed_rng.integers(2)]
                fraction = seed_rng.uniform(0.25, 0.75)
            mask0 = initial_split(image.shape, orientation=orientation, region=region,
                                  fraction=fraction)
            if mask0 is None or any(np.array_equal(mask0, m) for m in tried):
                continue
            tried.append(mask0)
            mask, trace = evolve_mask(model, image, mask0, cfg, None if whole else region)
            node.trace = trace
            rest = region & ~mask
            if mask.any() and rest.any():
                break
        else:
            return node
        node.children = (recurse(mask, depth + 1, path + (0,)),
                         recurse(rest, depth + 1, path + (1,)))
        return node

    root = recurse(np.ones(image.shape, dtype=bool), 0, ())
    y0, x0 = bounds[0], bounds[1]
    return SegmentTree((y0, x0, image.shape[0], image.shape[1]), root)
