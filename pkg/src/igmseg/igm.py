"""Information-gain quantities over pixel masks.

Sign conventions used throughout:

* ``rig`` (relative information gain, NLL surrogate) is positive when the
  mask side predicts the pixel better than the complement side.
* ``igm_banded`` is the quantity the splitter minimises. It adds ``-rig`` for
  band pixels inside the mask and ``+rig`` for band pixels outside, so a
  pixel placed on the side that explains it better lowers the measure. The
  measure is symmetric under swapping the mask with its complement.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .grid import as_image, as_mask, mask_boundary_band
from .model import InpaintModel, PixelDistribution, gaussian_nll, predict


def kl_gaussian(p: PixelDistribution, q: PixelDistribution):
    """KL(p || q) between univariate Gaussians; broadcasts over arrays."""
    mp, vp = np.asarray(p[0], dtype=np.float64), np.asarray(p[1], dtype=np.float64)
    mq, vq = np.asarray(q[0], dtype=np.float64), np.asarray(q[1], dtype=np.float64)
    for arr in (mp, vp, mq, vq):
        if not np.all(np.isfinite(arr)):
            raise ValueError("kl_gaussian needs finite parameters")
    if np.any(vp <= 0) or np.any(vq <= 0):
        raise ValueError("kl_gaussian needs positive variances")
    kl = 0.5 * np.log(vq / vp) + (vp + (mp - mq) ** 2) / (2.0 * vq) - 0.5
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def ig_exact(model: InpaintModel, image, pixel, mask) -> float:
    """KL between predicting ``pixel`` from everything and from ``mask`` only."""
    image = as_image(image)
    mask = as_mask(mask, image.shape)
    target = np.zeros(image.shape, dtype=bool)
    target[pixel] = True
    full = predict(model, image, np.ones_like(target), target)
    partial = predict(model, image, mask, target)
    return kl_gaussian(full.at(0), partial.at(0))


class RigMap(NamedTuple):
    """RIG values on a band; ``values`` follow ``np.flatnonzero(band)``.

    ``nll_mask`` / ``nll_complement`` hold each side's reconstruction error.
    """

    band: np.ndarray
    values: np.ndarray
    nll_mask: np.ndarray
    nll_complement: np.ndarray

    def as_grid(self, fill: float = 0.0) -> np.ndarray:
        grid = np.full(self.band.shape, fill, dtype=np.float64)
        grid[self.band] = self.values
        return grid


def side_errors(model: InpaintModel, image, targets, mask, context=None):
    """Reconstruction error of ``targets`` given each side of the split.

    ``context`` pixels are observed by both sides. Both conditionals exclude
    every target, so one model evaluation per side suffices.
    """
    image = as_image(image)
    targets = as_mask(targets, image.shape)
    mask = as_mask(mask, image.shape)
    if context is None:
        context = np.zeros_like(mask)
    complement = ~mask & ~context
    x = image[targets]
    pm = predict(model, image, (mask | context) & ~targets, targets)
    pc = predict(model, image, (complement | context) & ~targets, targets)
    return gaussian_nll(x, pm.mean, pm.variance), gaussian_nll(x, pc.mean, pc.variance)


def rig_surrogate(model: InpaintModel, image, targets, mask, context=None) -> RigMap:
    """RIG of every target: complement-side NLL minus mask-side NLL."""
    targets = as_mask(targets)
    e_mask, e_comp = side_errors(model, image, targets, mask, context)
    return RigMap(targets, e_comp - e_mask, e_mask, e_comp)


def banded_measure(band, mask, rig_values) -> float:
    """Sum of ``+rig`` over band pixels outside ``mask`` and ``-rig`` inside."""
    inside = np.asarray(mask)[np.asarray(band)]
    terms = np.where(inside, -rig_values, rig_values)
    return math.fsum(terms.tolist())


def igm_banded(model: InpaintModel, image, mask, d: float, region=None) -> float:
    """Banded information-gain measure of a split.

    With ``region`` given the split is restricted to those pixels and pixels
    outside it are observed by both sides.
    """
    image = as_image(image)
    mask = as_mask(mask, image.shape)
    context = None
    if region is not None:
        region = as_mask(region, image.shape)
        mask = mask & region
        context = ~region
    band = mask_boundary_band(mask, d, region)
    if not band.any():
        return 0.0
    rig = rig_surrogate(model, image, band, mask, context)
    return banded_measure(band, mask, rig.values)
