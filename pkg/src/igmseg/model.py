"""Probabilistic inpainting models.

Every model predicts, for a set of target pixels, an independent Gaussian over
each target's intensity given the intensities of an observed pixel set.
Targets are never used as evidence for each other: the conditioning set is
``observed & ~targets`` for all targets jointly.

Two analytic models are provided. :class:`LocalStatsModel` is a kernel
smoother fitted by held-out likelihood; :class:`OracleBlobModel` knows the
synthetic generator's law and the true segmentation and returns the exact
posterior predictive.
"""

from __future__ import annotations

import abc
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, optimize

from .grid import as_image, as_labels, as_mask, read_labels, write_labels

VARIANCE_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class PixelDistribution(NamedTuple):
    mean: float
    variance: float


class Prediction(NamedTuple):
    """Per-target Gaussians, ordered like ``np.flatnonzero(targets)``."""

    mean: np.ndarray
    variance: np.ndarray

    def __len__(self):
        return len(self.mean)

    def at(self, k: int) -> PixelDistribution:
        return PixelDistribution(float(self.mean[k]), float(self.variance[k]))


def gaussian_nll(x, mean, variance):
    """Elementwise negative log density of ``x`` under N(mean, variance)."""
    x, mean, variance = np.asarray(x), np.asarray(mean), np.asarray(variance)
    return 0.5 * (LOG_2PI + np.log(variance)) + (x - mean) ** 2 / (2.0 * variance)


class InpaintModel(abc.ABC):
    """Interface for conditional pixel models p(x_i | x_observed)."""

    variance_floor: float = VARIANCE_FLOOR

    @property
    @abc.abstractmethod
    def fov_radius(self) -> float:
        """Pixels farther than this from a target never influence it."""

    @abc.abstractmethod
    def predict(self, image: np.ndarray, observed: np.ndarray, targets: np.ndarray) -> Prediction:
        ...

    def crop(self, y0: int, x0: int, height: int, width: int) -> "InpaintModel":
        """Model for the sub-image ``image[y0:y0+height, x0:x0+width]``."""
        return self


def _check_inputs(image, observed, targets):
    image = as_image(image)
    observed = as_mask(observed, image.shape)
    targets = as_mask(targets, image.shape)
    return image, observed, targets


def predict(model: InpaintModel, image, observed, targets) -> Prediction:
    """Predict every target from ``observed`` minus the targets themselves."""
    image, observed, targets = _check_inputs(image, observed, targets)
    if not targets.any():
        empty = np.zeros(0)
        return Prediction(empty, empty.copy())
    return model.predict(image, observed, targets)


def inpaint_nll(model: InpaintModel, image, observed) -> float:
    """Summed negative log-likelihood of every unobserved pixel."""
    image = as_image(image)
    observed = as_mask(observed, image.shape)
    hidden = ~observed
    if not hidden.any():
        raise ValueError("inpaint_nll needs at least one unobserved pixel")
    pred = predict(model, image, observed, hidden)
    return math.fsum(gaussian_nll(image[hidden], pred.mean, pred.variance))


# --- local statistics model -------------------------------------------------

@dataclass(frozen=True)
class LocalStatsModel(InpaintModel):
    """Gaussian-kernel smoother with a constant prior outside its reach.

    The mean is the kernel-weighted average of observed pixels within
    ``fov_radius``; the variance is ``residual_variance / mass`` plus the
    floor, where ``mass`` is the summed kernel weight of those pixels.
    """

    bandwidth: float
    prior_mean: float = 0.5
    prior_variance: float = 0.1
    residual_variance: float = 1e-3
    variance_floor: float = VARIANCE_FLOOR
    _kernel: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.prior_variance < self.variance_floor:
            raise ValueError("prior_variance below the variance floor")
        if self.residual_variance < 0:
            raise ValueError("residual_variance must be non-negative")
        r = self.fov_radius
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        d2 = (yy * yy + xx * xx).astype(np.float64)
        kernel = np.exp(-d2 / (2.0 * self.bandwidth ** 2))
        kernel[d2 > r * r] = 0.0
        kernel.setflags(write=False)
        object.__setattr__(self, "_kernel", kernel)

    @property
    def fov_radius(self) -> int:
        return int(math.ceil(3.0 * self.bandwidth))

    def window_sums(self, image, observed, targets):
        """Kernel-weighted intensity sum and kernel mass at each target."""
        r = self.fov_radius
        k = 2 * r + 1
        obs = (observed & ~targets).astype(np.float64)
        vals = np.pad(image * obs, r)
        obs = np.pad(obs, r)
        rows, cols = np.nonzero(targets)
        dy, dx = np.mgrid[0:k, 0:k]
        rr = rows[:, None] + dy.ravel()[None, :]
        cc = cols[:, None] + dx.ravel()[None, :]
        w = self._kernel.ravel()[None, :]
        # Row-wise reductions over a C-contiguous (n, k*k) array: each target's
        # sum is independent of how many other targets are evaluated.
        num = np.add.reduce(np.ascontiguousarray(vals[rr, cc] * w), axis=1)
        mass = np.add.reduce(np.ascontiguousarray(obs[rr, cc] * w), axis=1)
        return num, mass

    def predict(self, image, observed, targets):
        num, mass = self.window_sums(image, observed, targets)
        seen = mass > 0
        mean = np.full(num.shape, self.prior_mean, dtype=np.float64)
        var = np.full(num.shape, self.prior_variance, dtype=np.float64)
        mean[seen] = num[seen] / mass[seen]
        var[seen] = self.residual_variance / mass[seen] + self.variance_floor
        return Prediction(mean, var)


def holdout_rectangles(shape, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Observed masks with one hidden axis-aligned rectangle each.

    The rectangle covers 10-50% of the image with a random aspect ratio and
    position.
    """
    h, w = shape
    masks = []
    for _ in range(n):
        frac = rng.uniform(0.1, 0.5)
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        area = frac * h * w
        rh = int(min(h, max(1, round(math.sqrt(area * aspect)))))
        rw = int(min(w, max(1, round(area / rh))))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        observed = np.ones(shape, dtype=bool)
        observed[y0:y0 + rh, x0:x0 + rw] = False
        if observed.all() or not observed.any():
            observed[0, 0] = not observed[0, 0]
        masks.append(observed)
    return masks


@dataclass
class BandwidthScore:
    bandwidth: float
    residual_variance: float
    mean_nll: float


def _fit_residual_variance(sq_err, mass, floor):
    """Residual variance minimising sum of Gaussian NLLs with var = r/m + floor."""
    if sq_err.size == 0:
        return 0.0

    def objective(log_r):
        var = math.exp(log_r) / mass + floor
        return float(np.sum(0.5 * np.log(var) + sq_err / (2.0 * var)))

    guess = float(np.mean(sq_err * mass))
    hi = math.log(max(guess, 1e-12) * 100.0)
    lo = math.log(1e-14)
    res = optimize.minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    # Noise-free data: the bounded search cannot reach r = 0 itself.
    zero = float(np.sum(0.5 * math.log(floor) + sq_err / (2.0 * floor)))
    return 0.0 if zero <= res.fun else math.exp(res.x)


def score_bandwidths(images: Sequence[np.ndarray], bandwidth_grid, n_masks: int = 8,
                     seed: int = 0, variance_floor: float = VARIANCE_FLOOR):
    """Held-out NLL of the best residual variance for every bandwidth.

    Returns the corpus prior (mean, variance) and one :class:`BandwidthScore`
    per grid entry. Mean NLL is averaged over (image, holdout mask) pairs.
    """
    images = [as_image(im) for im in images]
    if not images:
        raise ValueError("need at least one image")
    grid = [float(b) for b in bandwidth_grid]
    if not grid:
        raise ValueError("bandwidth grid is empty")
    pixels = np.concatenate([im.ravel() for im in images])
    prior_mean = float(np.mean(pixels))
    prior_variance = float(np.var(pixels))
    if prior_variance < variance_floor:
        warnings.warn("degenerate corpus: intensity variance below the floor", RuntimeWarning)
        prior_variance = variance_floor
    rng = np.random.default_rng(seed)
    holdouts = [(im, obs) for im in images for obs in holdout_rectangles(im.shape, n_masks, rng)]

    scores = []
    for b in grid:
        probe = LocalStatsModel(b, prior_mean, prior_variance, 0.0, variance_floor)
        sq_errs, masses, fallback = [], [], 0.0
        for im, obs in holdouts:
            hidden = ~obs
            num, mass = probe.window_sums(im, obs, hidden)
            x = im[hidden]
            seen = mass > 0
            sq_errs.append((x[seen] - num[seen] / mass[seen]) ** 2)
            masses.append(mass[seen])
            fallback += math.fsum(gaussian_nll(x[~seen], prior_mean, prior_variance))
        sq_err = np.concatenate(sq_errs)
        mass = np.concatenate(masses)
        r = _fit_residual_variance(sq_err, mass, variance_floor)
        var = r / mass + variance_floor
        total = math.fsum(0.5 * (LOG_2PI + np.log(var)) + sq_err / (2.0 * var)) + fallback
        scores.append(BandwidthScore(b, r, total / len(holdouts)))
    return prior_mean, prior_variance, scores


def fit_local_stats(images, bandwidth_grid=(1.0, 2.0, 4.0), n_masks: int = 8, seed: int = 0,
                    variance_floor: float = VARIANCE_FLOOR) -> LocalStatsModel:
    """Fit a :class:`LocalStatsModel` by minimising held-out inpainting NLL.

    Bandwidths whose score is within a relative 1e-9 of the best count as
    tied; the smallest of them wins.
    """
    prior_mean, prior_variance, scores = score_bandwidths(
        images, bandwidth_grid, n_masks, seed, variance_floor)
    best = min(s.mean_nll for s in scores)
    tol = 1e-9 * max(1.0, abs(best))
    chosen = min((s for s in scores if s.mean_nll <= best + tol), key=lambda s: s.bandwidth)
    return LocalStatsModel(chosen.bandwidth, prior_mean, prior_variance,
                           chosen.residual_variance, variance_floor)


# --- oracle model -------------------------------------------------------------

@dataclass(frozen=True)
class SegmentLaw:
    """Linear-Gaussian law of one segment: x = phi(p) . w + noise.

    ``phi(p) = [1, cos(f_k . p), sin(f_k . p) for each frequency f_k]`` with
    ``p`` the absolute (row, col) position and ``w ~ N(prior_mean,
    diag(prior_variance))``.
    """

    frequencies: np.ndarray  # (K, 2) radians per pixel, (row, col)
    prior_mean: np.ndarray   # (1 + 2K,)
    prior_variance: np.ndarray

    def features(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        phase = rows[:, None] * self.frequencies[None, :, 0] + cols[:, None] * self.frequencies[None, :, 1]
        return np.concatenate([np.ones((rows.size, 1)), np.cos(phase), np.sin(phase)], axis=1)


class OracleBlobModel(InpaintModel):
    """Exact posterior predictive of the synthetic generator.

    Segments (including background, label 0) are a-priori independent, so a
    target is conditioned only on observed pixels of its own segment.
    """

    def __init__(self, labels, laws: dict[int, SegmentLaw], noise_variance: float,
                 origin=(0, 0), variance_floor: float = VARIANCE_FLOOR):
        self.labels = as_labels(labels)
        self.laws = dict(laws)
        missing = set(np.unique(self.labels).tolist()) - set(self.laws)
        if missing:
            raise ValueError(f"no generative law for segments {sorted(missing)}")
        self.noise_variance = float(noise_variance)
        self.origin = (int(origin[0]), int(origin[1]))
        self.variance_floor = variance_floor
        n_feat = {law.prior_mean.size for law in self.laws.values()}
        if len(n_feat) != 1:
            raise ValueError("all segment laws must share the feature dimension")
        self._features = np.zeros(self.labels.shape + (n_feat.pop(),))
        for u in np.unique(self.labels):
            rows, cols = np.nonzero(self.labels == u)
            law = self.laws[int(u)]
            self._features[rows, cols] = law.features(rows + self.origin[0], cols + self.origin[1])

    @property
    def fov_radius(self) -> float:
        return math.inf

    @property
    def shape(self):
        return self.labels.shape

    def crop(self, y0, x0, height, width):
        sub = self.labels[y0:y0 + height, x0:x0 + width]
        laws = {u: self.laws[u] for u in np.unique(sub).tolist()}
        return OracleBlobModel(sub, laws, self.noise_variance,
                               (self.origin[0] + y0, self.origin[1] + x0), self.variance_floor)

    def predict(self, image, observed, targets):
        if image.shape != self.labels.shape:
            raise ValueError(f"image shape {image.shape} does not match oracle labels {self.labels.shape}")
        noise = max(self.noise_variance, self.variance_floor)
        evidence = observed & ~targets
        flat_targets = np.flatnonzero(targets)
        target_labels = self.labels.ravel()[flat_targets]
        feats = self._features.reshape(-1, self._features.shape[-1])
        mean = np.empty(flat_targets.size)
        var = np.empty(flat_targets.size)
        for u in np.unique(target_labels):
            law = self.laws[int(u)]
            seen = np.flatnonzero((evidence & (self.labels == u)).ravel())
            phi_o = feats[seen]
            precision = np.diag(1.0 / law.prior_variance) + phi_o.T @ phi_o / noise
            rhs = law.prior_mean / law.prior_variance + phi_o.T @ image.ravel()[seen] / noise
            factor = linalg.cho_factor(precision, lower=True)
            w_mean = linalg.cho_solve(factor, rhs)
            sel = np.flatnonzero(target_labels == u)
            phi_t = feats[flat_targets[sel]]
            mean[sel] = phi_t @ w_mean
            solved = linalg.cho_solve(factor, phi_t.T)
            var[sel] = np.maximum(noise + np.einsum("ij,ji->i", phi_t, solved), self.variance_floor)
        return Prediction(mean, var)

    def prior(self, row: int, col: int) -> PixelDistribution:
        """Predictive distribution of a pixel with nothing observed."""
        law = self.laws[int(self.labels[row, col])]
        phi = law.features([row + self.origin[0]], [col + self.origin[1]])[0]
        noise = max(self.noise_variance, self.variance_floor)
        return PixelDistribution(float(phi @ law.prior_mean),
                                 float(phi ** 2 @ law.prior_variance + noise))


# --- persistence ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_vec(v) -> str:
    return ",".join(_fmt(x) for x in np.ravel(v))


def save_model(model: InpaintModel, path, labels_path=None) -> None:
    """Write a model as plain ``key=value`` lines.

    Oracle models also need ``labels_path``; the label map is written there
    and referenced relative to the model file.
    """
    path = Path(path)
    lines = []
    if isinstance(model, LocalStatsModel):
        lines += [
            "model_type=local_stats",
            f"bandwidth={_fmt(model.bandwidth)}",
            f"prior_mean={_fmt(model.prior_mean)}",
            f"prior_variance={_fmt(model.prior_variance)}",
            f"residual_variance={_fmt(model.residual_variance)}",
            f"fov_radius={model.fov_radius}",
            f"variance_floor={_fmt(model.variance_floor)}",
        ]
    elif isinstance(model, OracleBlobModel):
        if labels_path is None:
            labels_path = path.with_suffix(".labels.pgm")
        labels_path = Path(labels_path)
        write_labels(labels_path, model.labels)
        try:
            ref = labels_path.resolve().relative_to(path.resolve().parent)
        except ValueError:
            ref = labels_path.resolve()
        lines += [
            "model_type=oracle",
            f"labels={ref}",
            f"noise_variance={_fmt(model.noise_variance)}",
            f"origin={model.origin[0]},{model.origin[1]}",
            f"fov_radius=inf",
            f"variance_floor={_fmt(model.variance_floor)}",
        ]
        for u in sorted(model.laws):
            law = model.laws[u]
            lines += [
                f"segment.{u}.frequencies={_fmt_vec(law.frequencies)}",
                f"segment.{u}.prior_mean={_fmt_vec(law.prior_mean)}",
                f"segment.{u}.prior_variance={_fmt_vec(law.prior_variance)}",
            ]
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    path.write_text("\n".join(lines) + "\n")


def load_model(path) -> InpaintModel:
    path = Path(path)
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    kind = values.get("model_type")
    floor = float(values.get("variance_floor", VARIANCE_FLOOR))
    if kind == "local_stats":
        model = LocalStatsModel(float(values["bandwidth"]), float(values["prior_mean"]),
                                float(values["prior_variance"]), float(values["residual_variance"]),
                                floor)
        if "fov_radius" in values and int(values["fov_radius"]) != model.fov_radius:
            raise ValueError(f"{path}: fov_radius inconsistent with bandwidth")
        return model
    if kind == "oracle":
        labels = read_labels(path.parent / values["labels"])
        laws = {}
        for key, value in values.items():
            if key.startswith("segment.") and key.endswith(".frequencies"):
                u = int(key.split(".")[1])
                vec = lambda name: np.array([float(t) for t in values[f"segment.{u}.{name}"].split(",") if t])
                laws[u] = SegmentLaw(vec("frequencies").reshape(-1, 2), vec("prior_mean"),
                                     vec("prior_variance"))
        origin = tuple(int(t) for t in values.get("origin", "0,0").split(","))
        return OracleBlobModel(labels, laws, float(values["noise_variance"]), origin, floor)
    raise ValueError(f"{path}: unknown model_type {kind!r}")
