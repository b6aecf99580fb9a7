"""Affinities from patch hierarchies, averaged over a sliding window."""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import Offset, as_image
from .model import InpaintModel
from .splitter import SplitConfig, SegmentTree, hierarchical_split

ATTRACTIVE_OFFSETS = (Offset(-1, 0), Offset(0, -1))
REPULSIVE_OFFSETS = (
    Offset(-9, 0), Offset(0, -9), Offset(-9, -9), Offset(9, -9), Offset(-9, -4),
    Offset(-4, -9), Offset(4, -9), Offset(9, -4), Offset(-27, 0), Offset(0, -27),
)


@dataclass(frozen=True)
class AffinityNeighborhood:
    attractive: tuple[Offset, ...] = ATTRACTIVE_OFFSETS
    repulsive: tuple[Offset, ...] = REPULSIVE_OFFSETS

    @property
    def offsets(self) -> tuple[Offset, ...]:
        return tuple(self.attractive) + tuple(self.repulsive)

    @property
    def n_attractive(self) -> int:
        return len(self.attractive)

    @property
    def max_extent(self) -> int:
        return max(max(abs(o.dy), abs(o.dx)) for o in self.offsets)


DEFAULT_NEIGHBORHOOD = AffinityNeighborhood()


def edge_slices(offset, shape):
    """Slices (src, dst) so that ``a[src]`` pairs with ``a[dst]`` at ``offset``.

    The affinity of edge (i, i + offset) is stored at pixel i.
    """
    dy, dx = offset
    h, w = shape

    def axis(d, n):
        if d >= 0:
            return slice(0, max(n - d, 0)), slice(d, n)
        return slice(-d, n), slice(0, max(n + d, 0))

    (sy, ty), (sx, tx) = axis(dy, h), axis(dx, w)
    return (sy, sx), (ty, tx)


def edge_valid(offset, shape) -> np.ndarray:
    """True where both endpoints of edge (i, i + offset) lie inside ``shape``."""
    valid = np.zeros(shape, dtype=bool)
    src, _ = edge_slices(offset, shape)
    valid[src] = True
    return valid


def label_affinities(labels, offsets) -> tuple[np.ndarray, np.ndarray]:
    """Binary same-label affinities and their validity, shape (n_offsets, h, w)."""
    labels = np.asarray(labels)
    aff = np.zeros((len(offsets),) + labels.shape, dtype=np.uint8)
    valid = np.zeros(aff.shape, dtype=bool)
    for k, off in enumerate(offsets):
        src, dst = edge_slices(off, labels.shape)
        aff[k][src] = labels[src] == labels[dst]
        valid[k][src] = True
    return aff, valid


def patch_affinities(tree: SegmentTree, nbhd: AffinityNeighborhood = DEFAULT_NEIGHBORHOOD):
    """Per-offset binary affinities of one patch from its leaves.

    Edges leaving the patch are marked invalid.
    """
    return label_affinities(tree.leaf_labels(), nbhd.offsets)


@dataclass(frozen=True)
class SweepConfig:
    patch_size: int = 48
    stride: int = 24
    split: SplitConfig = field(default_factory=SplitConfig)
    seed: int = 0
    neighborhood: AffinityNeighborhood = DEFAULT_NEIGHBORHOOD

    def __post_init__(self):
        if self.stride < 1 or self.stride > self.patch_size:
            raise ValueError("stride must be in [1, patch_size]")
        if self.patch_size <= self.neighborhood.max_extent:
            raise ValueError(
                f"offset exceeds patch: patch_size {self.patch_size} must exceed "
                f"the largest offset extent {self.neighborhood.max_extent}")


@dataclass
class AffinityField:
    """Averaged affinities; ``weights`` is NaN where ``counts`` is zero."""

    offsets: tuple[Offset, ...]
    weights: np.ndarray  # (n_offsets, h, w) float64
    counts: np.ndarray   # (n_offsets, h, w) uint32

    @property
    def shape(self):
        return self.weights.shape[1:]

    @classmethod
    def from_sums(cls, offsets, positive, counts) -> "AffinityField":
        counts = np.asarray(counts, dtype=np.uint32)
        weights = np.full(counts.shape, np.nan)
        defined = counts > 0
        weights[defined] = positive[defined].astype(np.float64) / counts[defined]
        return cls(tuple(Offset(*o) for o in offsets), weights, counts)


def patch_origins(length: int, patch: int, stride: int) -> list[int]:
    if length < patch:
        raise ValueError(f"image side {length} is smaller than the patch size {patch}")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def patch_seed(seed: int, row: int, col: int) -> int:
    """Seed of the patch at (row, col); independent of processing order."""
    return int(np.random.SeedSequence([seed, row, col]).generate_state(1)[0])


def _run_patch(args):
    model, image, y0, x0, cfg = args
    p = cfg.patch_size
    sub = image[y0:y0 + p, x0:x0 + p]
    split_cfg = replace(cfg.split, seed=patch_seed(cfg.seed, y0, x0))
    tree = hierarchical_split(model.crop(y0, x0, p, p), sub, split_cfg, bounds=(y0, x0))
    return y0, x0, patch_affinities(tree, cfg.neighborhood)


def sweep(image, model: InpaintModel, cfg: SweepConfig, workers: int = 1,
          skip=()) -> AffinityField:
    """Average patch affinities over a sliding window.

    ``skip`` lists patch origins (y0, x0) to leave out.
    """
    image = as_image(image)
    h, w = image.shape
    offsets = cfg.neighborhood.offsets
    skip = set(map(tuple, skip))
    jobs = [(model, image, y0, x0, cfg)
            for y0 in patch_origins(h, cfg.patch_size, cfg.stride)
            for x0 in patch_origins(w, cfg.patch_size, cfg.stride)
            if (y0, x0) not in skip]
    positive = np.zeros((len(offsets), h, w), dtype=np.int64)
    counts = np.zeros((len(offsets), h, w), dtype=np.int64)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_patch, jobs))
    else:
        results = [_run_patch(job) for job in jobs]
    p = cfg.patch_size
    for y0, x0, (aff, valid) in results:
        positive[:, y0:y0 + p, x0:x0 + p] += aff * valid
        counts[:, y0:y0 + p, x0:x0 + p] += valid
    return AffinityField.from_sums(offsets, positive, counts)


# --- IAF1 files -------------------------------------------------------------

MAGIC = b"IAF1"


def write_field(path, fld: AffinityField) -> None:
    n, h, w = fld.weights.shape
    parts = [MAGIC, struct.pack("<III", h, w, n)]
    for off in fld.offsets:
        parts.append(struct.pack("<ii", off.dy, off.dx))
    weights = np.where(fld.counts > 0, fld.weights, np.nan).astype("<f4")
    parts.append(weights.tobytes())
    parts.append(fld.counts.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_field(path) -> AffinityField:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an IAF1 affinity file")
    h, w, n = struct.unpack_from("<III", data, 4)
    pos = 16
    offsets = []
    for _ in range(n):
        dy, dx = struct.unpack_from("<ii", data, pos)
        offsets.append(Offset.of(dy, dx))
        pos += 8
    size = n * h * w
    expected = pos + size * 8
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    weights = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(n, h, w)
    counts = np.frombuffer(data, dtype="<u4", count=size, offset=pos + size * 4).reshape(n, h, w)
    return AffinityField(tuple(offsets), weights.astype(np.float64), counts.astype(np.uint32))
