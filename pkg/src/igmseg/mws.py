"""Mutex Watershed on an averaged affinity field."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .affinity import DEFAULT_NEIGHBORHOOD, AffinityField, AffinityNeighborhood, edge_slices
from .grid import as_labels, as_mask

ATTRACTIVE = 0
MUTEX = 1


@dataclass(frozen=True)
class MwsConfig:
    alpha: float = 1.0
    foreground: Optional[np.ndarray] = None
    min_segment: int = 0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if self.min_segment < 0:
            raise ValueError("min_segment must be non-negative")


class EdgeList(NamedTuple):
    """Parallel arrays; ``u``/``v`` are row-major pixel indices."""

    u: np.ndarray
    v: np.ndarray
    weight: np.ndarray
    kind: np.ndarray
    shape: tuple

    def __len__(self):
        return len(self.u)

    def order(self) -> np.ndarray:
        """Processing order: weight descending, attractive first, then (u, v)."""
        return np.lexsort((self.v, self.u, self.kind, -self.weight))

    def take(self, idx) -> "EdgeList":
        return EdgeList(self.u[idx], self.v[idx], self.weight[idx], self.kind[idx], self.shape)


def build_edges(fld: AffinityField, cfg: MwsConfig,
                nbhd: AffinityNeighborhood = DEFAULT_NEIGHBORHOOD) -> EdgeList:
    """One edge per defined affinity; repulsive offsets become mutex edges."""
    if tuple(fld.offsets) != nbhd.offsets:
        raise ValueError(f"field offsets {list(fld.offsets)} do not match the neighbourhood")
    h, w = fld.shape
    fg = None
    if cfg.foreground is not None:
        fg = as_mask(cfg.foreground, (h, w))
    index = np.arange(h * w, dtype=np.int64).reshape(h, w)
    us, vs, ws, ks = [], [], [], []
    for k, off in enumerate(fld.offsets):
        src, dst = edge_slices(off, (h, w))
        aff = fld.weights[k][src]
        keep = (fld.counts[k][src] > 0) & np.isfinite(aff)
        if fg is not None:
            keep &= fg[src] & fg[dst]
        u = index[src][keep]
        v = index[dst][keep]
        a = aff[keep]
        if k < nbhd.n_attractive:
            weight, kind = a, ATTRACTIVE
        else:
            weight, kind = cfg.alpha * (1.0 - a), MUTEX
        us.append(u)
        vs.append(v)
        ws.append(weight)
        ks.append(np.full(u.size, kind, dtype=np.int8))
    return EdgeList(np.concatenate(us), np.concatenate(vs), np.concatenate(ws).astype(np.float64),
                    np.concatenate(ks), (h, w))


def _dense_labels(roots: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Relabel cluster ids to 1..K by first occurrence; inactive pixels get 0."""
    out = np.zeros(roots.shape, dtype=np.int64)
    sel = np.flatnonzero(active)
    if sel.size == 0:
        return out
    uniq, first, inverse = np.unique(roots[sel], return_index=True, return_inverse=True)
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(1, uniq.size + 1)
    out[sel] = rank[inverse]
    return out


def mutex_watershed(edges: EdgeList, foreground=None) -> np.ndarray:
    """Greedy clustering with mutual-exclusion constraints.

    Attractive edges with non-positive weight carry no attraction and are
    skipped.
    """
    h, w = edges.shape
    n = h * w
    parent = list(range(n))
    size = [1] * n
    mutex: dict[int, set] = {}

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    order = edges.order()
    us = edges.u[order].tolist()
    vs = edges.v[order].tolist()
    ws = edges.weight[order].tolist()
    kinds = edges.kind[order].tolist()
    for u, v, wt, kind in zip(us, vs, ws, kinds):
        ru, rv = find(u), find(v)
        if ru == rv:
            continue
        mu = mutex.get(ru)
        if kind == ATTRACTIVE:
            if wt <= 0 or (mu is not None and rv in mu):
                continue
            if size[ru] < size[rv]:
                ru, rv = rv, ru
            parent[rv] = ru
            size[ru] += size[rv]
            mv = mutex.pop(rv, None)
            if mv:
                # rv and ru share no constraint, else the merge was blocked
                for other in mv:
                    peers = mutex[other]
                    peers.discard(rv)
                    peers.add(ru)
                mu = mutex.get(ru)
                if mu is None or len(mu) < len(mv):
                    mu, mv = mv, (mu or set())
                mu |= mv
                mutex[ru] = mu
        else:
            mutex.setdefault(ru, set()).add(rv)
            mutex.setdefault(rv, set()).add(ru)

    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    active = np.ones(n, dtype=bool) if foreground is None else as_mask(foreground, (h, w)).ravel()
    return _dense_labels(roots, active).reshape(h, w)


def apply_foreground(labels, fg) -> np.ndarray:
    labels = as_labels(labels)
    fg = as_mask(fg, labels.shape)
    clipped = np.where(fg, labels, 0).ravel()
    return _dense_labels(clipped, clipped > 0).reshape(labels.shape)


def merge_small_segments(labels, edges: EdgeList, min_segment: int) -> np.ndarray:
    """Merge segments below ``min_segment`` pixels into their best neighbour.

    The best neighbour shares the highest mean attractive affinity.
    """
    labels = as_labels(labels)
    if min_segment <= 0:
        return labels
    flat = labels.ravel().copy()
    att = edges.kind == ATTRACTIVE
    lu, lv, wt = flat[edges.u[att]], flat[edges.v[att]], edges.weight[att]
    while True:
        ids, sizes = np.unique(flat[flat > 0], return_counts=True)
        small = [(s, i) for i, s in zip(ids.tolist(), sizes.tolist()) if s < min_segment]
        merged = False
        for _, seg in sorted(small):
            cross = (lu != lv) & (lu > 0) & (lv > 0) & ((lu == seg) | (lv == seg))
            if not cross.any():
                continue
            other = np.where(lu[cross] == seg, lv[cross], lu[cross])
            nb, inv = np.unique(other, return_inverse=True)
            mean = np.bincount(inv, weights=wt[cross]) / np.bincount(inv)
            target = int(nb[np.argmax(mean)])
            flat[flat == seg] = target
            lu[lu == seg] = target
            lv[lv == seg] = target
            merged = True
            break
        if not merged:
            break
    return _dense_labels(flat, flat > 0).reshape(labels.shape)


def segment(fld: AffinityField, cfg: MwsConfig) -> np.ndarray:
    """Edges, Mutex Watershed, optional small-segment merge."""
    edges = build_edges(fld, cfg)
    labels = mutex_watershed(edges, cfg.foreground)
    if cfg.min_segment > 0:
        labels = merge_small_segments(labels, edges, cfg.min_segment)
    return labels


def connected_components(fg) -> np.ndarray:
    """4-connected components of a foreground mask, labelled in scan order."""
    fg = as_mask(fg)
    labels, _ = ndimage.label(fg)
    return _dense_labels(labels.ravel(), labels.ravel() > 0).reshape(fg.shape)
