"""SEG score and detection accuracy for instance label maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import as_labels

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class Match:
    gt_label: int
    pred_label: int | None
    overlap: int
    iou: float


def match_segments(gt, pred, sparse_gt: bool = False) -> list[Match]:
    """Match each GT segment to the prediction covering more than half of it.

    With ``sparse_gt`` predicted pixels on unlabelled GT are left out of the
    union, for partially annotated frames.
    """
    gt = as_labels(gt)
    pred = as_labels(pred, gt.shape)
    g = gt.ravel()
    p = pred.ravel()
    gt_ids, gt_sizes = np.unique(g[g > 0], return_counts=True)
    if gt_ids.size == 0:
        raise ValueError("ground truth has no segments")
    pred_scope = p[g > 0] if sparse_gt else p
    pred_ids, pred_sizes = np.unique(pred_scope[pred_scope > 0], return_counts=True)
    pred_size = dict(zip(pred_ids.tolist(), pred_sizes.tolist()))
    both = (g > 0) & (p > 0)
    pairs, overlaps = np.unique(np.stack([g[both], p[both]]), axis=1, return_counts=True)
    best: dict[int, tuple[int, int]] = {}
    for (gl, pl), n in zip(pairs.T.tolist(), overlaps.tolist()):
        if gl not in best or n > best[gl][1]:
            best[gl] = (pl, n)
    matches = []
    for gl, size in zip(gt_ids.tolist(), gt_sizes.tolist()):
        pl, n = best.get(gl, (None, 0))
        if pl is not None and 2 * n > size:
            iou = n / (size + pred_size[pl] - n)
            matches.append(Match(gl, pl, n, iou))
        else:
            matches.append(Match(gl, None, n, 0.0))
    return matches


def seg_score(gt, pred, sparse_gt: bool = False) -> float:
    matches = match_segments(gt, pred, sparse_gt)
    return float(np.mean([m.iou for m in matches]))


def detection_accuracy(gt, pred, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                       sparse_gt: bool = False) -> list[float]:
    """Fraction of GT segments whose matched IoU reaches each threshold."""
    for t in thresholds:
        if not 0 < t <= 1:
            raise ValueError(f"threshold {t} outside (0, 1]")
    ious = np.array([m.iou if m.pred_label is not None else -1.0
                     for m in match_segments(gt, pred, sparse_gt)])
    return [float(np.mean(ious >= t)) for t in thresholds]


@dataclass
class ReportRow:
    method: str
    alpha: float | None
    seg: float
    detection: list[float]


def format_table(rows: Sequence[ReportRow], thresholds: Sequence[float]) -> str:
    head = ["method", "alpha", "seg"] + [f"det@{t:g}" for t in thresholds]
    body = [[r.method, "-" if r.alpha is None else f"{r.alpha:g}", f"{r.seg:.4f}"]
            + [f"{d:.4f}" for d in r.detection] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
    return "\n".join(lines)


def write_csv(path, rows: Sequence[ReportRow], thresholds: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "alpha", "seg_score"] + [f"det@{t:g}" for t in thresholds])
        for r in rows:
            writer.writerow([r.method, "" if r.alpha is None else repr(float(r.alpha)),
                             repr(r.seg)] + [repr(d) for d in r.detection])
