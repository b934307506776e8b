"""Point-to-box matching: cost matrix, optimal assignment and pseudo labels."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import _kernels
from .core import (
    InvalidInputError,
    LabeledBox,
    PointAnnotation,
    ProposalSet,
    contains_matrix,
    softmax_rows,
)


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.05
    nms_iou: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInputError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise InvalidInputError(f"nms_iou must lie in [0, 1], got {self.nms_iou}")


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple = ()  # (point index, proposal index, cost)
    unmatched_points: tuple = ()
    pseudo_boxes: tuple = ()

    @property
    def matched_points(self) -> tuple:
        return tuple(i for i, _, _ in self.pairs)


def teacher_labels(proposals: ProposalSet) -> tuple[np.ndarray, np.ndarray]:
    """Class and confidence per proposal from the classification head.

    The label is the argmax over foreground columns of the (C+1)-way softmax;
    the confidence is that column's probability.
    """
    prob = softmax_rows(proposals.s)[:, : proposals.num_classes]
    labels = prob.argmax(axis=1).astype(np.int64)
    return labels, prob[np.arange(len(labels)), labels]


def _point_arrays(points: Sequence[PointAnnotation]):
    xy = np.array([(p.x, p.y) for p in points], dtype=np.float64).reshape(-1, 2)
    labels = np.array([p.label for p in points], dtype=np.int64)
    return xy, labels


def spatial_cost(points, boxes: np.ndarray, det_labels: np.ndarray) -> np.ndarray:
    """1 minus the joint indicator of containment and label agreement."""
    xy, plabels = _point_arrays(points)
    inside = contains_matrix(xy, boxes)
    same = plabels[:, None] == np.asarray(det_labels)[None, :]
    return 1.0 - (inside & same).astype(np.float64)


def build_cost_matrix(points: Sequence[PointAnnotation], proposals: ProposalSet, det_labels) -> np.ndarray:
    """Matching cost: spatial term plus ``1 - cls_prob * objectness_P``."""
    det_labels = np.asarray(det_labels, dtype=np.int64).reshape(-1)
    n_b = len(proposals)
    if det_labels.shape[0] != n_b:
        raise InvalidInputError(f"{det_labels.shape[0]} detection labels for {n_b} proposals")
    n_cls = proposals.num_classes
    _, plabels = _point_arrays(points)
    if np.any(plabels >= n_cls):
        raise InvalidInputError(f"point label {plabels.max()} outside [0, {n_cls})")
    if np.any((det_labels < 0) | (det_labels >= n_cls)):
        raise InvalidInputError("detection label outside the foreground classes")
    if len(points) == 0 or n_b == 0:
        return np.zeros((len(points), n_b))
    cls_prob = softmax_rows(proposals.s)[:, plabels].T  # (N_p, N_b)
    obj_prob = softmax_rows(proposals.s_P)[:, 1]
    return spatial_cost(points, proposals.boxes, det_labels) + (1.0 - cls_prob * obj_prob[None, :])


def hungarian_assign(cost) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment of rows to columns.

    Rectangular inputs are padded to square with a sentinel cost; every
    padded row or column contributes the same constant to any complete
    assignment, so the optimum over real pairs is unaffected. Among optimal
    assignments the lexicographically smallest ``(row, col)`` pair list is
    returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidInputError(f"cost must be 2-D, got shape {cost.shape}")
    n_p, n_b = cost.shape
    if n_p == 0 or n_b == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise InvalidInputError("cost matrix has non-finite entries")
    n = max(n_p, n_b)
    scale = max(1.0, float(np.abs(cost).max()))
    sentinel = 4.0 * n * scale + 1.0
    square = np.full((n, n), sentinel)
    square[:n_p, :n_b] = cost
    row_to_col, u, v = _kernels.solve_square(square)
    tol = 1e-12 * sentinel
    row_to_col = _kernels.lexicographic_refine(square, u, v, row_to_col, n_p, tol)
    return [(i, int(row_to_col[i])) for i in range(n_p) if row_to_col[i] < n_b]


def generate_pseudo_labels(points: Sequence[PointAnnotation], dets: ProposalSet, cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Turn teacher detections plus point annotations into pseudo boxes.

    Detections below ``cfg.tau`` confidence are dropped, the rest are matched
    to points, and a matched pair whose spatial term is 1 (point outside the
    box or class disagreement) leaves its point unmatched. ``dets`` should
    already be class-wise NMS'd; when it has no labels they are derived from
    the classification head.
    """
    points = list(points)
    if dets.labels is None:
        labels, conf = teacher_labels(dets)
    else:
        labels = np.asarray(dets.labels)
        prob = softmax_rows(dets.s)
        if len(labels) and (labels.min() < 0 or labels.max() >= dets.num_classes):
            raise InvalidInputError("detection label outside the foreground classes")
        conf = prob[np.arange(len(labels)), labels]
    survivors = np.flatnonzero(conf >= cfg.tau)
    sub = dets.subset(survivors)
    cost = build_cost_matrix(points, sub, labels[survivors])
    spatial = spatial_cost(points, sub.boxes, labels[survivors]) if len(survivors) and points else None
    pairs = []
    pseudo = []
    matched = set()
    for i, j in hungarian_assign(cost):
        if spatial[i, j] == 1.0:
            continue
        src = int(survivors[j])
        pairs.append((i, src, float(cost[i, j])))
        pseudo.append(LabeledBox(dets.box(src), points[i].label, float(conf[src])))
        matched.add(i)
    unmatched = tuple(i for i in range(len(points)) if i not in matched)
    return MatchResult(tuple(pairs), unmatched, tuple(pseudo))


def threshold_pseudo_labels(dets: ProposalSet, tau: float = 0.7) -> list[LabeledBox]:
    """Point-agnostic baseline: every detection whose confidence reaches ``tau``."""
    labels, conf = teacher_labels(dets) if dets.labels is None else (
        np.asarray(dets.labels), softmax_rows(dets.s)[np.arange(len(dets)), np.asarray(dets.labels)]
    )
    return [LabeledBox(dets.box(j), int(labels[j]), float(conf[j])) for j in np.flatnonzero(conf >= tau)]


def unmatched_fraction(result: MatchResult, n_points: int) -> float:
    if n_points <= 0:
        raise InvalidInputError("unmatched fraction needs at least one point")
    return float(Fraction(len(result.unmatched_points), n_points))
