"""Image-wise and point-wise multiple-instance losses with analytic gradients.

All gradients are hand-derived; :mod:`wssod.gradcheck` verifies them against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    BBox,
    InvalidInputError,
    PointAnnotation,
    ProposalSet,
    contains_matrix,
    log_softmax_rows,
    softmax_cols,
    softmax_rows,
)

PROB_FLOOR = 1e-12


class EmptyBagError(ValueError):
    """A point bag with no member proposals has no score."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidInputError("loss weights must be non-negative")


@dataclass(frozen=True, eq=False)
class LossValueWithGrads:
    value: float
    grad_s: np.ndarray
    grad_s_I: np.ndarray
    grad_s_P: np.ndarray

    @classmethod
    def zero(cls, p: ProposalSet) -> "LossValueWithGrads":
        return cls(0.0, np.zeros_like(p.s), np.zeros_like(p.s_I), np.zeros_like(p.s_P))


@dataclass(frozen=True)
class Bag:
    point_index: int
    members: tuple = ()

    def __len__(self):
        return len(self.members)


def derive_image_labels(points: Sequence[PointAnnotation], num_classes: int) -> np.ndarray:
    out = np.zeros(num_classes)
    for p in points:
        if p.label >= num_classes:
            raise InvalidInputError(f"point label {p.label} outside [0, {num_classes})")
        out[p.label] = 1.0
    return out


def _image_terms(p: ProposalSet):
    if len(p) == 0:
        raise InvalidInputError("image score needs at least one proposal")
    probs = softmax_rows(p.s)
    cls = probs[:, : p.num_classes]
    sel = softmax_cols(p.s_I)
    return probs, cls, sel


def image_score(p: ProposalSet) -> np.ndarray:
    """Per-class image score: sum over proposals of cls prob times column-softmaxed objectness-I."""
    _, cls, sel = _image_terms(p)
    return (cls * sel).sum(axis=0)


def image_mil_loss(p: ProposalSet, labels) -> LossValueWithGrads:
    """Summed binary cross-entropy between image labels and image scores."""
    labels = np.asarray(labels, dtype=np.float64)
    probs, cls, sel = _image_terms(p)
    if labels.shape != (p.num_classes,):
        raise InvalidInputError(f"labels shape {labels.shape} != ({p.num_classes},)")
    phi = (cls * sel).sum(axis=0)
    phi_c = np.clip(phi, PROB_FLOOR, 1.0 - PROB_FLOOR)
    value = -float(np.sum(labels * np.log(phi_c) + (1.0 - labels) * np.log1p(-phi_c)))

    # clamped entries pass no gradient
    live = (phi > PROB_FLOOR) & (phi < 1.0 - PROB_FLOOR)
    g_phi = np.where(live, -labels / phi_c + (1.0 - labels) / (1.0 - phi_c), 0.0)

    g_probs = np.zeros_like(probs)
    g_probs[:, : p.num_classes] = g_phi[None, :] * sel
    grad_s = probs * (g_probs - (g_probs * probs).sum(axis=1, keepdims=True))

    g_sel = g_phi[None, :] * cls
    grad_s_I = sel * (g_sel - (g_sel * sel).sum(axis=0, keepdims=True))
    return LossValueWithGrads(value, grad_s, grad_s_I, np.zeros_like(p.s_P))


def build_bags(points: Sequence[PointAnnotation], boxes, det_labels) -> list[Bag]:
    """One bag per point: proposals enclosing it whose class agrees with it."""
    if isinstance(boxes, np.ndarray):
        arr = boxes.reshape(-1, 4)
    else:
        arr = np.array([b.as_array() if isinstance(b, BBox) else b for b in boxes], dtype=np.float64).reshape(-1, 4)
    det_labels = np.asarray(det_labels, dtype=np.int64).reshape(-1)
    if det_labels.shape[0] != arr.shape[0]:
        raise InvalidInputError(f"{det_labels.shape[0]} detection labels for {arr.shape[0]} boxes")
    if not points:
        return []
    xy = np.array([(q.x, q.y) for q in points], dtype=np.float64)
    inside = contains_matrix(xy, arr)
    return [
        Bag(i, tuple(int(j) for j in np.flatnonzero(inside[i] & (det_labels == q.label))))
        for i, q in enumerate(points)
    ]


def _bag_log_terms(members: np.ndarray, p: ProposalSet, label: int):
    """Per-member log-probability that it alone is positive."""
    log_cls = log_softmax_rows(p.s[members])[:, label]
    log_obj = log_softmax_rows(p.s_P[members])
    log_fg = log_cls + log_obj[:, 1]
    log_bg = log_obj[:, 0]
    return log_fg + (log_bg.sum() - log_bg), log_obj


def _logsumexp(x: np.ndarray) -> float:
    top = x.max()
    return float(np.log(np.exp(x - top).sum()) + top)


def point_bag_log_score(bag: Bag, p: ProposalSet, point_label: int) -> float:
    if len(bag) == 0:
        raise EmptyBagError(f"bag of point {bag.point_index} is empty")
    members = np.asarray(bag.members, dtype=np.int64)
    log_prob, _ = _bag_log_terms(members, p, point_label)
    return _logsumexp(log_prob)


def point_bag_score(bag: Bag, p: ProposalSet, point_label: int) -> float:
    """Probability that exactly one bag member is the positive box."""
    return float(np.exp(point_bag_log_score(bag, p, point_label)))


def point_mil_loss(bags: Sequence[Bag], p: ProposalSet, points: Sequence[PointAnnotation]) -> LossValueWithGrads:
    """Mean negative log bag score over non-empty bags.

    Classification scores are held constant inside this loss, so ``grad_s``
    is identically zero; only the objectness-P head receives gradient.
    """
    out = LossValueWithGrads.zero(p)
    live = [b for b in bags if len(b)]
    if not live:
        return out
    grad_P = out.grad_s_P
    total = 0.0
    for bag in live:
        members = np.asarray(bag.members, dtype=np.int64)
        log_prob, log_obj = _bag_log_terms(members, p, points[bag.point_index].label)
        lse = _logsumexp(log_prob)
        total -= lse
        w = np.exp(log_prob - lse)  # posterior of "member k is the positive"
        q = np.exp(log_obj)
        # d log(score) / d s_P[k] = w_k (e1 - q_k) + (1 - w_k)(e0 - q_k)
        g = np.empty((len(members), 2))
        g[:, 0] = (1.0 - w) - q[:, 0]
        g[:, 1] = w - q[:, 1]
        np.add.at(grad_P, members, -g)
    n = len(live)
    return LossValueWithGrads(total / n, out.grad_s, out.grad_s_I, grad_P / n)


def total_loss(l_det: float, l_img: float, l_pt: float, w: LossWeights = LossWeights()) -> float:
    return l_det + w.lambda1 * l_img + w.lambda2 * l_pt
