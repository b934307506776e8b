"""COCO-style average precision, pseudo-label quality and error taxonomy."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .core import LabeledBox, boxes_to_array, iou_matrix

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)
TIDE_FG = 0.5
TIDE_BG = 0.1


@dataclass(frozen=True)
class APResult:
    per_threshold: dict
    mean: float

    @property
    def ap50(self) -> float:
        return self.per_threshold.get(0.5, math.nan)


def _score_order(scores: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(scores)), -scores))


def _class_records(preds, gts, cls: int):
    """Per image for one class: score-sorted scores and the pred x gt IoU table."""
    out = []
    for p_img, g_img in zip(preds, gts):
        p_cls = [d for d in p_img if d.label == cls]
        g_cls = [g for g in g_img if g.label == cls]
        scores = np.array([d.score for d in p_cls], dtype=np.float64)
        order = _score_order(scores)
        ious = iou_matrix(boxes_to_array([p_cls[k] for k in order]), boxes_to_array(g_cls))
        out.append((scores[order], order, ious))
    return out


def _tp_flags(records, threshold: float):
    """TP flags across images for one class, sorted by (score desc, image, index)."""
    scores, tps, img_idx, det_idx = [], [], [], []
    for k, (sc, order, ious) in enumerate(records):
        if len(sc) == 0:
            continue
        if ious.shape[1]:
            match = _kernels.greedy_match(ious, float(threshold))
        else:
            match = np.full(len(sc), -1)
        scores.append(sc)
        tps.append(match >= 0)
        img_idx.append(np.full(len(sc), k))
        det_idx.append(order)
    if not scores:
        return np.zeros(0), np.zeros(0, dtype=bool)
    scores = np.concatenate(scores)
    tps = np.concatenate(tps)
    img_idx = np.concatenate(img_idx)
    det_idx = np.concatenate(det_idx)
    order = np.lexsort((det_idx, img_idx, -scores))
    return scores[order], tps[order]


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-sorted TP flags."""
    if n_gt == 0:
        return math.nan
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, RECALL_LEVELS, side="left")
    sampled = np.zeros(len(RECALL_LEVELS))
    ok = pos < len(recall)
    sampled[ok] = envelope[pos[ok]]
    return float(np.mean(sampled))


def average_precision(preds: Sequence[Sequence[LabeledBox]], gts: Sequence[Sequence[LabeledBox]],
                      iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> APResult:
    """Class-averaged AP per IoU threshold and their mean.

    Classes are those present in the ground truth. Returns NaN throughout when
    there is no ground truth at all.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} images")
    classes = sorted({g.label for img in gts for g in img})
    if not classes:
        return APResult({float(t): math.nan for t in iou_thresholds}, math.nan)
    aps = np.zeros((len(iou_thresholds), len(classes)))
    for ci, c in enumerate(classes):
        records = _class_records(preds, gts, c)
        n_gt = sum(r[2].shape[1] for r in records)
        for ti, t in enumerate(iou_thresholds):
            _, tp = _tp_flags(records, t)
            aps[ti, ci] = interpolated_ap(tp, n_gt)
    per_t = {float(t): float(np.mean(aps[ti])) for ti, t in enumerate(iou_thresholds)}
    return APResult(per_t, float(np.mean(list(per_t.values()))))


def _match_image(pred: Sequence[LabeledBox], gt: Sequence[LabeledBox], threshold: float):
    """Class-aware greedy matching within one image: pred index -> gt index or -1."""
    out = np.full(len(pred), -1, dtype=np.int64)
    for c in sorted({d.label for d in pred}):
        pi = np.array([k for k, d in enumerate(pred) if d.label == c], dtype=np.int64)
        gi = np.array([k for k, g in enumerate(gt) if g.label == c], dtype=np.int64)
        if len(gi) == 0:
            continue
        scores = np.array([pred[k].score for k in pi])
        order = pi[_score_order(scores)]
        m = _kernels.greedy_match(iou_matrix(boxes_to_array([pred[k] for k in order]), boxes_to_array([gt[k] for k in gi])), threshold)
        hit = m >= 0
        out[order[hit]] = gi[m[hit]]
    return out


def pseudo_label_quality(pseudo, gts) -> dict:
    """Precision and recall at IoU 0.5 plus AP50 and AP50:95."""
    n_pred = sum(len(p) for p in pseudo)
    n_gt = sum(len(g) for g in gts)
    tp = sum(int(np.sum(_match_image(p, g, 0.5) >= 0)) for p, g in zip(pseudo, gts))
    ap = average_precision(pseudo, gts)
    return {
        "precision": tp / n_pred if n_pred else 0.0,
        "recall": tp / n_gt if n_gt else math.nan,
        "ap50": ap.ap50,
        "ap50_95": ap.mean,
    }


class ErrorType(enum.Enum):
    CLS = "Cls"
    LOC = "Loc"
    BOTH = "Both"
    DUPE = "Dupe"
    BKG = "Bkg"
    MISS = "Miss"


@dataclass
class ErrorReport:
    counts: dict = field(default_factory=lambda: {e: 0 for e in ErrorType})
    true_positives: int = 0
    false_positives: int = 0
    n_gt: int = 0
    matched_gt: int = 0
    implicated_gt: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["error_type", "count"])
        for e in ErrorType:
            w.writerow([e.value, self.counts[e]])
        return buf.getvalue()

    def as_dict(self) -> dict:
        return {e.value: self.counts[e] for e in ErrorType}


def classify_false_positive(same_iou: float, other_iou: float) -> ErrorType:
    """TIDE ordering: background, localisation, class, duplicate, both."""
    if max(same_iou, other_iou) < TIDE_BG:
        return ErrorType.BKG
    if TIDE_BG <= same_iou < TIDE_FG:
        return ErrorType.LOC
    if other_iou >= TIDE_FG:
        return ErrorType.CLS
    if same_iou >= TIDE_FG:
        return ErrorType.DUPE
    return ErrorType.BOTH


def error_decomposition(preds, gts) -> ErrorReport:
    """Assign every false positive at IoU 0.5 one error type; count misses.

    A missed ground truth counts as Miss only when no Loc, Cls or Both error
    points at it (the best-overlapping box of the relevant class set).
    """
    rep = ErrorReport()
    for pred, gt in zip(preds, gts):
        rep.n_gt += len(gt)
        match = _match_image(pred, gt, TIDE_FG)
        rep.true_positives += int(np.sum(match >= 0))
        matched = set(int(m) for m in match if m >= 0)
        implicated = set()
        ious = iou_matrix(boxes_to_array(pred), boxes_to_array(gt)) if pred and gt else np.zeros((len(pred), len(gt)))
        glabels = np.array([g.label for g in gt], dtype=np.int64)
        for k, d in enumerate(pred):
            if match[k] >= 0:
                continue
            rep.false_positives += 1
            same = glabels == d.label
            same_iou = float(ious[k, same].max()) if same.any() else 0.0
            other_iou = float(ious[k, ~same].max()) if (~same).any() else 0.0
            err = classify_false_positive(same_iou, other_iou)
            rep.counts[err] += 1
            if err is ErrorType.LOC:
                implicated.add(int(np.flatnonzero(same)[np.argmax(ious[k, same])]))
            elif err is ErrorType.CLS:
                implicated.add(int(np.flatnonzero(~same)[np.argmax(ious[k, ~same])]))
            elif err is ErrorType.BOTH:
                implicated.add(int(np.argmax(ious[k])))
        missed = set(range(len(gt))) - matched
        rep.matched_gt += len(matched)
        rep.implicated_gt += len(missed & implicated)
        rep.counts[ErrorType.MISS] += len(missed - implicated)
    return rep
