"""Desk-scale teacher-student loop around a synthetic detector oracle.

The oracle turns hidden ground truth into proposals with three score heads.
Its behaviour is governed by a small parameter vector (per-class score bias,
a localisation temperature and two head gains) that plays the role of the
detector weights: the student takes gradient steps on it and the teacher
tracks the student by an exponential moving average.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .augment import (
    AugmentConfig,
    ObjectBank,
    Provenance,
    bank_update,
    point_guided_paste,
    strong_augment,
    weak_augment,
)
from .core import (
    BBox,
    ImageSample,
    InvalidInputError,
    LabeledBox,
    ProposalSet,
    boxes_to_array,
    contains,
    iou_matrix,
    nms_indices,
    softmax_rows,
)
from .datasets import SplitSpec, make_splits, synthesize_points
from .evaluation import pseudo_label_quality
from .matching import MatchConfig, generate_pseudo_labels, teacher_labels, threshold_pseudo_labels
from .mil import (
    LossWeights,
    build_bags,
    derive_image_labels,
    image_mil_loss,
    point_mil_loss,
    total_loss,
)

OCCLUSION_COVERAGE = 0.5
P_GAIN = 10.0  # feature scale of the objectness-P head


# ------------------------------------------------------------ parameters ----

@dataclass(frozen=True, eq=False)
class DetectorParams:
    """Flat vector ``[bias_0 .. bias_{C-1}, log_temperature, w_P, w_I]``."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.shape[0] != self.num_classes + 3:
            raise InvalidInputError(f"expected {self.num_classes + 3} parameters, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def initial(cls, bias, log_temperature=0.0, w_P=0.0, w_I=1.0) -> "DetectorParams":
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        return cls(np.concatenate([bias, [log_temperature, w_P, w_I]]), len(bias))

    def __len__(self):
        return self.values.shape[0]

    @property
    def bias(self) -> np.ndarray:
        return self.values[: self.num_classes]

    @property
    def log_temperature(self) -> float:
        return float(self.values[self.num_classes])

    @property
    def w_P(self) -> float:
        return float(self.values[self.num_classes + 1])

    @property
    def w_I(self) -> float:
        return float(self.values[self.num_classes + 2])

    def step(self, grad: np.ndarray, lr: float) -> "DetectorParams":
        return DetectorParams(self.values - lr * grad, self.num_classes)


def ema_update(teacher: DetectorParams, student: DetectorParams, alpha: float) -> DetectorParams:
    """``alpha * teacher + (1 - alpha) * student``; alpha is the keep rate."""
    if len(teacher) != len(student):
        raise InvalidInputError(f"teacher has {len(teacher)} parameters, student {len(student)}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return teacher
    if alpha == 0.0:
        return DetectorParams(student.values, student.num_classes)
    return DetectorParams(alpha * teacher.values + (1.0 - alpha) * student.values, teacher.num_classes)


# ---------------------------------------------------------------- oracle ----

@dataclass(frozen=True)
class OracleConfig:
    coord_noise_sigma: float = 2.0
    label_flip_prob: float = 0.05
    miss_prob: float = 0.05
    fp_rate: float = 1.0
    score_sharpness: float = 2.0
    rng_seed: int = 0
    score_noise: float = 0.5
    proposals_per_object: int = 2
    loose_scale: tuple = (1.7, 2.3)
    class_offset: float = 4.0

    def __post_init__(self):
        for name in ("label_flip_prob", "miss_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {v}")
        if self.coord_noise_sigma < 0 or self.fp_rate < 0 or self.score_noise < 0:
            raise InvalidInputError("noise levels and fp_rate must be non-negative")
        if self.score_sharpness <= 0:
            raise InvalidInputError("score_sharpness must be positive")
        if self.proposals_per_object < 1:
            raise InvalidInputError("proposals_per_object must be >= 1")

    @classmethod
    def noiseless(cls, rng_seed: int = 0) -> "OracleConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 2.0, rng_seed, 0.0, 1)


@dataclass(frozen=True, eq=False)
class Detections:
    """Oracle output plus the quantities the surrogate gradients need."""

    proposals: ProposalSet
    quality: np.ndarray  # IoU with the source object, 0 for background
    source: np.ndarray  # index into the object list, -1 for background
    jitter: np.ndarray  # d box / d log_temperature, zero where the box ignores it


def oracle_stream(cfg: OracleConfig, image_id, *stream) -> np.random.Generator:
    key = zlib.crc32(str(image_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, key, *map(int, stream)]))


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally long box arrays."""
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return np.where((union > 0) & (inter > 0), inter / np.where(union > 0, union, 1.0), 0.0)


def _clip_boxes(b: np.ndarray, width: float, height: float) -> np.ndarray:
    out = b.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, height)
    return out


def oracle_detect(img: ImageSample, params: DetectorParams, cfg: OracleConfig, stream: Sequence[int] = (),
                  objects: Optional[Sequence[LabeledBox]] = None) -> Detections:
    """Synthesize labelled proposals from the objects in ``img``.

    Every random draw happens before ``params`` is consulted, so two
    parameter vectors see the same noise for the same stream.
    """
    objects = img.ground_truth if objects is None else tuple(objects)
    n_cls = params.num_classes
    rng = oracle_stream(cfg, img.image_id, *stream)
    n_obj = len(objects)
    gt = boxes_to_array(objects)
    gt_labels = np.array([o.label for o in objects], dtype=np.int64)
    k = cfg.proposals_per_object

    kept = rng.random(n_obj) >= cfg.miss_prob
    flip = rng.random(n_obj) < cfg.label_flip_prob
    flip_to = rng.integers(1, max(n_cls, 2), size=n_obj)
    eps = rng.standard_normal((n_obj, 4))
    loose_f = rng.uniform(*cfg.loose_scale, size=(n_obj, max(k - 1, 0), 2))
    loose_shift = rng.uniform(-0.15, 0.15, size=(n_obj, max(k - 1, 0), 2))
    n_fp = int(rng.poisson(cfg.fp_rate)) if cfg.fp_rate > 0 else 0
    fp_wh = rng.uniform(6.0, 0.4 * min(img.width, img.height), size=(n_fp, 2))
    fp_xy = rng.uniform(0.0, 1.0, size=(n_fp, 2))
    fp_lab = rng.integers(0, n_cls, size=n_fp)

    labels = np.where(flip & (n_cls > 1), (gt_labels + flip_to) % max(n_cls, 1), gt_labels)
    sigma = cfg.coord_noise_sigma * math.exp(-params.log_temperature)

    kept_idx = np.flatnonzero(kept)
    g = gt[kept_idx]
    cx, cy = 0.5 * (g[:, 0] + g[:, 2]), 0.5 * (g[:, 1] + g[:, 3])
    w, h = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    per_obj = [(g + sigma * eps[kept_idx])[:, None, :]]
    jit_obj = [(-sigma * eps[kept_idx])[:, None, :]]
    if k > 1:
        fw, fh = loose_f[kept_idx, :, 0], loose_f[kept_idx, :, 1]
        lx = cx[:, None] + loose_shift[kept_idx, :, 0] * w[:, None]
        ly = cy[:, None] + loose_shift[kept_idx, :, 1] * h[:, None]
        hw, hh = fw * w[:, None] / 2, fh * h[:, None] / 2
        per_obj.append(np.stack([lx - hw, ly - hh, lx + hw, ly + hh], axis=2))
        jit_obj.append(np.zeros((len(kept_idx), k - 1, 4)))
    obj_rows = np.concatenate(per_obj, axis=1).reshape(-1, 4)
    obj_jit = np.concatenate(jit_obj, axis=1).reshape(-1, 4)
    fx = fp_xy[:, 0] * (img.width - fp_wh[:, 0])
    fy = fp_xy[:, 1] * (img.height - fp_wh[:, 1])
    fp_rows = np.column_stack([fx, fy, fx + fp_wh[:, 0], fy + fp_wh[:, 1]]).reshape(-1, 4)
    raw = np.concatenate([obj_rows, fp_rows])
    jitter = np.concatenate([obj_jit, np.zeros((n_fp, 4))])
    src = np.concatenate([np.repeat(kept_idx, k), np.full(n_fp, -1)]).astype(np.int64)
    lab = np.concatenate([np.repeat(labels[kept_idx], k), fp_lab]).astype(np.int64)

    n = len(raw)
    noise_s = rng.standard_normal((n, n_cls)) * cfg.score_noise
    noise_i = rng.standard_normal((n, n_cls)) * cfg.score_noise
    noise_p = rng.standard_normal(n) * cfg.score_noise
    if n == 0:
        empty = ProposalSet(np.zeros((0, 4)), np.zeros((0, n_cls + 1)), np.zeros((0, n_cls)), np.zeros((0, 2)),
                            np.zeros(0, dtype=np.int64))
        return Detections(empty, np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
    boxes = _clip_boxes(np.column_stack([
        np.minimum(raw[:, 0], raw[:, 2]), np.minimum(raw[:, 1], raw[:, 3]),
        np.maximum(raw[:, 0], raw[:, 2]), np.maximum(raw[:, 1], raw[:, 3]),
    ]), img.width, img.height)
    quality = np.zeros(n)
    fg = src >= 0
    if fg.any():
        quality[fg] = paired_iou(boxes[fg], gt[src[fg]])

    s = np.zeros((n, n_cls + 1))
    s[:, :n_cls] = params.bias[None, :] - cfg.class_offset + noise_s
    rows_idx = np.arange(n)
    s[rows_idx, lab] += cfg.class_offset + cfg.score_sharpness * (quality - 0.5)
    s_I = noise_i.copy()
    s_I[rows_idx, lab] += params.w_I * quality
    s_P = np.zeros((n, 2))
    s_P[:, 1] = P_GAIN * params.w_P * (quality - 0.5) + noise_p
    return Detections(ProposalSet(boxes, s, s_I, s_P, lab), quality, src, jitter)


def detection_confidence(p: ProposalSet) -> np.ndarray:
    """Probability of each proposal's own label under the (C+1)-way softmax."""
    if p.labels is None:
        return teacher_labels(p)[1]
    return softmax_rows(p.s)[np.arange(len(p)), p.labels]


def nms_detections(d: Detections, iou_threshold: float) -> Detections:
    p = d.proposals
    if len(p) == 0:
        return d
    keep = np.sort(nms_indices(p.boxes, detection_confidence(p), p.labels, iou_threshold))
    return Detections(p.subset(keep), d.quality[keep], d.source[keep], d.jitter[keep])


# ------------------------------------------------------ synthetic scenes ----

def class_weights(num_classes: int, zipf: float) -> np.ndarray:
    w = (np.arange(num_classes) + 1.0) ** (-zipf)
    return w / w.sum()


@functools.lru_cache(maxsize=None)
def class_color(label: int) -> tuple:
    rng = np.random.default_rng([7919, label])
    return tuple(int(v) for v in rng.integers(40, 256, size=3))


def render_pixels(img: ImageSample) -> np.ndarray:
    """Deterministic picture of an image's objects: flat colour boxes on noise."""
    rng = np.random.default_rng([zlib.crc32(str(img.image_id).encode("utf-8"))])
    px = rng.integers(0, 40, size=(img.height, img.width, 3)).astype(np.uint8)
    for lb in img.ground_truth:
        b = lb.box
        r0, r1 = int(math.floor(b.y1)), int(math.ceil(b.y2))
        c0, c1 = int(math.floor(b.x1)), int(math.ceil(b.x2))
        px[r0:r1, c0:c1] = class_color(lb.label)
    return px


def with_pixels(img: ImageSample) -> ImageSample:
    return img if img.pixels is not None else img.replace(pixels=render_pixels(img))


def make_scene(image_id, num_classes: int, rng: np.random.Generator, size: int = 64,
               max_objects: int = 5, zipf: float = 1.0, max_overlap: float = 0.3) -> ImageSample:
    """Random scene with up to ``max_objects`` boxes of limited mutual overlap."""
    weights = class_weights(num_classes, zipf)
    n_obj = int(rng.integers(1, max_objects + 1))
    boxes: list[LabeledBox] = []
    for _ in range(n_obj):
        for _attempt in range(20):
            w, h = rng.uniform(0.15 * size, 0.4 * size, size=2)
            x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
            cand = np.array([[x, y, x + w, y + h]])
            if not boxes or iou_matrix(cand, boxes_to_array(boxes)).max() <= max_overlap:
                boxes.append(LabeledBox(BBox(x, y, x + w, y + h), int(rng.choice(num_classes, p=weights))))
                break
    return ImageSample(image_id, size, size, full_boxes=boxes)


def synthetic_dataset(n_images: int, num_classes: int = 8, seed: int = 0, size: int = 64,
                      max_objects: int = 5, zipf: float = 1.0) -> list[ImageSample]:
    rng = np.random.default_rng(seed)
    return [make_scene(k, num_classes, rng, size, max_objects, zipf) for k in range(n_images)]


# -------------------------------------------------------- training loop ----

@dataclass(frozen=True)
class SimConfig:
    oracle: OracleConfig = OracleConfig()
    augment: AugmentConfig = AugmentConfig()
    match: MatchConfig = MatchConfig()
    weights: LossWeights = LossWeights()
    use_matching: bool = True
    use_image_mil: bool = True
    use_point_mil: bool = True
    use_copy_paste: bool = True
    threshold_tau: float = 0.7
    lr: float = 0.1
    ema_rate: float = 0.9996
    batch_full: int = 16
    batch_point: int = 16
    eval_every: int = 10
    eval_images: int = 40
    eval_point_mode: str = "random"
    bank_capacity: int = 100
    reg_weight: float = 1.0
    det_normalization: str = "image"
    burn_in_bias: float = 1.0
    burn_in_gamma: float = 1.0
    burn_in_floor: float = -6.0
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_full < 0 or self.batch_point < 0 or self.eval_every < 1:
            raise InvalidInputError("lr and batch sizes must be >= 0, eval_every >= 1")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise InvalidInputError(f"ema_rate must lie in [0, 1], got {self.ema_rate}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oracle"]["loose_scale"] = list(self.oracle.loose_scale)
        d["augment"]["intensity_range"] = list(self.augment.intensity_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        o = dict(d.pop("oracle", {}))
        if "loose_scale" in o:
            o["loose_scale"] = tuple(o["loose_scale"])
        a = dict(d.pop("augment", {}))
        if "intensity_range" in a:
            a["intensity_range"] = tuple(a["intensity_range"])
        return cls(oracle=OracleConfig(**o), augment=AugmentConfig(**a), match=MatchConfig(**d.pop("match", {})),
                   weights=LossWeights(**d.pop("weights", {})), **d)


@dataclass
class TrainState:
    teacher: DetectorParams
    student: DetectorParams
    bank: ObjectBank
    iteration: int = 0
    ema_rate: float = 0.9996
    metrics: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.teacher) != len(self.student):
            raise InvalidInputError("teacher and student differ in length")


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    l_det: float
    l_img: float
    l_pt: float
    l_total: float
    pseudo_boxes: int
    unmatched_fraction: float
    pasted: int
    point_batch_empty: bool


def burn_in_params(full: Sequence[ImageSample], num_classes: int, cfg: SimConfig) -> DetectorParams:
    """Starting weights as left by supervised burn-in on the fully labelled set.

    Classes seen less often start with a lower score bias.
    """
    counts = np.zeros(num_classes)
    for s in full:
        for b in s.full_boxes:
            counts[b.label] += 1
    bias = cfg.burn_in_bias + cfg.burn_in_gamma * np.log((counts + 1.0) / (counts.max() + 1.0))
    return DetectorParams.initial(np.maximum(bias, cfg.burn_in_floor))


def _pseudo_labels(dets: Detections, points, cfg: SimConfig):
    """Pseudo boxes and unmatched points for one image, per the configured rule."""
    p = dets.proposals
    if cfg.use_matching:
        res = generate_pseudo_labels(points, p, cfg.match)
        return list(res.pseudo_boxes), [points[i] for i in res.unmatched_points]
    pseudo = threshold_pseudo_labels(p, cfg.threshold_tau)
    unmatched = [q for q in points if not any(b.label == q.label and contains(q, b.box) for b in pseudo)]
    return pseudo, unmatched


def _covered(objects: Sequence[LabeledBox], pasted: Sequence[LabeledBox]) -> list[LabeledBox]:
    """Objects whose area is at least half covered by some pasted box are occluded."""
    if not pasted or not objects:
        return list(objects)
    ob = boxes_to_array(objects)
    pb = boxes_to_array(pasted)
    ix = np.clip(np.minimum(ob[:, None, 2], pb[None, :, 2]) - np.maximum(ob[:, None, 0], pb[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(ob[:, None, 3], pb[None, :, 3]) - np.maximum(ob[:, None, 1], pb[None, :, 1]), 0, None)
    area = np.maximum((ob[:, 2] - ob[:, 0]) * (ob[:, 3] - ob[:, 1]), 1e-12)
    frac = (ix * iy).max(axis=1) / area
    return [o for o, f in zip(objects, frac) if f < OCCLUSION_COVERAGE]


def detection_loss(dets: Detections, targets: Sequence[LabeledBox], params: DetectorParams, reg_weight: float):
    """Calibration surrogate for the supervised detector loss.

    BCE between each proposal's own-label confidence and its best IoU with a
    same-class target, plus a size-normalised squared box error on proposals
    that overlap a target by at least 0.5. Returns ``(sum of losses, count,
    grad wrt params)``; the caller averages.
    """
    p = dets.proposals
    n = len(p)
    grad = np.zeros(len(params))
    if n == 0:
        return 0.0, 0, grad
    n_cls = params.num_classes
    probs = softmax_rows(p.s)
    conf = np.clip(probs[np.arange(n), p.labels], 1e-12, 1 - 1e-12)
    y = np.zeros(n)
    best = np.full(n, -1)
    if targets:
        tb = boxes_to_array(targets)
        tl = np.array([t.label for t in targets])
        ious = iou_matrix(p.boxes, tb) * (p.labels[:, None] == tl[None, :])
        best = ious.argmax(axis=1)
        y = ious[np.arange(n), best]
    bce = -(y * np.log(conf) + (1 - y) * np.log1p(-conf))
    value = float(bce.sum())
    # d bce / d s_j = (conf - y) / (1 - conf) * (e_label - probs_j)
    coef = (conf - y) / (1 - conf)
    g_s = -coef[:, None] * probs
    g_s[np.arange(n), p.labels] += coef
    grad[:n_cls] = g_s[:, :n_cls].sum(axis=0)

    reg = (y >= 0.5) & np.any(dets.jitter != 0, axis=1)
    if reg.any():
        t = tb[best[reg]]
        scale2 = np.maximum((t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1]), 1.0)
        r = p.boxes[reg] - t
        value += reg_weight * float(((r ** 2).sum(axis=1) / scale2).sum())
        grad[n_cls] += reg_weight * float((2 * r * dets.jitter[reg]).sum(axis=1).dot(1 / scale2))
    return value, n, grad


def _head_grads(params: DetectorParams, dets: Detections, g_s, g_I, g_P) -> np.ndarray:
    """Chain rule from score-head gradients to the parameter vector."""
    n_cls = params.num_classes
    p = dets.proposals
    out = np.zeros(len(params))
    out[:n_cls] = g_s[:, :n_cls].sum(axis=0)
    idx = np.arange(len(p))
    out[n_cls + 1] = float((g_P[:, 1] * P_GAIN * (dets.quality - 0.5)).sum())
    out[n_cls + 2] = float((g_I[idx, p.labels] * dets.quality).sum())
    return out


def _aug_rng(cfg: SimConfig, iteration: int, k: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.augment.rng_seed, cfg.seed, iteration, k, role]))


def train_iteration(state: TrainState, full_batch: Sequence[ImageSample], point_batch: Sequence[ImageSample],
                    cfg: SimConfig) -> tuple[TrainState, IterationReport]:
    """One teacher-student step; the object bank in ``state`` is updated in place."""
    it = state.iteration
    teacher, student = state.teacher, state.student
    grad = np.zeros(len(student))
    det_sum, det_n = 0.0, 0
    n_images = 0

    # supervised branch
    for k, img in enumerate(full_batch):
        img = with_pixels(img)
        if cfg.use_copy_paste:
            bank_update(state.bank, img, img.full_boxes, Provenance.GROUND_TRUTH)
        weak = weak_augment(img, cfg.augment, _aug_rng(cfg, it, k, 0))
        d = oracle_detect(weak, student, cfg.oracle, (it, k, 0), objects=weak.full_boxes)
        v, n, g = detection_loss(d, weak.full_boxes, student, cfg.reg_weight)
        det_sum, det_n, grad = det_sum + v, det_n + n, grad + g
        n_images += 1

    img_vals, pt_vals = [], []
    g_img = np.zeros(len(student))
    g_pt = np.zeros(len(student))
    n_pseudo = n_points = n_unmatched = n_pasted = 0
    for k, img in enumerate(point_batch):
        img = with_pixels(img)
        weak = weak_augment(img, cfg.augment, _aug_rng(cfg, it, k, 1))
        t_dets = nms_detections(oracle_detect(weak, teacher, cfg.oracle, (it, k, 1), objects=weak.hidden_boxes),
                                cfg.match.nms_iou)
        points = list(weak.points)
        pseudo, unmatched = _pseudo_labels(t_dets, points, cfg)
        n_pseudo += len(pseudo)
        n_points += len(points)
        n_unmatched += len(unmatched)

        objects = list(weak.hidden_boxes)
        added: list = []
        pasted = weak
        if cfg.use_copy_paste:
            pasted, added = point_guided_paste(weak, unmatched, state.bank, cfg.augment, _aug_rng(cfg, it, k, 2))
            objects = _covered(objects, added) + list(added)
            bank_update(state.bank, weak, pseudo, Provenance.PSEUDO, min_score=cfg.match.tau)
        n_pasted += len(added)
        targets = pseudo + list(added)
        sample = pasted.replace(full_boxes=targets, hidden_boxes=objects)
        strong = strong_augment(sample, cfg.augment, _aug_rng(cfg, it, k, 3))

        s_dets = oracle_detect(strong, student, cfg.oracle, (it, k, 2), objects=strong.hidden_boxes)
        v, n, g = detection_loss(s_dets, strong.full_boxes, student, cfg.reg_weight)
        det_sum, det_n, grad = det_sum + v, det_n + n, grad + g
        n_images += 1

        p = s_dets.proposals
        if len(p) == 0 or not strong.points:
            continue
        if cfg.use_image_mil:
            res = image_mil_loss(p, derive_image_labels(strong.points, student.num_classes))
            img_vals.append(res.value)
            g_img += _head_grads(student, s_dets, res.grad_s, res.grad_s_I, res.grad_s_P)
        if cfg.use_point_mil:
            bags = build_bags(strong.points, p.boxes, p.labels)
            if any(len(b) for b in bags):
                res = point_mil_loss(bags, p, strong.points)
                pt_vals.append(res.value)
                g_pt += _head_grads(student, s_dets, res.grad_s, res.grad_s_I, res.grad_s_P)

    norm = det_n if cfg.det_normalization == "proposal" else n_images
    l_det = det_sum / norm if norm else 0.0
    grad = grad / norm if norm else grad
    l_img = float(np.mean(img_vals)) if img_vals else 0.0
    l_pt = float(np.mean(pt_vals)) if pt_vals else 0.0
    if img_vals:
        grad = grad + cfg.weights.lambda1 * g_img / len(img_vals)
    if pt_vals:
        grad = grad + cfg.weights.lambda2 * g_pt / len(pt_vals)

    student = student.step(grad, cfg.lr)
    teacher = ema_update(teacher, student, state.ema_rate)
    report = IterationReport(
        iteration=it + 1,
        l_det=l_det,
        l_img=l_img,
        l_pt=l_pt,
        l_total=total_loss(l_det, l_img, l_pt, cfg.weights),
        pseudo_boxes=n_pseudo,
        unmatched_fraction=n_unmatched / n_points if n_points else 0.0,
        pasted=n_pasted,
        point_batch_empty=not point_batch,
    )
    new_state = TrainState(teacher, student, state.bank, it + 1, state.ema_rate, state.metrics + [report])
    return new_state, report


# ------------------------------------------------------------ evaluation ----

def evaluate_pseudo_labels(params: DetectorParams, images: Sequence[ImageSample], cfg: SimConfig) -> dict:
    """Pseudo-label quality of the teacher on fixed point-labelled images."""
    preds, gts = [], []
    n_points = n_unmatched = 0
    for k, img in enumerate(images):
        dets = nms_detections(oracle_detect(img, params, cfg.oracle, (1 << 30, k), objects=img.hidden_boxes),
                              cfg.match.nms_iou)
        points = list(img.points)
        pseudo, unmatched = _pseudo_labels(dets, points, cfg)
        preds.append(pseudo)
        gts.append(list(img.hidden_boxes))
        n_points += len(points)
        n_unmatched += len(unmatched)
    out = pseudo_label_quality(preds, gts)
    out["unmatched_fraction"] = n_unmatched / n_points if n_points else 0.0
    return out


METRIC_COLUMNS = (
    "iteration", "l_det", "l_img", "l_pt", "l_total", "pseudo_boxes", "train_unmatched_fraction",
    "pasted", "pseudo_ap50", "pseudo_ap50_95", "pseudo_precision", "pseudo_recall", "eval_unmatched_fraction",
)


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)
    teacher: Optional[DetectorParams] = None

    def __len__(self):
        return len(self.rows)

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([{c: r[c] for c in METRIC_COLUMNS} for r in self.rows], indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def prepare(dataset: Sequence[ImageSample], split: SplitSpec, cfg: SimConfig):
    """Reserve the evaluation slice, then split the rest into full and point sets.

    The evaluation slice carries its own point annotation (``cfg.eval_point_mode``)
    so runs that differ only in how training points were placed are scored on
    identical inputs.
    """
    samples = list(dataset)
    n_eval = min(cfg.eval_images, max(len(samples) - 1, 0))
    perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE7A1])).permutation(len(samples))
    eval_raw = [samples[i] for i in perm[:n_eval]]
    rest = [samples[i] for i in perm[n_eval:]]
    d_f, d_p = make_splits(rest, split)
    eval_set = []
    for k, s in enumerate(eval_raw):
        gt = s.ground_truth
        seed = int(np.random.SeedSequence([cfg.seed, 0xE7A1, k]).generate_state(1)[0])
        pts = synthesize_points(gt, cfg.eval_point_mode, seed)
        eval_set.append(s.replace(full_boxes=(), points=pts, hidden_boxes=gt))
    return [with_pixels(x) for x in d_f], [with_pixels(x) for x in d_p], eval_set


def _num_classes(samples) -> int:
    labels = [b.label for s in samples for b in s.ground_truth]
    return max(labels) + 1 if labels else 1


def run_simulation(dataset: Sequence[ImageSample], split: SplitSpec, iterations: int, cfg: SimConfig = SimConfig(),
                   num_classes: Optional[int] = None) -> MetricsTable:
    """Train for ``iterations`` steps, evaluating every ``cfg.eval_every`` and at the end."""
    if iterations < 1:
        raise InvalidInputError(f"iterations must be >= 1, got {iterations}")
    d_f, d_p, eval_set = prepare(dataset, split, cfg)
    n_cls = num_classes or _num_classes(dataset)
    theta0 = burn_in_params(d_f, n_cls, cfg)
    state = TrainState(theta0, theta0, ObjectBank(cfg.bank_capacity), 0, cfg.ema_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7C]))
    table = MetricsTable()
    for it in range(iterations):
        fi = rng.choice(len(d_f), size=cfg.batch_full, replace=len(d_f) < cfg.batch_full)
        pi = rng.choice(len(d_p), size=min(cfg.batch_point, len(d_p)), replace=False) if d_p else []
        state, rep = train_iteration(state, [d_f[i] for i in fi], [d_p[i] for i in pi], cfg)
        if (it + 1) % cfg.eval_every == 0 or it + 1 == iterations:
            q = evaluate_pseudo_labels(state.teacher, eval_set, cfg)
            table.rows.append({
                "iteration": rep.iteration, "l_det": rep.l_det, "l_img": rep.l_img, "l_pt": rep.l_pt,
                "l_total": rep.l_total, "pseudo_boxes": rep.pseudo_boxes,
                "train_unmatched_fraction": rep.unmatched_fraction, "pasted": rep.pasted,
                "pseudo_ap50": q["ap50"], "pseudo_ap50_95": q["ap50_95"], "pseudo_precision": q["precision"],
                "pseudo_recall": q["recall"], "eval_unmatched_fraction": q["unmatched_fraction"],
            })
    table.teacher = state.teacher
    return table


def sweep_point_fraction(dataset: Sequence[ImageSample], fractions: Sequence[float], iterations: int,
                         cfg: SimConfig = SimConfig(), full_fraction: float = 0.01, split_seed: int = 0,
                         point_mode: str = "random", num_classes: Optional[int] = None) -> list[dict]:
    """Final pseudo AP50 and recall for each point-labelled fraction."""
    out = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise InvalidInputError(f"fraction {f} outside (0, 1]")
        split = SplitSpec(full_fraction, min(f, 1.0 - full_fraction), split_seed, point_mode)
        table = run_simulation(dataset, split, iterations, cfg, num_classes)
        out.append({"fraction": f, "pseudo_ap50": table.final["pseudo_ap50"], "pseudo_recall": table.final["pseudo_recall"]})
    return out


# ---------------------------------------------------------- benchmark ----

BENCHMARK_IMAGES = 1000
BENCHMARK_CLASSES = 16
BENCHMARK_ZIPF = 1.5
BENCHMARK_FULL_FRACTION = 0.01
BENCHMARK_POINT_FRACTION = 0.5
BENCHMARK_ITERATIONS = 150
BENCHMARK_SEEDS = (0, 1, 2)


def benchmark_dataset(seed: int = 0) -> list[ImageSample]:
    """Long-tailed synthetic scenes used by the ablation studies."""
    return synthetic_dataset(BENCHMARK_IMAGES, BENCHMARK_CLASSES, seed=seed, zipf=BENCHMARK_ZIPF)


def benchmark_split(seed: int = 0, point_fraction: float = BENCHMARK_POINT_FRACTION,
                    point_mode: str = "random") -> SplitSpec:
    return SplitSpec(BENCHMARK_FULL_FRACTION, point_fraction, seed, point_mode)


def benchmark_config(seed: int = 0, **flags) -> SimConfig:
    """The documented noise configuration used for the ablation studies."""
    cfg = SimConfig(
        oracle=OracleConfig(rng_seed=seed),
        augment=AugmentConfig(rng_seed=seed),
        ema_rate=0.9,
        batch_full=4,
        batch_point=8,
        eval_images=300,
        eval_every=25,
        burn_in_gamma=2.0,
        seed=seed,
    )
    return replace(cfg, **flags)


def ablation_configs(seed: int = 0) -> dict:
    return {
        "baseline": benchmark_config(seed, use_matching=False, use_image_mil=False, use_point_mil=False, use_copy_paste=False),
        "matching": benchmark_config(seed, use_image_mil=False, use_point_mil=False, use_copy_paste=False),
        "matching+mil": benchmark_config(seed, use_copy_paste=False),
        "full": benchmark_config(seed),
    }


def benchmark_ap50(name: str = "full", seeds: Sequence[int] = BENCHMARK_SEEDS,
                   point_fraction: float = BENCHMARK_POINT_FRACTION, point_mode: str = "random",
                   iterations: int = BENCHMARK_ITERATIONS) -> float:
    """Final pseudo-label AP50 of one ablation variant, averaged over seeds.

    Single runs move by a point or two with the seed, so comparisons between
    variants use the mean.
    """
    vals = []
    for seed in seeds:
        cfg = replace(ablation_configs(seed)[name], eval_every=iterations)
        table = run_simulation(benchmark_dataset(seed), benchmark_split(seed, point_fraction, point_mode),
                               iterations, cfg, BENCHMARK_CLASSES)
        vals.append(table.final["pseudo_ap50"])
    return float(np.mean(vals))


def benchmark_sweep(fractions: Sequence[float] = (0.05, 0.1, 0.2, 0.4), seeds: Sequence[int] = BENCHMARK_SEEDS,
                    iterations: int = BENCHMARK_ITERATIONS) -> list[float]:
    """Seed-averaged final pseudo AP50 of the full variant at each point fraction."""
    per_seed = []
    for seed in seeds:
        cfg = replace(ablation_configs(seed)["full"], eval_every=iterations)
        rows = sweep_point_fraction(benchmark_dataset(seed), fractions, iterations, cfg, BENCHMARK_FULL_FRACTION,
                                    seed, "random", BENCHMARK_CLASSES)
        per_seed.append([r["pseudo_ap50"] for r in rows])
    return np.mean(per_seed, axis=0).tolist()
