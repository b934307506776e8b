"""Geometry primitives, annotation records and proposal score containers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import _kernels

ImageId = Union[int, str]


class InvalidInputError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


def _frozen(arr, dtype=np.float64, ndim=None, name="array"):
    out = np.array(arr, dtype=dtype, copy=True)
    if ndim is not None and out.ndim != ndim:
        raise InvalidInputError(f"{name} must be {ndim}-D, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvalidInputError(f"box corners out of order {coords}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])

    def clip(self, width: float, height: float) -> "BBox":
        return BBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )


@dataclass(frozen=True)
class LabeledBox:
    box: BBox
    label: int
    score: float = 1.0

    def __post_init__(self):
        if int(self.label) != self.label or self.label < 0:
            raise InvalidInputError(f"label must be a non-negative integer, got {self.label}")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidInputError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class PointAnnotation:
    x: float
    y: float
    label: int

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidInputError(f"non-finite point ({self.x}, {self.y})")
        if int(self.label) != self.label or self.label < 0:
            raise InvalidInputError(f"label must be a non-negative integer, got {self.label}")


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """Per-image proposals with the three score heads.

    ``s`` has ``C + 1`` columns (background last), ``s_I`` has ``C`` and
    ``s_P`` has 2 (column 1 positive). ``labels`` carries teacher classes once
    a label has been assigned to every proposal. Arrays are stored read-only.
    """

    boxes: np.ndarray
    s: np.ndarray
    s_I: np.ndarray
    s_P: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        boxes = self.boxes
        if not isinstance(boxes, np.ndarray):
            boxes = [b.as_array() if isinstance(b, BBox) else b for b in boxes]
        boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        object.__setattr__(self, "boxes", _frozen(boxes, ndim=2, name="boxes"))
        n = len(self.boxes)
        s = _frozen(self.s, ndim=2, name="s")
        object.__setattr__(self, "s", s)
        n_cls = s.shape[1] - 1
        s_I = self.s_I
        if s_I is None or np.size(s_I) == 0:
            s_I = np.zeros((n, max(n_cls, 0)))
        object.__setattr__(self, "s_I", _frozen(s_I, ndim=2, name="s_I"))
        object.__setattr__(self, "s_P", _frozen(self.s_P, ndim=2, name="s_P").reshape(n, 2))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(self.labels, dtype=np.int64, ndim=1, name="labels"))
        if n_cls < 1:
            raise InvalidInputError("s needs at least one foreground column plus background")
        if self.s.shape[0] != n or self.s_I.shape != (n, n_cls) or self.s_P.shape != (n, 2):
            raise InvalidInputError(
                f"score shapes {self.s.shape}, {self.s_I.shape}, {self.s_P.shape} "
                f"do not match {n} boxes and {n_cls} classes"
            )
        if self.labels is not None and self.labels.shape != (n,):
            raise InvalidInputError(f"{len(self.labels)} labels for {n} boxes")
        for name in ("boxes", "s", "s_I", "s_P"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"{name} has non-finite entries")
        if np.any(self.boxes[:, 2] < self.boxes[:, 0]) or np.any(self.boxes[:, 3] < self.boxes[:, 1]):
            raise InvalidInputError("box corners out of order")

    def __len__(self):
        return len(self.boxes)

    @property
    def num_classes(self) -> int:
        return self.s.shape[1] - 1

    def box(self, j: int) -> BBox:
        return BBox(*map(float, self.boxes[j]))

    def subset(self, idx) -> "ProposalSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ProposalSet(
            self.boxes[idx], self.s[idx], self.s_I[idx], self.s_P[idx],
            None if self.labels is None else self.labels[idx],
        )

    def with_labels(self, labels) -> "ProposalSet":
        return ProposalSet(self.boxes, self.s, self.s_I, self.s_P, labels)


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One training image.

    ``full_boxes`` non-empty marks a fully labelled image, ``points`` a point
    labelled one. ``hidden_boxes`` is ground truth withheld from training and
    only read by the synthetic detector and by evaluation.
    """

    image_id: ImageId
    width: int
    height: int
    pixels: Optional[np.ndarray] = None
    full_boxes: tuple = ()
    points: tuple = ()
    hidden_boxes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "full_boxes", tuple(self.full_boxes))
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "hidden_boxes", tuple(self.hidden_boxes))
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError(f"image {self.image_id}: bad size {self.width}x{self.height}")
        if self.pixels is not None:
            px = np.array(self.pixels, dtype=np.uint8, copy=True)
            if px.shape != (self.height, self.width, 3):
                raise InvalidInputError(
                    f"image {self.image_id}: pixels {px.shape} != ({self.height}, {self.width}, 3)"
                )
            px.setflags(write=False)
            object.__setattr__(self, "pixels", px)
        for lb in self.full_boxes + self.hidden_boxes:
            b = lb.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise InvalidInputError(f"image {self.image_id}: box {b} outside the image")
        for p in self.points:
            if not (0 <= p.x <= self.width and 0 <= p.y <= self.height):
                raise InvalidInputError(f"image {self.image_id}: point ({p.x}, {p.y}) outside the image")

    @property
    def ground_truth(self) -> tuple:
        """Hidden boxes when present, else the visible full boxes."""
        return self.hidden_boxes if self.hidden_boxes else self.full_boxes

    def replace(self, **changes) -> "ImageSample":
        fields = dict(
            image_id=self.image_id, width=self.width, height=self.height, pixels=self.pixels,
            full_boxes=self.full_boxes, points=self.points, hidden_boxes=self.hidden_boxes,
        )
        fields.update(changes)
        return ImageSample(**fields)


# ------------------------------------------------------------ geometry ----

def boxes_to_array(boxes: Iterable) -> np.ndarray:
    """Stack BBox / LabeledBox items into an ``(N, 4)`` float array."""
    rows = [(b.box if isinstance(b, LabeledBox) else b).as_array() for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` xyxy arrays; 0 where union is 0."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return _kernels.iou_matrix(a, b)


def contains(p: PointAnnotation, b: BBox) -> bool:
    # boundary inclusive on every edge
    return b.x1 <= p.x <= b.x2 and b.y1 <= p.y <= b.y2


def contains_matrix(points_xy: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """``(N_p, N_b)`` boolean containment table."""
    pts = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    bx = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x = pts[:, 0:1]
    y = pts[:, 1:2]
    return (x >= bx[None, :, 0]) & (x <= bx[None, :, 2]) & (y >= bx[None, :, 1]) & (y <= bx[None, :, 3])


def nms_indices(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Indices kept by greedy class-wise NMS, ordered by (score desc, index asc)."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidInputError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    order = np.lexsort((np.arange(len(scores)), -scores)).astype(np.int64)
    return _kernels.nms_keep(boxes, labels, order, float(iou_threshold))


def nms(dets: Sequence[LabeledBox], iou_threshold: float) -> list[LabeledBox]:
    if not dets:
        return []
    keep = nms_indices(
        boxes_to_array(dets),
        np.array([d.score for d in dets]),
        np.array([d.label for d in dets]),
        iou_threshold,
    )
    return [dets[i] for i in keep]


# ------------------------------------------------------------- softmax ----

def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cols(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
