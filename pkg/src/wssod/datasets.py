"""COCO annotation loading, point synthesis and full/point split generation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import BBox, ImageSample, InvalidInputError, LabeledBox, PointAnnotation

log = logging.getLogger(__name__)

SPLIT_EPS = 1e-9


class CocoFormatError(ValueError):
    """Malformed annotation file; ``offset`` is the byte position when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class IntegrityError(ValueError):
    """Annotation references something that does not exist."""


@dataclass(frozen=True)
class CocoDataset:
    samples: tuple
    category_ids: tuple  # contiguous index -> original category id
    num_dropped: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.category_ids)

    def original_id(self, label: int) -> int:
        return self.category_ids[label]


def _decode(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CocoFormatError(f"{path}: not UTF-8", exc.start) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CocoFormatError(f"{path}: {exc.msg}", offset) from exc


def load_coco_json(path) -> CocoDataset:
    """Parse COCO detection JSON into image samples with full boxes.

    Boxes go from ``[x, y, w, h]`` to corners, are clipped to the image and
    dropped (and counted) when the clip leaves zero area. Crowd annotations
    are skipped. Category ids are remapped in ascending order to ``[0, C)``.
    """
    doc = _decode(path)
    if not isinstance(doc, dict):
        raise CocoFormatError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise CocoFormatError(f"{path}: missing '{key}' array")

    cat_ids = sorted(int(c["id"]) for c in doc["categories"])
    remap = {cid: k for k, cid in enumerate(cat_ids)}
    images = {}
    order = []
    for k, im in enumerate(doc["images"]):
        try:
            images[im["id"]] = (int(im["width"]), int(im["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CocoFormatError(f"{path}: images[{k}] malformed: {exc}") from exc
        order.append(im["id"])

    boxes: dict = {i: [] for i in order}
    dropped = 0
    for k, ann in enumerate(doc["annotations"]):
        if ann.get("iscrowd", 0):
            continue
        img_id = ann.get("image_id")
        if img_id not in images:
            raise IntegrityError(f"{path}: annotations[{k}] references unknown image id {img_id!r}")
        cid = ann.get("category_id")
        if cid not in remap:
            raise IntegrityError(f"{path}: annotations[{k}] references unknown category id {cid!r}")
        try:
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CocoFormatError(f"{path}: annotations[{k}] bbox malformed") from exc
        if w < 0 or h < 0:
            dropped += 1
            continue
        width, height = images[img_id]
        box = BBox.from_xywh(x, y, w, h).clip(width, height)
        if box.area <= 0:
            dropped += 1
            continue
        boxes[img_id].append(LabeledBox(box, remap[cid]))
    if dropped:
        log.warning("%s: dropped %d zero-area boxes", path, dropped)
    samples = tuple(
        ImageSample(i, images[i][0], images[i][1], full_boxes=boxes[i]) for i in order
    )
    return CocoDataset(samples, tuple(cat_ids), dropped)


def _uniform_open(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws from the open interval (0, 1)."""
    u = rng.random(n)
    while np.any(u == 0.0):
        zero = u == 0.0
        u[zero] = rng.random(int(zero.sum()))
    return u


def synthesize_points(boxes: Sequence[LabeledBox], mode: str = "random", rng_seed: int = 0) -> list[PointAnnotation]:
    """One point per box carrying its label.

    ``random`` samples the open box interior uniformly (a zero-width side
    pins that coordinate); ``center`` returns the midpoint.
    """
    if mode not in ("random", "center"):
        raise InvalidInputError(f"mode must be 'random' or 'center', got {mode!r}")
    arr = np.array([b.box.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)
    if mode == "center":
        xs = 0.5 * (arr[:, 0] + arr[:, 2])
        ys = 0.5 * (arr[:, 1] + arr[:, 3])
    else:
        rng = np.random.default_rng(rng_seed)
        u = _uniform_open(rng, len(arr))
        v = _uniform_open(rng, len(arr))
        xs = arr[:, 0] + (arr[:, 2] - arr[:, 0]) * u
        ys = arr[:, 1] + (arr[:, 3] - arr[:, 1]) * v
        # rounding can land on the far edge; keep the draw inside
        xs = np.minimum(xs, arr[:, 2])
        ys = np.minimum(ys, arr[:, 3])
    return [PointAnnotation(float(x), float(y), b.label) for x, y, b in zip(xs, ys, boxes)]


@dataclass(frozen=True)
class SplitSpec:
    full_fraction: float
    point_fraction: float
    rng_seed: int = 0
    point_mode: str = "random"

    def __post_init__(self):
        if not 0.0 < self.full_fraction <= 1.0:
            raise InvalidInputError(f"full_fraction must lie in (0, 1], got {self.full_fraction}")
        if not 0.0 <= self.point_fraction <= 1.0:
            raise InvalidInputError(f"point_fraction must lie in [0, 1], got {self.point_fraction}")
        if self.full_fraction + self.point_fraction > 1.0 + SPLIT_EPS:
            raise InvalidInputError("full_fraction + point_fraction exceeds 1")


@dataclass(frozen=True)
class Split:
    full: tuple
    point: tuple
    unused: tuple = field(default=())

    def __iter__(self):
        # unpacks as (D_F, D_P)
        return iter((self.full, self.point))

    def manifest(self) -> dict:
        out = {}
        for name, part in (("full", self.full), ("point", self.point), ("unused", self.unused)):
            for s in part:
                out[str(s.image_id)] = name
        return out


def _take(frac: float, n: int) -> int:
    return min(n, math.ceil(frac * n - SPLIT_EPS))


def make_splits(samples: Sequence[ImageSample], spec: SplitSpec) -> Split:
    """Shuffle images and cut them into fully labelled, point labelled and unused.

    Point-labelled images get one synthesized point per box; their boxes are
    moved to ``hidden_boxes`` and the visible box list is emptied.
    """
    n = len(samples)
    n_full = _take(spec.full_fraction, n)
    if n_full == 0:
        raise InvalidInputError(f"full_fraction {spec.full_fraction} selects no image out of {n}")
    n_point = min(_take(spec.point_fraction, n), n - n_full)
    rng = np.random.default_rng(spec.rng_seed)
    perm = rng.permutation(n)
    full = tuple(samples[i] for i in perm[:n_full])
    point = []
    for k, i in enumerate(perm[n_full:n_full + n_point]):
        s = samples[i]
        gt = s.ground_truth
        seed = np.random.SeedSequence([spec.rng_seed, k]).generate_state(1)[0]
        pts = synthesize_points(gt, spec.point_mode, int(seed))
        point.append(s.replace(full_boxes=(), points=pts, hidden_boxes=gt))
    unused = tuple(samples[i] for i in perm[n_full + n_point:])
    return Split(full, tuple(point), unused)


def write_split_manifest(split: Split, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(split.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
