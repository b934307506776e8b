"""Object bank, point-guided copy-paste and the weak/strong image transforms."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import BBox, ImageSample, InvalidInputError, LabeledBox, PointAnnotation


class Provenance(enum.Enum):
    GROUND_TRUTH = "ground-truth"
    PSEUDO = "pseudo"


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray
    label: int
    source_id: object
    provenance: Provenance

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.uint8, copy=True)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInputError(f"patch pixels must be h x w x 3 with h, w >= 1, got {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


class ObjectBank:
    """Per-class bounded FIFO queues of patches.

    Single writer: one loop mutates the bank; readers may inspect it between
    mutations.
    """

    def __init__(self, capacity: int = 100):
        if capacity < 1:
            raise InvalidInputError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self._queues: dict[int, deque] = {}

    def add(self, patch: Patch) -> None:
        q = self._queues.setdefault(patch.label, deque(maxlen=self.capacity))
        q.append(patch)

    def size(self, label: int) -> int:
        q = self._queues.get(label)
        return len(q) if q else 0

    def __len__(self):
        return sum(len(q) for q in self._queues.values())

    def classes(self) -> list[int]:
        return sorted(c for c, q in self._queues.items() if q)

    def patches(self, label: int) -> tuple:
        return tuple(self._queues.get(label, ()))

    def sample(self, label: int, rng: np.random.Generator) -> Patch:
        q = self._queues.get(label)
        if not q:
            raise KeyError(f"no patches of class {label}")
        return q[int(rng.integers(len(q)))]


@dataclass(frozen=True)
class AugmentConfig:
    flip_probability: float = 0.5
    paste_jitter: float = 0.0
    rng_seed: int = 0
    intensity_range: tuple = (0.8, 1.2)

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise InvalidInputError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")
        if self.paste_jitter < 0:
            raise InvalidInputError(f"paste_jitter must be >= 0, got {self.paste_jitter}")
        lo, hi = self.intensity_range
        if not 0.0 <= lo <= hi:
            raise InvalidInputError(f"bad intensity range {self.intensity_range}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


def _need_pixels(img: ImageSample) -> np.ndarray:
    if img.pixels is None:
        raise InvalidInputError(f"image {img.image_id} has no pixels")
    return img.pixels


def crop(img: ImageSample, box: BBox) -> Optional[np.ndarray]:
    """Pixel rows/cols covered by ``box`` after clipping; None when empty."""
    px = _need_pixels(img)
    b = box.clip(img.width, img.height)
    r0, r1 = math.floor(b.y1), math.ceil(b.y2)
    c0, c1 = math.floor(b.x1), math.ceil(b.x2)
    if r1 <= r0 or c1 <= c0 or b.area <= 0:
        return None
    return px[r0:r1, c0:c1]


def bank_update(bank: ObjectBank, img: ImageSample, boxes: Sequence[LabeledBox],
                provenance: Provenance = Provenance.GROUND_TRUTH, min_score: float = 0.0) -> ObjectBank:
    """Enqueue the crop of every box scoring at least ``min_score``.

    Boxes that clip to zero area are skipped. The bank is mutated in place
    and returned for chaining.
    """
    _need_pixels(img)
    for lb in boxes:
        if lb.score < min_score:
            continue
        pixels = crop(img, lb.box)
        if pixels is None:
            continue
        bank.add(Patch(pixels, lb.label, img.image_id, provenance))
    return bank


def pasteable(unmatched: Sequence[PointAnnotation], bank: ObjectBank) -> list[int]:
    """Indices of the points that will receive a paste, in paste order."""
    return [i for i, p in enumerate(unmatched) if bank.size(p.label) > 0]


def point_guided_paste(img: ImageSample, unmatched: Sequence[PointAnnotation], bank: ObjectBank,
                       cfg: AugmentConfig = AugmentConfig(), rng: Optional[np.random.Generator] = None):
    """Paste a same-class bank patch centred on each unmatched point.

    Returns ``(augmented image, added boxes)``. The k-th added box belongs to
    the k-th index of :func:`pasteable`. Pasted boxes join the image's hidden
    ground truth. With nothing to paste the input image is returned as is.
    """
    px = _need_pixels(img)
    rng = cfg.rng() if rng is None else rng
    chosen = pasteable(unmatched, bank)
    if not chosen:
        return img, []
    canvas = px.copy()
    added = []
    for i in chosen:
        p = unmatched[i]
        patch = bank.sample(p.label, rng)
        dx, dy = (rng.uniform(-cfg.paste_jitter, cfg.paste_jitter, size=2) if cfg.paste_jitter > 0 else (0.0, 0.0))
        h, w = patch.height, patch.width
        cx, cy = p.x + dx, p.y + dy
        box = BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clip(img.width, img.height)
        added.append(LabeledBox(box, p.label, 1.0))

        top, left = int(round(cy - h / 2)), int(round(cx - w / 2))
        r0, c0 = max(top, 0), max(left, 0)
        r1, c1 = min(top + h, img.height), min(left + w, img.width)
        if r1 > r0 and c1 > c0:
            canvas[r0:r1, c0:c1] = patch.pixels[r0 - top:r1 - top, c0 - left:c1 - left]
    hidden = img.hidden_boxes + tuple(added) if img.hidden_boxes else tuple(added)
    return img.replace(pixels=canvas, hidden_boxes=hidden), added


# ----------------------------------------------------------- transforms ----

def _flip_box(lb: LabeledBox, width: float) -> LabeledBox:
    b = lb.box
    return LabeledBox(BBox(width - b.x2, b.y1, width - b.x1, b.y2), lb.label, lb.score)


def hflip(img: ImageSample) -> ImageSample:
    """Mirror pixels, boxes and points about the vertical centre line."""
    w = img.width
    return img.replace(
        pixels=None if img.pixels is None else img.pixels[:, ::-1],
        full_boxes=[_flip_box(b, w) for b in img.full_boxes],
        hidden_boxes=[_flip_box(b, w) for b in img.hidden_boxes],
        points=[PointAnnotation(w - p.x, p.y, p.label) for p in img.points],
    )


def intensity_jitter(img: ImageSample, scales) -> ImageSample:
    px = _need_pixels(img)
    scales = np.asarray(scales, dtype=np.float64).reshape(1, 1, 3)
    out = np.clip(np.rint(px * scales), 0, 255).astype(np.uint8)
    return img.replace(pixels=out)


def weak_augment(img: ImageSample, cfg: AugmentConfig = AugmentConfig(), rng: Optional[np.random.Generator] = None) -> ImageSample:
    _need_pixels(img)
    rng = cfg.rng() if rng is None else rng
    return hflip(img) if rng.random() < cfg.flip_probability else img


def strong_augment(img: ImageSample, cfg: AugmentConfig = AugmentConfig(), rng: Optional[np.random.Generator] = None) -> ImageSample:
    rng = cfg.rng() if rng is None else rng
    out = weak_augment(img, cfg, rng)
    lo, hi = cfg.intensity_range
    return intensity_jitter(out, rng.uniform(lo, hi, size=3))
