import json

import pytest

from wssod.core import BBox, ImageSample, InvalidInputError, LabeledBox, contains
from wssod.datasets import (
    CocoFormatError,
    IntegrityError,
    Split,
    SplitSpec,
    load_coco_json,
    make_splits,
    synthesize_points,
    write_split_manifest,
)


def write_coco(tmp_path, images, annotations, categories, name="ann.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"images": images, "annotations": annotations, "categories": categories}))
    return path


def test_load_converts_xywh(tmp_path):
    path = write_coco(tmp_path, [{"id": 1, "width": 20, "height": 20}],
                      [{"id": 1, "image_id": 1, "category_id": 7, "bbox": [2, 3, 4, 5]}], [{"id": 7}])
    ds = load_coco_json(path)
    b = ds.samples[0].full_boxes[0]
    assert (b.box.x1, b.box.y1, b.box.x2, b.box.y2) == (2, 3, 6, 8)
    assert b.label == 0 and ds.original_id(0) == 7


def test_load_clips_out_of_bounds(tmp_path):
    path = write_coco(tmp_path, [{"id": 1, "width": 10, "height": 10}],
                      [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [-5, 0, 8, 3]}], [{"id": 1}])
    b = load_coco_json(path).samples[0].full_boxes[0].box
    assert (b.x1, b.y1, b.x2, b.y2) == (0, 0, 3, 3)


def test_unknown_image_is_integrity_error(tmp_path):
    path = write_coco(tmp_path, [{"id": 1, "width": 10, "height": 10}],
                      [{"id": 1, "image_id": 99, "category_id": 1, "bbox": [0, 0, 1, 1]}], [{"id": 1}])
    with pytest.raises(IntegrityError, match="99"):
        load_coco_json(path)


def test_unknown_category_is_integrity_error(tmp_path):
    path = write_coco(tmp_path, [{"id": 1, "width": 10, "height": 10}],
                      [{"id": 1, "image_id": 1, "category_id": 5, "bbox": [0, 0, 1, 1]}], [{"id": 1}])
    with pytest.raises(IntegrityError):
        load_coco_json(path)


def test_malformed_json_reports_byte_offset(tmp_path):
    path = tmp_path / "bad.json"
    path.write_bytes('{"images": [], "é": ,}'.encode("utf-8"))
    with pytest.raises(CocoFormatError) as info:
        load_coco_json(path)
    assert info.value.offset == len('{"images": [], "é": '.encode("utf-8"))


def test_missing_section_is_format_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"images": []}))
    with pytest.raises(CocoFormatError):
        load_coco_json(path)


def test_zero_area_dropped_and_crowd_skipped(tmp_path):
    anns = [
        {"id": 1, "image_id": 1, "category_id": 1, "bbox": [12, 0, 3, 3]},  # fully outside
        {"id": 2, "image_id": 1, "category_id": 1, "bbox": [1, 1, 0, 4]},  # zero width
        {"id": 3, "image_id": 1, "category_id": 1, "bbox": [1, 1, 2, 2], "iscrowd": 1},
        {"id": 4, "image_id": 1, "category_id": 1, "bbox": [1, 1, 2, 2]},
    ]
    ds = load_coco_json(write_coco(tmp_path, [{"id": 1, "width": 10, "height": 10}], anns, [{"id": 1}]))
    assert ds.num_dropped == 2
    assert len(ds.samples[0].full_boxes) == 1


def test_category_remap_is_bijection(tmp_path):
    cats = [{"id": 40}, {"id": 3}, {"id": 17}]
    anns = [{"id": k, "image_id": 1, "category_id": c["id"], "bbox": [0, 0, 2, 2]} for k, c in enumerate(cats)]
    ds = load_coco_json(write_coco(tmp_path, [{"id": 1, "width": 10, "height": 10}], anns, cats))
    assert ds.num_classes == 3
    labels = [b.label for b in ds.samples[0].full_boxes]
    assert sorted(labels) == [0, 1, 2]
    assert [ds.original_id(b.label) for b in ds.samples[0].full_boxes] == [40, 3, 17]


# ----------------------------------------------------------------- points ----

def test_center_points():
    pts = synthesize_points([LabeledBox(BBox(0, 0, 2, 2), 4)], "center")
    assert (pts[0].x, pts[0].y, pts[0].label) == (1, 1, 4)


def test_random_points_inside(rng):
    xy = rng.uniform(0, 100, size=(10_000, 2))
    wh = rng.uniform(0, 30, size=(10_000, 2))
    boxes = [LabeledBox(BBox(x, y, x + w, y + h), 0) for (x, y), (w, h) in zip(xy, wh)]
    pts = synthesize_points(boxes, "random", 7)
    assert all(contains(p, b.box) for p, b in zip(pts, boxes))
    assert pts == synthesize_points(boxes, "random", 7)


def test_degenerate_dimension_collapses():
    boxes = [LabeledBox(BBox(3, 0, 3, 4), 0)] * 50
    assert {p.x for p in synthesize_points(boxes, "random", 1)} == {3.0}


def test_bad_point_mode():
    with pytest.raises(InvalidInputError):
        synthesize_points([], "corner")


# ----------------------------------------------------------------- splits ----

def images(n, boxes_per_image=2):
    return [ImageSample(k, 50, 50, full_boxes=[LabeledBox(BBox(j, j, j + 10, j + 10), j % 3)
                                              for j in range(boxes_per_image)]) for k in range(n)]


def test_split_sizes_by_ceiling():
    d_f, d_p = make_splits(images(100), SplitSpec(0.01, 0.99))
    assert len(d_f) == 1 and len(d_p) == 99
    d_f, d_p = make_splits(images(7), SplitSpec(1.0, 0.0))
    assert len(d_f) == 7 and len(d_p) == 0


def test_split_invariants():
    data = images(60, 3)
    split = make_splits(data, SplitSpec(0.1, 0.5, rng_seed=3))
    ids_f = {s.image_id for s in split.full}
    ids_p = {s.image_id for s in split.point}
    assert not ids_f & ids_p
    assert len(ids_f) + len(ids_p) + len(split.unused) == 60
    for s in split.point:
        assert s.full_boxes == ()
        assert len(s.points) == len(s.hidden_boxes) == 3
        assert all(contains(p, b.box) and p.label == b.label for p, b in zip(s.points, s.hidden_boxes))


def test_split_deterministic():
    data = images(40)
    a = make_splits(data, SplitSpec(0.2, 0.3, rng_seed=9))
    b = make_splits(data, SplitSpec(0.2, 0.3, rng_seed=9))
    assert a.manifest() == b.manifest()
    assert [s.points for s in a.point] == [s.points for s in b.point]


def test_split_rejects_empty_full_set():
    with pytest.raises(InvalidInputError):
        make_splits([], SplitSpec(0.5, 0.5))
    with pytest.raises(InvalidInputError):
        SplitSpec(0.0, 0.5)
    with pytest.raises(InvalidInputError):
        SplitSpec(0.6, 0.6)


def test_split_manifest_file(tmp_path):
    split = make_splits(images(10), SplitSpec(0.2, 0.5))
    path = tmp_path / "split.json"
    write_split_manifest(split, path)
    saved = json.loads(path.read_text())
    assert sorted(saved.values()).count("full") == 2
    assert isinstance(split, Split)
