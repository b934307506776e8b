"""Small on-disk inputs for the command-line tests."""

import json

from wssod.cli import coco_document
from wssod.datasets import synthesize_points
from wssod.sim import (
    DetectorParams,
    OracleConfig,
    detection_confidence,
    nms_detections,
    oracle_detect,
    synthetic_dataset,
)

NUM_CLASSES = 3


def write_inputs(root, n_images=6, seed=0):
    """Write a COCO file, points, detections and predictions under ``root``.

    Returns a dict of paths keyed by role.
    """
    samples = synthetic_dataset(n_images, NUM_CLASSES, seed=seed)
    params = DetectorParams.initial([1.0] * NUM_CLASSES)
    points, dets, preds, gts = [], [], [], []
    for k, s in enumerate(samples):
        for p in synthesize_points(s.full_boxes, "random", k):
            points.append({"image_id": s.image_id, "x": p.x, "y": p.y, "label": p.label})
        d = nms_detections(oracle_detect(s, params, OracleConfig(rng_seed=seed), (k,)), 0.5).proposals
        conf = detection_confidence(d)
        for j in range(len(d)):
            dets.append({
                "image_id": s.image_id,
                "box": d.boxes[j].tolist(),
                "label": int(d.labels[j]),
                "score": float(conf[j]),
                "s_row": d.s[j].tolist(),
                "s_I_row": d.s_I[j].tolist(),
                "s_P_row": d.s_P[j].tolist(),
            })
            preds.append({"image_id": s.image_id, "box": d.boxes[j].tolist(), "label": int(d.labels[j]),
                          "score": float(conf[j])})
        for b in s.full_boxes:
            gts.append({"image_id": s.image_id, "box": b.box.as_array().tolist(), "label": b.label})
    paths = {name: root / f"{name}.json" for name in ("coco", "points", "detections", "preds", "gt")}
    docs = {"coco": coco_document(samples, NUM_CLASSES), "points": points, "detections": dets,
            "preds": preds, "gt": gts}
    for name, doc in docs.items():
        paths[name].write_text(json.dumps(doc))
    return paths
