"""Command-line entry point: ``wssod <command> ...``.

Exit codes: 0 success, 1 a requested check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import __version__
from .core import BBox, InvalidInputError, LabeledBox, PointAnnotation, ProposalSet
from .datasets import CocoFormatError, IntegrityError, SplitSpec, load_coco_json, synthesize_points
from .evaluation import average_precision, error_decomposition
from .gradcheck import check_image_mil, check_point_mil
from .matching import MatchConfig, generate_pseudo_labels, teacher_labels, unmatched_fraction
from .mil import LossWeights, build_bags, derive_image_labels, image_mil_loss, point_mil_loss, total_loss
from .sim import SimConfig, ablation_configs, run_simulation, sweep_point_fraction, synthetic_dataset

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


# ------------------------------------------------------------------- io ----

def _read_json(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", "?"))
        raise InputError(f"{path}: malformed JSON at offset {pos}") from exc


def _records(path):
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise InputError(f"{path}: expected a JSON list of records")
    return doc


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(path, command: str, argv: list, config: dict, seed, outputs: list) -> None:
    manifest = {
        "argv": list(argv),
        "command": command,
        "config": config,
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "version": __version__,
    }
    _write(path, _dump(manifest))


def _point(rec, path, k) -> tuple:
    try:
        return str(rec["image_id"]), PointAnnotation(float(rec["x"]), float(rec["y"]), int(rec["label"]))
    except (KeyError, TypeError, ValueError, InvalidInputError) as exc:
        raise InputError(f"{path}: record {k}: bad point ({exc})") from exc


def _group_points(path):
    out: "OrderedDict[str, list]" = OrderedDict()
    for k, rec in enumerate(_records(path)):
        img, pt = _point(rec, path, k)
        out.setdefault(img, []).append(pt)
    return out


def _labeled_boxes(path, need_score: bool):
    out: "OrderedDict[str, list]" = OrderedDict()
    for k, rec in enumerate(_records(path)):
        try:
            box = BBox(*map(float, rec["box"]))
            score = float(rec.get("score", 1.0)) if need_score else 1.0
            out.setdefault(str(rec["image_id"]), []).append(LabeledBox(box, int(rec["label"]), score))
        except (KeyError, TypeError, ValueError, InvalidInputError) as exc:
            raise InputError(f"{path}: record {k}: bad box record ({exc})") from exc
    return out


def _proposal_sets(path, with_s_I: bool):
    """Group per-proposal records into one ProposalSet per image."""
    rows: "OrderedDict[str, dict]" = OrderedDict()
    for k, rec in enumerate(_records(path)):
        try:
            img = str(rec["image_id"])
            r = rows.setdefault(img, {"boxes": [], "s": [], "s_I": [], "s_P": [], "labels": [], "idx": []})
            r["boxes"].append([float(v) for v in rec["box"]])
            r["s"].append([float(v) for v in rec["s_row"]])
            r["s_P"].append([float(v) for v in rec["s_P_row"]])
            r["s_I"].append([float(v) for v in rec["s_I_row"]] if with_s_I and "s_I_row" in rec else None)
            r["labels"].append(int(rec["label"]) if "label" in rec else None)
            r["idx"].append(k)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: record {k}: bad detection record ({exc})") from exc
    out = OrderedDict()
    for img, r in rows.items():
        widths = {len(s) for s in r["s"]}
        if len(widths) != 1:
            raise InputError(f"{path}: record {r['idx'][0]}: image {img} mixes s_row lengths {sorted(widths)}")
        s_I = None if any(v is None for v in r["s_I"]) else r["s_I"]
        labels = None if any(v is None for v in r["labels"]) else r["labels"]
        try:
            out[img] = (ProposalSet(r["boxes"], r["s"], s_I, r["s_P"], labels), r["idx"])
        except (InvalidInputError, ValueError) as exc:
            raise InputError(f"{path}: records {r['idx'][0]}..{r['idx'][-1]} (image {img}): {exc}") from exc
    return out


def _box_json(lb: LabeledBox) -> dict:
    b = lb.box
    return {"box": [b.x1, b.y1, b.x2, b.y2], "label": lb.label, "score": lb.score}


def _clean(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


# ------------------------------------------------------------- commands ----

def cmd_match(args) -> int:
    points = _group_points(args.annotations)
    dets = _proposal_sets(args.detections, with_s_I=False)
    cfg = MatchConfig(tau=args.tau, nms_iou=args.nms_iou)
    _write_manifest(args.manifest or f"{args.out}.manifest.json", "match", args.argv,
                    {"tau": cfg.tau, "nms_iou": cfg.nms_iou}, None, [args.out])
    images = {}
    n_points = n_unmatched = 0
    for img, pts in points.items():
        if img in dets:
            p, _ = dets[img]
        else:
            n_cls = next(iter(dets.values()))[0].num_classes if dets else max(q.label for q in pts) + 1
            p = ProposalSet(np.zeros((0, 4)), np.zeros((0, n_cls + 1)), None, np.zeros((0, 2)))
        try:
            res = generate_pseudo_labels(pts, p, cfg)
        except InvalidInputError as exc:
            raise InputError(f"image {img}: {exc}") from exc
        n_points += len(pts)
        n_unmatched += len(res.unmatched_points)
        images[img] = {
            "pairs": [{"point": i, "proposal": j, "cost": c} for i, j, c in res.pairs],
            "pseudo_boxes": [_box_json(b) for b in res.pseudo_boxes],
            "unmatched_points": list(res.unmatched_points),
            "unmatched_fraction": unmatched_fraction(res, len(pts)),
        }
    summary = {
        "matched": n_points - n_unmatched,
        "points": n_points,
        "unmatched_fraction": n_unmatched / n_points if n_points else 0.0,
    }
    _write(args.out, _dump({"images": images, "summary": summary}))
    print(_dump(summary), end="")
    return EXIT_OK


def cmd_losses(args) -> int:
    props = _proposal_sets(args.proposals, with_s_I=True)
    points = _group_points(args.points) if args.points else OrderedDict()
    weights = LossWeights(args.lambda1, args.lambda2)
    per_image = {}
    img_vals, pt_vals = [], []
    worst = 0.0
    ok = True
    for img, (p, _) in props.items():
        pts = points.get(img, [])
        try:
            labels = derive_image_labels(pts, p.num_classes)
        except InvalidInputError as exc:
            raise InputError(f"{args.points}: image {img}: {exc}") from exc
        det_labels = p.labels if p.labels is not None else teacher_labels(p)[0]
        r_img = image_mil_loss(p, labels)
        bags = build_bags(pts, p.boxes, det_labels)
        r_pt = point_mil_loss(bags, p, pts)
        img_vals.append(r_img.value)
        entry = {"image_mil": r_img.value, "point_mil": r_pt.value, "live_bags": sum(1 for b in bags if len(b))}
        if entry["live_bags"]:
            pt_vals.append(r_pt.value)
        if args.check_grads:
            checks = check_image_mil(p, labels, r_img) + check_point_mil(p, bags, pts, r_pt)
            entry["max_rel_grad_error"] = max(c.max_rel_error for c in checks)
            entry["max_abs_grad_error_small"] = max(c.max_abs_error_small for c in checks)
            worst = max(worst, entry["max_rel_grad_error"])
            ok = ok and all(c.ok for c in checks)
        per_image[img] = entry
    l_img = float(np.mean(img_vals)) if img_vals else 0.0
    l_pt = float(np.mean(pt_vals)) if pt_vals else 0.0
    out = {
        "images": per_image,
        "l_det": args.l_det,
        "l_img": l_img,
        "l_pt": l_pt,
        "total": total_loss(args.l_det, l_img, l_pt, weights),
    }
    if args.check_grads:
        out["max_rel_grad_error"] = worst
        out["grad_check_passed"] = ok
    text = _dump(out)
    if args.out:
        _write_manifest(args.manifest or f"{args.out}.manifest.json", "losses", args.argv,
                        {"lambda1": args.lambda1, "lambda2": args.lambda2, "l_det": args.l_det,
                         "check_grads": args.check_grads}, None, [args.out])
        _write(args.out, text)
    print(text, end="")
    return EXIT_OK if ok else EXIT_CHECK


def _sim_config(args) -> SimConfig:
    cfg = ablation_configs(args.seed)[args.ablation]
    if args.config:
        base = cfg.to_dict()
        over = _read_json(args.config)
        if not isinstance(over, dict):
            raise InputError(f"{args.config}: expected a JSON object")
        for key, val in over.items():
            if isinstance(val, dict) and isinstance(base.get(key), dict):
                base[key].update(val)
            else:
                base[key] = val
        try:
            cfg = SimConfig.from_dict(base)
        except (TypeError, InvalidInputError) as exc:
            raise InputError(f"{args.config}: {exc}") from exc
    return cfg


def _load_dataset(path):
    try:
        return load_coco_json(path)
    except (CocoFormatError, IntegrityError) as exc:
        raise InputError(str(exc)) from exc
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror})") from exc


def _check_fraction(name, v, lo_open=False):
    if not (0.0 < v <= 1.0 if lo_open else 0.0 <= v <= 1.0):
        raise InputError(f"--{name} {v} outside {'(0, 1]' if lo_open else '[0, 1]'}")


def cmd_simulate(args) -> int:
    _check_fraction("full-frac", args.full_frac, lo_open=True)
    _check_fraction("point-frac", args.point_frac)
    if args.iters < 1:
        raise InputError("--iters must be >= 1")
    try:
        split = SplitSpec(args.full_frac, args.point_frac, args.seed, args.point_mode)
    except InvalidInputError as exc:
        raise InputError(str(exc)) from exc
    cfg = _sim_config(args)
    ds = _load_dataset(args.dataset)
    out = Path(args.out)
    outputs = [out / "metrics.csv", out / "metrics.json"]
    _write_manifest(out / "manifest.json", "simulate", args.argv,
                    {"sim": cfg.to_dict(), "split": {"full_fraction": split.full_fraction,
                                                     "point_fraction": split.point_fraction,
                                                     "point_mode": split.point_mode},
                     "iterations": args.iters}, args.seed, outputs)
    try:
        table = run_simulation(ds.samples, split, args.iters, cfg, ds.num_classes)
    except InvalidInputError as exc:
        raise InputError(str(exc)) from exc
    _write(outputs[0], table.to_csv())
    _write(outputs[1], table.to_json())
    final = table.final
    print(f"final pseudo AP50 {final['pseudo_ap50']:.4f}  AP50:95 {final['pseudo_ap50_95']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    except ValueError as exc:
        raise InputError(f"--fractions: {exc}") from exc
    if not fractions:
        raise InputError("--fractions is empty")
    _check_fraction("full-frac", args.full_frac, lo_open=True)
    for f in fractions:
        _check_fraction("fractions", f, lo_open=True)
    if args.iters < 1:
        raise InputError("--iters must be >= 1")
    cfg = _sim_config(args)
    ds = _load_dataset(args.dataset)
    out = Path(args.out)
    outputs = [out / "sweep.csv", out / "sweep.json"]
    _write_manifest(out / "manifest.json", "sweep", args.argv,
                    {"sim": cfg.to_dict(), "fractions": fractions, "full_fraction": args.full_frac,
                     "point_mode": args.point_mode, "iterations": args.iters}, args.seed, outputs)
    try:
        rows = sweep_point_fraction(ds.samples, fractions, args.iters, cfg, args.full_frac, args.seed,
                                    args.point_mode, ds.num_classes)
    except InvalidInputError as exc:
        raise InputError(str(exc)) from exc
    lines = ["fraction,pseudo_ap50,pseudo_recall"]
    lines += [f"{r['fraction']!r},{r['pseudo_ap50']!r},{r['pseudo_recall']!r}" for r in rows]
    _write(outputs[0], "\n".join(lines) + "\n")
    _write(outputs[1], _dump(rows))
    for r in rows:
        print(f"fraction {r['fraction']:.2f}  pseudo AP50 {r['pseudo_ap50']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = _labeled_boxes(args.preds, need_score=True)
    gts = _labeled_boxes(args.gt, need_score=False)
    ids = list(gts) + [i for i in preds if i not in gts]
    p = [preds.get(i, []) for i in ids]
    g = [gts.get(i, []) for i in ids]
    ap = average_precision(p, g)
    out = {
        "ap50": _clean(ap.ap50),
        "ap50_95": _clean(ap.mean),
        "per_threshold": {f"{t:.2f}": _clean(v) for t, v in ap.per_threshold.items()},
    }
    if args.errors:
        rep = error_decomposition(p, g)
        out["errors"] = rep.as_dict()
        out["false_positives"] = rep.false_positives
        if args.errors_csv:
            _write(args.errors_csv, rep.to_csv())
    text = _dump(out)
    if args.out:
        outputs = [args.out] + ([args.errors_csv] if args.errors and args.errors_csv else [])
        _write_manifest(args.manifest or f"{args.out}.manifest.json", "eval", args.argv,
                        {"errors": args.errors}, None, outputs)
        _write(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_synth_points(args) -> int:
    ds = _load_dataset(args.coco)
    _write_manifest(args.manifest or f"{args.out}.manifest.json", "synth-points", args.argv,
                    {"mode": args.mode}, args.seed, [args.out])
    recs = []
    for k, s in enumerate(ds.samples):
        seed = int(np.random.SeedSequence([args.seed, k]).generate_state(1)[0])
        for p in synthesize_points(s.full_boxes, args.mode, seed):
            recs.append({"image_id": s.image_id, "x": p.x, "y": p.y, "label": p.label,
                         "category_id": ds.original_id(p.label)})
    _write(args.out, _dump(recs))
    print(f"{len(recs)} points written to {args.out}")
    return EXIT_OK


def coco_document(samples, num_classes: int) -> dict:
    images, anns = [], []
    for s in samples:
        images.append({"id": s.image_id, "width": s.width, "height": s.height})
        for b in s.ground_truth:
            bb = b.box
            anns.append({"id": len(anns) + 1, "image_id": s.image_id, "category_id": b.label + 1,
                         "bbox": [bb.x1, bb.y1, bb.width, bb.height], "area": bb.area, "iscrowd": 0})
    cats = [{"id": c + 1, "name": f"class{c}"} for c in range(num_classes)]
    return {"images": images, "annotations": anns, "categories": cats}


def cmd_synth_dataset(args) -> int:
    if args.images < 1 or args.classes < 1:
        raise InputError("--images and --classes must be >= 1")
    _write_manifest(args.manifest or f"{args.out}.manifest.json", "synth-dataset", args.argv,
                    {"images": args.images, "classes": args.classes, "zipf": args.zipf, "size": args.size},
                    args.seed, [args.out])
    samples = synthetic_dataset(args.images, args.classes, args.seed, args.size, zipf=args.zipf)
    _write(args.out, _dump(coco_document(samples, args.classes)))
    print(f"{len(samples)} images written to {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    doc = _read_json(args.manifest_path)
    if not isinstance(doc, dict) or not isinstance(doc.get("argv"), list):
        raise InputError(f"{args.manifest_path}: not a run manifest")
    if doc.get("command") == "replay":
        raise InputError(f"{args.manifest_path}: refusing to replay a replay")
    return main(doc["argv"])


# --------------------------------------------------------------- parser ----

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wssod", description="Point-supervised pseudo-labelling toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match points to teacher detections")
    p.add_argument("--annotations", required=True, help="points JSON")
    p.add_argument("--detections", required=True, help="detections JSON")
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("losses", help="evaluate the MIL losses on fixture proposals")
    p.add_argument("--proposals", required=True)
    p.add_argument("--points")
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=0.05)
    p.add_argument("--l-det", type=float, default=0.0, help="detector loss value to fold into the total")
    p.add_argument("--check-grads", action="store_true")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_losses)

    for name, func in (("simulate", cmd_simulate), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help=f"{name} the teacher-student loop")
        p.add_argument("--dataset", required=True, help="COCO JSON")
        p.add_argument("--full-frac", type=float, default=0.01)
        if name == "simulate":
            p.add_argument("--point-frac", type=float, default=0.99)
        else:
            p.add_argument("--fractions", required=True, help="comma-separated point fractions")
        p.add_argument("--iters", type=int, default=100)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--ablation", choices=sorted(ablation_configs(0)), default="full")
        p.add_argument("--point-mode", choices=["random", "center"], default="random")
        p.add_argument("--config", help="JSON overrides for the simulation config")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="AP of predictions against ground truth")
    p.add_argument("--preds", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--errors", action="store_true", help="add the six-way error histogram")
    p.add_argument("--errors-csv")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-points", help="one point per box of a COCO file")
    p.add_argument("--coco", required=True)
    p.add_argument("--mode", choices=["random", "center"], default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_synth_points)

    p = sub.add_parser("synth-dataset", help="write a synthetic COCO file")
    p.add_argument("--images", type=int, default=500)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--zipf", type=float, default=1.5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_synth_dataset)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest_path")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (InputError, InvalidInputError) as exc:
        print(f"wssod {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
