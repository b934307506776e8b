"""Independent reference implementations used only by the tests.

They favour transparency over speed: exhaustive enumeration, explicit
products, no shared helpers with the package.
"""

import itertools
import math

import numpy as np


# ---------------------------------------------------------- assignment ----

def brute_force_assignment(cost):
    """Minimum total cost and the lexicographically smallest optimal pair list."""
    cost = np.asarray(cost, dtype=float)
    n_p, n_b = cost.shape
    if n_p <= n_b:
        cands = [[(i, perm[i]) for i in range(n_p)] for perm in itertools.permutations(range(n_b), n_p)]
    else:
        cands = [sorted((perm[j], j) for j in range(n_b)) for perm in itertools.permutations(range(n_p), n_b)]
    totals = [math.fsum(cost[i, j] for i, j in c) for c in cands]
    best = min(totals)
    lex = min(c for c, t in zip(cands, totals) if t <= best + 1e-12)
    return best, lex


# ------------------------------------------------------------ bag score ----

def _softmax(row):
    e = [math.exp(v - max(row)) for v in row]
    s = sum(e)
    return [v / s for v in e]


def direct_bag_score(s_rows, s_P_rows, label):
    """Exactly-one-positive probability as an explicit sum of products."""
    a = [_softmax(r)[label] for r in s_rows]
    p = [_softmax(r)[1] for r in s_P_rows]
    total = 0.0
    for k in range(len(a)):
        term = a[k] * p[k]
        for m in range(len(a)):
            if m != k:
                term *= 1.0 - p[m]
        total += term
    return total


def enumerated_bag_score(s_rows, s_P_rows, label):
    """Sum over all 0/1 positive patterns with exactly one positive member."""
    a = [_softmax(r)[label] for r in s_rows]
    p = [_softmax(r)[1] for r in s_P_rows]
    total = 0.0
    for z in itertools.product((0, 1), repeat=len(a)):
        if sum(z) != 1:
            continue
        prob = 1.0
        for zk, pk in zip(z, p):
            prob *= pk if zk else 1.0 - pk
        total += prob * a[z.index(1)]
    return total


# ------------------------------------------------------------------- AP ----

def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _tp_at_cutoff(dets, gts, threshold):
    """Greedy matching of an already ranked detection list, from scratch."""
    used = set()
    tps = []
    for img, box in dets:
        best, best_iou = None, threshold
        for gi, (g_img, g_box) in enumerate(gts):
            if g_img != img or gi in used:
                continue
            v = _iou(box, g_box)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = gi, v
        if best is not None:
            used.add(best)
        tps.append(best is not None)
    return tps


def exhaustive_ap(preds, gts, threshold):
    """Class-mean 101-point AP recomputing matching at every cutoff.

    ``preds``/``gts``: per-image lists of ``(box, label, score)`` /
    ``(box, label)`` tuples.
    """
    classes = sorted({lab for img in gts for _, lab in img})
    if not classes:
        return float("nan")
    recall_levels = np.linspace(0.0, 1.0, 101)
    per_class = []
    for c in classes:
        dets = [(score, i, k, box) for i, img in enumerate(preds) for k, (box, lab, score) in enumerate(img) if lab == c]
        dets.sort(key=lambda d: (-d[0], d[1], d[2]))
        ranked = [(i, box) for _, i, _, box in dets]
        g = [(i, box) for i, img in enumerate(gts) for box, lab in img if lab == c]
        n_gt = len(g)
        prec, rec = [], []
        for cut in range(1, len(ranked) + 1):
            tp = sum(_tp_at_cutoff(ranked[:cut], g, threshold))
            prec.append(tp / cut)
            rec.append(tp / n_gt)
        sampled = np.zeros(len(recall_levels))
        for ri, r in enumerate(recall_levels):
            cands = [p for p, q in zip(prec, rec) if q >= r]
            sampled[ri] = max(cands) if cands else 0.0
        per_class.append(float(np.mean(sampled)))
    return float(np.mean(per_class))
