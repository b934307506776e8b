import math

import numpy as np
import pytest

from oracles import brute_force_assignment
from wssod.core import InvalidInputError, PointAnnotation, ProposalSet
from wssod.matching import (
    MatchConfig,
    MatchResult,
    build_cost_matrix,
    generate_pseudo_labels,
    hungarian_assign,
    teacher_labels,
    threshold_pseudo_labels,
    unmatched_fraction,
)


def _logit(p):
    return math.log(p / (1 - p))


def single_proposal(box, cls_prob, obj_prob, label=0, num_classes=1):
    """One proposal whose own-label probability and objectness are set exactly."""
    s = np.full((1, num_classes + 1), -np.inf)
    s[0, label] = 0.0
    s[0, num_classes] = -_logit(cls_prob)
    s = np.where(np.isinf(s), -745.0, s)
    s_P = np.array([[0.0, _logit(obj_prob)]]) if obj_prob < 1 else np.array([[-800.0, 0.0]])
    return ProposalSet([box], s, np.zeros((1, num_classes)), s_P, [label])


def random_proposals(rng, n, num_classes, extent=40.0):
    xy = rng.uniform(0, extent, size=(n, 2))
    wh = rng.uniform(2, extent / 2, size=(n, 2))
    boxes = np.column_stack([xy, xy + wh])
    return ProposalSet(
        boxes,
        rng.normal(size=(n, num_classes + 1)) * 2,
        rng.normal(size=(n, num_classes)),
        rng.normal(size=(n, 2)) * 2,
        rng.integers(0, num_classes, size=n),
    )


# ------------------------------------------------------------- cost matrix ----

def test_cost_inside_same_label():
    p = single_proposal((0, 0, 4, 4), 0.8, 1.0)
    c = build_cost_matrix([PointAnnotation(2, 2, 0)], p, [0])
    assert c[0, 0] == pytest.approx(0.2, abs=1e-12)


def test_cost_point_outside_every_box():
    p = single_proposal((0, 0, 4, 4), 0.8, 1.0)
    c = build_cost_matrix([PointAnnotation(9, 9, 0)], p, [0])
    assert c[0, 0] == pytest.approx(1.2, abs=1e-12)
    assert c[0, 0] - 1.0 == pytest.approx(0.2, abs=1e-12)


def test_cost_label_mismatch_with_certain_scores():
    # point label 1, box labelled 0 but the point's class column is certain
    s = np.array([[-800.0, 0.0, -800.0]])
    p = ProposalSet([(0, 0, 4, 4)], s, np.zeros((1, 2)), np.array([[-800.0, 0.0]]), [0])
    c = build_cost_matrix([PointAnnotation(2, 2, 1)], p, [0])
    assert c[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_cost_dimension_mismatch():
    p = single_proposal((0, 0, 4, 4), 0.8, 0.9)
    with pytest.raises(InvalidInputError):
        build_cost_matrix([PointAnnotation(2, 2, 0)], p, [0, 0])


def test_cost_entries_in_range(rng):
    for _ in range(50):
        p = random_proposals(rng, 6, 3)
        pts = [PointAnnotation(*rng.uniform(0, 40, 2), int(rng.integers(3))) for _ in range(4)]
        c = build_cost_matrix(pts, p, p.labels)
        assert np.all((c >= 0) & (c <= 2))
        cls_term = c - np.floor(c)
        assert np.all((cls_term > 0) & (cls_term < 1))


def test_cost_invariant_to_objectness_shift(rng):
    p = random_proposals(rng, 5, 3)
    pts = [PointAnnotation(*rng.uniform(0, 40, 2), int(rng.integers(3))) for _ in range(3)]
    shifted = ProposalSet(p.boxes, p.s, p.s_I, p.s_P + rng.normal(size=(5, 1)) * 50, p.labels)
    np.testing.assert_allclose(build_cost_matrix(pts, p, p.labels), build_cost_matrix(pts, shifted, p.labels),
                               atol=1e-12)


# -------------------------------------------------------------- hungarian ----

def test_hungarian_small_examples():
    assert hungarian_assign([[0.1, 0.9], [0.8, 0.2]]) == [(0, 0), (1, 1)]
    assert hungarian_assign([[3.0]]) == [(0, 0)]
    assert hungarian_assign([[0.5, 0.5], [0.5, 0.5]]) == [(0, 0), (1, 1)]


def test_hungarian_empty():
    assert hungarian_assign(np.zeros((0, 3))) == []
    assert hungarian_assign(np.zeros((2, 0))) == []


def test_hungarian_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        hungarian_assign([[0.0, np.nan]])


@pytest.mark.parametrize("shape", [(3, 5), (5, 3), (4, 4), (1, 6), (6, 1)])
def test_hungarian_matches_brute_force(rng, shape):
    for _ in range(40):
        cost = rng.uniform(0, 2, size=shape)
        pairs = hungarian_assign(cost)
        best, lex = brute_force_assignment(cost)
        assert len(pairs) == min(shape)
        assert math.fsum(cost[i, j] for i, j in pairs) == pytest.approx(best, abs=1e-12)
        assert pairs == lex


def test_hungarian_lexicographic_ties(rng):
    # integer costs force many optimal assignments
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=2))
        cost = rng.integers(0, 3, size=shape).astype(float)
        _, lex = brute_force_assignment(cost)
        assert hungarian_assign(cost) == lex


# ---------------------------------------------------------- pseudo labels ----

def test_pseudo_label_single_match():
    p = single_proposal((0, 0, 4, 4), 0.9, 0.9)
    res = generate_pseudo_labels([PointAnnotation(1, 1, 0)], p)
    assert len(res.pseudo_boxes) == 1 and res.unmatched_points == ()
    b = res.pseudo_boxes[0]
    assert (b.box.x1, b.box.y1, b.box.x2, b.box.y2) == (0, 0, 4, 4)
    assert b.label == 0 and b.score == pytest.approx(0.9)


def test_pseudo_label_class_mismatch_unmatched():
    p = single_proposal((0, 0, 4, 4), 0.9, 0.9, label=1, num_classes=2)
    res = generate_pseudo_labels([PointAnnotation(1, 1, 0)], p)
    assert res.pseudo_boxes == () and res.unmatched_points == (0,)


def test_tau_filters_before_matching():
    p = single_proposal((0, 0, 4, 4), 0.3, 0.9)
    assert len(generate_pseudo_labels([PointAnnotation(1, 1, 0)], p, MatchConfig(tau=0.2)).pseudo_boxes) == 1
    assert len(generate_pseudo_labels([PointAnnotation(1, 1, 0)], p, MatchConfig(tau=1.0)).pseudo_boxes) == 0


def test_pseudo_labels_accounting_and_monotone_in_tau(rng):
    for _ in range(60):
        p = random_proposals(rng, int(rng.integers(1, 9)), 3)
        pts = [PointAnnotation(*rng.uniform(0, 40, 2), int(rng.integers(3))) for _ in range(int(rng.integers(1, 6)))]
        prev = None
        for tau in (0.0, 0.05, 0.2, 0.5, 0.9):
            res = generate_pseudo_labels(pts, p, MatchConfig(tau=tau))
            assert len(res.pseudo_boxes) + len(res.unmatched_points) == len(pts)
            used = [j for _, j, _ in res.pairs]
            assert len(used) == len(set(used))
            if prev is not None:
                assert len(res.pseudo_boxes) <= prev
            prev = len(res.pseudo_boxes)


def test_unmatched_fraction_examples():
    assert unmatched_fraction(MatchResult(unmatched_points=()), 10) == 0.0
    assert unmatched_fraction(MatchResult(unmatched_points=tuple(range(10))), 10) == 1.0
    assert unmatched_fraction(MatchResult(unmatched_points=(1, 2, 3)), 50) == 0.06
    with pytest.raises(InvalidInputError):
        unmatched_fraction(MatchResult(), 0)


def test_constructed_scene_unmatched_count():
    # 50 points; 3 of them sit where only a wrong-class box exists
    boxes, labels, pts = [], [], []
    for k in range(50):
        x = 10.0 * k
        boxes.append((x, 0, x + 8, 8))
        wrong = k in (4, 17, 33)
        labels.append(1 if wrong else 0)
        pts.append(PointAnnotation(x + 4, 4, 0))
    n = len(boxes)
    s = np.zeros((n, 3))
    s[np.arange(n), labels] = 5.0
    p = ProposalSet(boxes, s, np.zeros((n, 2)), np.tile([0.0, 3.0], (n, 1)), labels)
    res = generate_pseudo_labels(pts, p)
    assert res.unmatched_points == (4, 17, 33)
    assert unmatched_fraction(res, 50) == 0.06


def test_teacher_labels_ignore_background_column():
    s = np.array([[0.0, 1.0, 9.0]])
    p = ProposalSet([(0, 0, 1, 1)], s, np.zeros((1, 2)), np.zeros((1, 2)))
    labels, conf = teacher_labels(p)
    assert labels.tolist() == [1]
    e = np.exp(s[0] - 9.0)
    assert conf[0] == pytest.approx(e[1] / e.sum())
    res = generate_pseudo_labels([PointAnnotation(0.5, 0.5, 1)], p, MatchConfig(tau=0.0))
    assert len(res.pseudo_boxes) == 1


def test_threshold_baseline():
    s = np.array([[3.0, 0.0], [0.0, 3.0]])
    p = ProposalSet([(0, 0, 1, 1), (2, 2, 3, 3)], s, np.zeros((2, 1)), np.zeros((2, 2)), [0, 0])
    out = threshold_pseudo_labels(p, 0.7)
    assert len(out) == 1 and out[0].box.x1 == 0
