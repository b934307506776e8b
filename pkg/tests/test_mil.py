import math

import numpy as np
import pytest

from oracles import direct_bag_score, enumerated_bag_score
from wssod.core import InvalidInputError, PointAnnotation, ProposalSet
from wssod.gradcheck import check_image_mil, check_point_mil
from wssod.mil import (
    Bag,
    EmptyBagError,
    LossWeights,
    build_bags,
    derive_image_labels,
    image_mil_loss,
    image_score,
    point_bag_log_score,
    point_bag_score,
    point_mil_loss,
    total_loss,
)


def zero_logits(n_b, n_cls):
    return ProposalSet(np.tile([0, 0, 1, 1], (n_b, 1)), np.zeros((n_b, n_cls + 1)), np.zeros((n_b, n_cls)),
                       np.zeros((n_b, 2)), np.zeros(n_b, dtype=int))


def random_instance(rng, n_b, n_cls, n_pts):
    xy = rng.uniform(0, 20, size=(n_b, 2))
    wh = rng.uniform(4, 15, size=(n_b, 2))
    p = ProposalSet(np.column_stack([xy, xy + wh]), rng.normal(size=(n_b, n_cls + 1)) * 2,
                    rng.normal(size=(n_b, n_cls)) * 2, rng.normal(size=(n_b, 2)) * 2,
                    rng.integers(0, n_cls, size=n_b))
    pts = [PointAnnotation(*rng.uniform(5, 25, size=2), int(rng.integers(n_cls))) for _ in range(n_pts)]
    return p, pts


def test_derive_image_labels():
    pts = [PointAnnotation(0, 0, 2), PointAnnotation(0, 0, 5)]
    assert derive_image_labels(pts, 7).tolist() == [0, 0, 1, 0, 0, 1, 0]
    assert derive_image_labels([], 3).tolist() == [0, 0, 0]
    assert derive_image_labels([PointAnnotation(0, 0, 1)] * 2, 2).tolist() == [0, 1]


def test_image_score_closed_forms():
    assert image_score(zero_logits(1, 1)).tolist() == [0.5]
    assert image_score(zero_logits(2, 1))[0] == pytest.approx(0.5, abs=1e-15)


def test_image_score_needs_proposals():
    with pytest.raises(InvalidInputError):
        image_score(zero_logits(0, 2))


def test_image_mil_value_ln2():
    res = image_mil_loss(zero_logits(1, 1), [1.0])
    assert res.value == pytest.approx(math.log(2), abs=1e-15)
    assert not res.grad_s_P.any()


def test_image_mil_vanishes_when_negative_and_scores_vanish():
    p = zero_logits(3, 2)
    s = np.full((3, 3), -30.0)
    s[:, 2] = 30.0
    res = image_mil_loss(ProposalSet(p.boxes, s, p.s_I, p.s_P, p.labels), [0, 0])
    assert res.value < 1e-11  # probabilities are clamped at 1e-12


def test_image_scores_strictly_inside_unit_interval(rng):
    for _ in range(200):
        p, _ = random_instance(rng, int(rng.integers(1, 10)), int(rng.integers(1, 5)), 1)
        phi = image_score(p)
        assert np.all((phi > 0) & (phi < 1))


def test_image_mil_gradients(rng):
    for _ in range(20):
        n_cls = int(rng.integers(1, 5))
        p, pts = random_instance(rng, int(rng.integers(1, 8)), n_cls, 3)
        res = image_mil_loss(p, derive_image_labels(pts, n_cls))
        checks = check_image_mil(p, derive_image_labels(pts, n_cls), res)
        assert all(c.ok for c in checks), [(c.name, c.max_rel_error) for c in checks]


def test_build_bags_membership():
    boxes = np.array([[0, 0, 4, 4], [1, 1, 5, 5], [0, 0, 10, 10]], dtype=float)
    bags = build_bags([PointAnnotation(2, 2, 1)], boxes, [1, 0, 1])
    assert bags == [Bag(0, (0, 2))]
    assert build_bags([PointAnnotation(50, 50, 1)], boxes, [1, 0, 1]) == [Bag(0, ())]


def test_empty_bag_score_raises():
    with pytest.raises(EmptyBagError):
        point_bag_score(Bag(0, ()), zero_logits(1, 1), 0)


def test_bag_score_single_member():
    # one member: score = class prob times objectness
    p = zero_logits(1, 1)
    assert point_bag_score(Bag(0, (0,)), p, 0) == pytest.approx(0.25, abs=1e-15)


def test_bag_score_against_oracles(rng):
    for _ in range(300):
        n_cls = int(rng.integers(1, 4))
        n_b = int(rng.integers(1, 9))
        p, _ = random_instance(rng, n_b, n_cls, 1)
        members = tuple(sorted(rng.choice(n_b, size=int(rng.integers(1, n_b + 1)), replace=False).tolist()))
        label = int(rng.integers(n_cls))
        rows = [p.s[j].tolist() for j in members]
        prow = [p.s_P[j].tolist() for j in members]
        score = point_bag_score(Bag(0, members), p, label)
        assert score == pytest.approx(direct_bag_score(rows, prow, label), rel=1e-9)
        assert abs(score - enumerated_bag_score(rows, prow, label)) <= 1e-12
        assert 0 < score < 1


def test_bag_log_score_survives_extreme_logits():
    n = 60
    s = np.zeros((n, 2))
    s_P = np.tile([0.0, 40.0], (n, 1))  # every member nearly certain, so "exactly one" is tiny
    p = ProposalSet(np.tile([0, 0, 1, 1], (n, 1)), s, np.zeros((n, 1)), s_P, np.zeros(n, dtype=int))
    log_score = point_bag_log_score(Bag(0, tuple(range(n))), p, 0)
    assert math.isfinite(log_score) and log_score < -2000


def test_point_mil_gradients_and_detached_s(rng):
    for _ in range(20):
        p, pts = random_instance(rng, int(rng.integers(2, 10)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        bags = build_bags(pts, p.boxes, p.labels)
        res = point_mil_loss(bags, p, pts)
        assert not res.grad_s.any() and not res.grad_s_I.any()
        if any(len(b) for b in bags):
            assert all(c.ok for c in check_point_mil(p, bags, pts, res))


def test_point_mil_skips_empty_bags():
    p = zero_logits(1, 1)
    pts = [PointAnnotation(0.5, 0.5, 0), PointAnnotation(9, 9, 0)]
    bags = build_bags(pts, p.boxes, p.labels)
    res = point_mil_loss(bags, p, pts)
    assert res.value == pytest.approx(-math.log(0.25))
    assert point_mil_loss([Bag(0, ())], p, pts[:1]).value == 0.0


def test_total_loss_weights():
    assert total_loss(1.5, 2.0, 4.0, LossWeights(0.0, 0.0)) == 1.5
    assert total_loss(1.0, 2.0, 4.0, LossWeights(1.0, 0.05)) == pytest.approx(3.2)
    with pytest.raises(InvalidInputError):
        LossWeights(-1.0, 0.0)
