"""Central finite-difference checks for the MIL loss gradients.

A plain ``(f(x + h) - f(x - h)) / 2h`` in float64 loses about ten digits to
cancellation in the numerator at ``h = 1e-6``, which is more than a 1e-6
relative check on small gradient entries can absorb. :class:`Delta` carries
each intermediate as ``(value at x - h, value at x + h minus value at x - h)``
and propagates the difference with cancellation-free rules (``expm1``,
``log1p``, product rule on the exact increments). The result is the same
central difference, evaluated to near full precision.

The loss formulas here are written directly from their definitions (the bag
score as an explicit sum of products, no log-space tricks) and share no code
with :mod:`wssod.mil`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import PointAnnotation, ProposalSet, softmax_rows
from .mil import Bag, LossValueWithGrads

STEP = 1e-6
REL_TOL = 1e-6
ABS_TOL = 1e-9
SMALL_GRAD = 1e-8


class Delta:
    """Array pair ``(lo, d)``: value at ``x - h`` and the increment to ``x + h``."""

    __array_ufunc__ = None

    def __init__(self, lo, d=None):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.d = np.zeros_like(self.lo) if d is None else np.asarray(d, dtype=np.float64)

    @staticmethod
    def wrap(x) -> "Delta":
        return x if isinstance(x, Delta) else Delta(x)

    @property
    def hi(self):
        return self.lo + self.d

    def __add__(self, other):
        o = Delta.wrap(other)
        return Delta(self.lo + o.lo, self.d + o.d)

    __radd__ = __add__

    def __neg__(self):
        return Delta(-self.lo, -self.d)

    def __sub__(self, other):
        return self + (-Delta.wrap(other))

    def __rsub__(self, other):
        return Delta.wrap(other) - self

    def __mul__(self, other):
        o = Delta.wrap(other)
        return Delta(self.lo * o.lo, self.d * o.lo + self.hi * o.d)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = Delta.wrap(other)
        return Delta(self.lo / o.lo, (self.d * o.lo - self.lo * o.d) / (o.lo * o.hi))

    def __getitem__(self, key):
        return Delta(self.lo[key], self.d[key])

    def sum(self, axis=None, keepdims=False):
        return Delta(self.lo.sum(axis=axis, keepdims=keepdims), self.d.sum(axis=axis, keepdims=keepdims))

    def prod(self):
        out = Delta(1.0)
        for k in range(self.lo.shape[0]):
            out = out * self[k]
        return out


def d_exp(x: Delta) -> Delta:
    e = np.exp(x.lo)
    return Delta(e, e * np.expm1(x.d))


def d_log(x: Delta) -> Delta:
    return Delta(np.log(x.lo), np.log1p(x.d / x.lo))


def d_log1m(x: Delta) -> Delta:
    """log(1 - x)"""
    return Delta(np.log1p(-x.lo), np.log1p(-x.d / (1.0 - x.lo)))


def d_softmax(x: Delta, axis: int) -> Delta:
    # the same shift on both sides leaves the softmax unchanged
    shift = x.lo.max(axis=axis, keepdims=True)
    e = d_exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def central_difference(fn: Callable[[Delta], Delta], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central difference of scalar ``fn`` w.r.t. every entry of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        lo = x.copy()
        hi = x.copy()
        lo[idx] -= h
        hi[idx] += h
        d = np.zeros_like(x)
        d[idx] = hi[idx] - lo[idx]
        out[idx] = float(fn(Delta(lo, d)).d) / d[idx]
    return out


def plain_central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Textbook two-evaluation central difference (for reference)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        lo = x.copy()
        hi = x.copy()
        lo[idx] -= h
        hi[idx] += h
        out[idx] = (fn(hi) - fn(lo)) / (hi[idx] - lo[idx])
    return out


# -------------------------------------------------------- loss formulas ----

def image_mil_formula(s, s_I, labels) -> Delta:
    s = Delta.wrap(s)
    s_I = Delta.wrap(s_I)
    n_cls = s_I.lo.shape[1]
    cls = d_softmax(s, axis=1)[:, :n_cls]
    sel = d_softmax(s_I, axis=0)
    phi = (cls * sel).sum(axis=0)
    labels = np.asarray(labels, dtype=np.float64)
    return -(labels * d_log(phi) + (1.0 - labels) * d_log1m(phi)).sum()


def point_mil_formula(s_P, s_const: np.ndarray, bags: Sequence[Bag], points: Sequence[PointAnnotation]) -> Delta:
    """Mean over non-empty bags of -log(sum_k a_k p_k prod_{m != k} (1 - p_m)).

    ``s_const`` enters as plain data: the classification factor ``a_k`` is a
    constant of this function.
    """
    s_P = Delta.wrap(s_P)
    cls = softmax_rows(s_const)
    obj = d_softmax(s_P, axis=1)
    live = [b for b in bags if len(b)]
    total = Delta(0.0)
    for bag in live:
        label = points[bag.point_index].label
        score = Delta(0.0)
        for k in bag.members:
            term = obj[k, 1] * cls[k, label]
            for m in bag.members:
                if m != k:
                    term = term * obj[m, 0]
            score = score + term
        total = total - d_log(score)
    return total / max(len(live), 1)


# --------------------------------------------------------------- checks ----

@dataclass(frozen=True)
class GradCheck:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def max_rel_error(self) -> float:
        a = self.analytic
        big = np.abs(a) > SMALL_GRAD
        if not big.any():
            return 0.0
        return float(np.max(np.abs(a[big] - self.numeric[big]) / np.abs(a[big])))

    @property
    def max_abs_error_small(self) -> float:
        small = np.abs(self.analytic) <= SMALL_GRAD
        if not small.any():
            return 0.0
        return float(np.max(np.abs(self.analytic[small] - self.numeric[small])))

    @property
    def ok(self) -> bool:
        return self.max_rel_error < REL_TOL and self.max_abs_error_small < ABS_TOL


def check_image_mil(p: ProposalSet, labels, result: LossValueWithGrads, h: float = STEP) -> list[GradCheck]:
    s = np.array(p.s)
    s_I = np.array(p.s_I)
    num_s = central_difference(lambda x: image_mil_formula(x, s_I, labels), s, h)
    num_I = central_difference(lambda x: image_mil_formula(s, x, labels), s_I, h)
    return [GradCheck("image_mil/s", result.grad_s, num_s), GradCheck("image_mil/s_I", result.grad_s_I, num_I)]


def check_point_mil(p: ProposalSet, bags, points, result: LossValueWithGrads, h: float = STEP) -> list[GradCheck]:
    s = np.array(p.s)
    num_P = central_difference(lambda x: point_mil_formula(x, s, bags, points), np.array(p.s_P), h)
    # with s frozen as data the function has no dependence on it
    return [
        GradCheck("point_mil/s_P", result.grad_s_P, num_P),
        GradCheck("point_mil/s", result.grad_s, np.zeros_like(s)),
    ]
