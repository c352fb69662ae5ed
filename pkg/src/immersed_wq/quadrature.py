"""Gauss-Legendre rules and univariate weighted quadrature.

Weighted quadrature (WQ) rules absorb the test function into the weights:
for test function ``B_i`` and every target function ``B*_j`` overlapping
its support,

    sum_k B*_j(x_k) w_{k,i} = integral of B*_j * B_i^{(alpha)}.

Points are a subset of the element-wise Gauss points of order ``p + 1``;
weights are the minimum-norm solution of the exactness system.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Literal

import numpy as np
import scipy.linalg

from .splines import KnotVector, UnivariateBasis, derivative_basis

Purpose = Literal["mass", "stiffness"]

#: interior-element point counts for maximally smooth splines
INTERIOR_POINTS = {"mass": 2, "stiffness": 3}

RANK_TOL = 1e-10


class LayoutInfeasibleError(ValueError):
    """The point layout cannot satisfy the exactness conditions of a test function."""

    def __init__(self, test_index: int, message: str):
        super().__init__(f"test function {test_index}: {message}")
        self.test_index = test_index


@dataclass(frozen=True)
class GaussRule:
    """Gauss-Legendre rule on the reference interval ``[-1, 1]``."""

    order: int
    points: np.ndarray
    weights: np.ndarray

    def mapped(self, a, b) -> tuple[np.ndarray, np.ndarray]:
        """Points and weights on ``[a, b]``; ``a`` and ``b`` may be arrays of elements."""
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
        half = 0.5 * (b - a)
        return a + half * (self.points + 1.0), half * self.weights


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> GaussRule:
    """``n``-point Gauss-Legendre rule, ``1 <= n <= 32``."""
    if not 1 <= n <= 32:
        raise ValueError("Gauss order must be between 1 and 32")
    x, w = np.polynomial.legendre.leggauss(n)
    # exact symmetry about 0
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return GaussRule(n, x, w)


def element_gauss(kv: KnotVector, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss points and weights ``(n_elements, order)`` on every element of ``kv``."""
    el = kv.elements
    return gauss_legendre(order).mapped(el[:, 0], el[:, 1])


@dataclass(frozen=True)
class PointLayout:
    """Weighted-quadrature point locations of a univariate basis.

    ``points`` are sorted; ``element`` and ``local`` give the element and the
    index of the Gauss point (order ``degree + 1``) each point was taken from.
    """

    purpose: str
    degree: int
    points: np.ndarray
    element: np.ndarray
    local: np.ndarray
    element_bounds: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.element, minlength=self.element_bounds.shape[0])

    def __len__(self):
        return self.points.size


def _local_selection(count: int, p: int) -> list[int]:
    if count >= p + 1:
        return list(range(p + 1))
    if count == 1:
        return [p // 2]
    return [0, p // 2, p] if count % 2 == 1 else [0, p]


def wq_point_layout(basis: UnivariateBasis, purpose: Purpose = "stiffness") -> PointLayout:
    """Point layout for weighted quadrature on ``basis``.

    Elements touching a breakpoint of reduced smoothness (including the ends
    of an open knot vector and any ``C^-1`` knot) receive all ``p + 1`` Gauss
    points. Other elements receive the outermost Gauss points plus the one in
    the middle (index ``p // 2``) when an odd count is needed.
    """
    if purpose not in INTERIOR_POINTS:
        raise ValueError(f"unknown purpose {purpose!r}")
    kv = basis.kv
    p = kv.degree
    gp, _ = element_gauss(kv, p + 1)
    bp = kv.breakpoints
    mult = kv.multiplicities
    bounds = kv.elements
    lo_idx = np.searchsorted(bp, bounds[:, 0])
    hi_idx = np.searchsorted(bp, bounds[:, 1])
    reduced = mult > 1
    # domain ends behave like discontinuities unless the knot vector is periodic-like
    reduced[0] = reduced[-1] = True
    pts, elem, loc = [], [], []
    for e in range(bounds.shape[0]):
        full = reduced[lo_idx[e]] or reduced[hi_idx[e]]
        count = p + 1 if full else min(INTERIOR_POINTS[purpose], p + 1)
        for j in _local_selection(count, p):
            pts.append(gp[e, j])
            elem.append(e)
            loc.append(j)
    return PointLayout(
        purpose,
        p,
        np.array(pts),
        np.array(elem, dtype=np.int64),
        np.array(loc, dtype=np.int64),
        bounds,
    )


def target_space(basis: UnivariateBasis, purpose: Purpose = "stiffness") -> UnivariateBasis:
    """Target space of the exactness conditions.

    ``stiffness`` uses ``S^p_{r-1}`` (every interior breakpoint gains one
    multiplicity, capped at ``p + 1``), which contains trial functions and
    their derivatives. ``mass`` uses the trial space ``S^p_r`` itself.
    """
    if purpose == "mass":
        return basis
    kv = basis.kv
    p = kv.degree
    extra = [u for u, m in zip(kv.breakpoints[1:-1], kv.multiplicities[1:-1]) if m < p + 1]
    knots = np.sort(np.concatenate([kv.knots, extra]))
    return UnivariateBasis(KnotVector(knots, p))


@dataclass(frozen=True)
class WeightedRule:
    test_index: int
    alpha: int
    point_indices: np.ndarray
    weights: np.ndarray


@dataclass
class RuleSet:
    """Weighted rules for every function of ``test_basis`` on a common point set.

    ``weights[i, k]`` is the weight of point ``k`` in the rule of test
    function ``i``; it is zero outside the support of the function.
    """

    test_basis: UnivariateBasis
    alpha: int
    points: np.ndarray
    weights: np.ndarray
    target: UnivariateBasis
    purpose: str = "stiffness"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.weights.shape[0]

    def rule(self, i: int) -> WeightedRule:
        lo, hi = self.test_basis.support(i)
        idx = np.nonzero((self.points > lo) & (self.points < hi))[0]
        return WeightedRule(i, self.alpha, idx, self.weights[i, idx])

    def __iter__(self) -> Iterator[WeightedRule]:
        return (self.rule(i) for i in range(len(self)))


def _overlap_integrals(target: UnivariateBasis, test: UnivariateBasis, deriv: int) -> np.ndarray:
    """Dense ``(n_target, n_test)`` matrix of integrals of ``B*_j * B_i^{(deriv)}``."""
    order = (target.degree + test.degree) // 2 + 1
    bp = np.union1d(target.breakpoints, test.breakpoints)
    x, w = gauss_legendre(order).mapped(bp[:-1], bp[1:])
    x, w = x.ravel(), w.ravel()
    return (target.collocation(x) * w) @ test.collocation(x, deriv).T


def _least_norm(A: np.ndarray, b: np.ndarray, test_index: int) -> np.ndarray:
    """Minimum-norm solution of ``A w = b`` via QR of ``A^T``."""
    m, n = A.shape
    if m > n:
        raise LayoutInfeasibleError(test_index, f"{m} exactness conditions but only {n} points")
    if m == 0:
        return np.zeros(n)
    # row equilibration: target functions barely touching the support have
    # tiny collocation rows, which says nothing about the rank
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms == 0.0):
        raise LayoutInfeasibleError(test_index, "a target function vanishes at every point")
    Q, R = np.linalg.qr((A / norms[:, None]).T)
    if np.min(np.abs(np.diag(R))) <= RANK_TOL:
        raise LayoutInfeasibleError(test_index, "rank-deficient exactness system")
    y = scipy.linalg.solve_triangular(R.T, b / norms, lower=True)
    return Q @ y


def solve_wq_weights(
    test_basis: UnivariateBasis,
    layout: PointLayout | np.ndarray,
    target: UnivariateBasis | None = None,
    purpose: Purpose | None = None,
) -> RuleSet:
    """Weights of the ``alpha = 0`` rules of every function of ``test_basis``."""
    points = layout.points if isinstance(layout, PointLayout) else np.asarray(layout, dtype=float)
    if purpose is None:
        purpose = layout.purpose if isinstance(layout, PointLayout) else "stiffness"
    if target is None:
        target = target_space(test_basis, purpose)
    exact = _overlap_integrals(target, test_basis, 0)
    colloc = target.collocation(points) if points.size else np.zeros((target.n, 0))
    t_lo = target.knots[: target.n]
    t_hi = target.knots[target.degree + 1 : target.degree + 1 + target.n]
    W = np.zeros((test_basis.n, points.size))
    for i in range(test_basis.n):
        lo, hi = test_basis.support(i)
        k = np.nonzero((points > lo) & (points < hi))[0]
        j = np.nonzero((np.maximum(lo, t_lo) < np.minimum(hi, t_hi)))[0]
        W[i, k] = _least_norm(colloc[np.ix_(j, k)], exact[j, i], i)
    return RuleSet(test_basis, 0, points, W, target, purpose)


def wq_derivative_rule(test_basis: UnivariateBasis, rules_pm1: RuleSet) -> RuleSet:
    """``alpha = 1`` rules as combinations of the degree ``p - 1`` rules.

    ``Q^(1)_i = a_i Q_{i-1, p-1} - b_i Q_{i, p-1}`` with the coefficients of
    :func:`derivative_basis` (the lower basis lives on ``knots[1:-1]``).
    """
    lower, a, b = derivative_basis(test_basis)
    if rules_pm1.test_basis != lower or rules_pm1.alpha != 0:
        raise ValueError("rules_pm1 must be alpha=0 rules of the derivative basis")
    Wl = rules_pm1.weights
    n = test_basis.n
    W = np.zeros((n, Wl.shape[1]))
    W[1:] += a[1:, None] * Wl[: n - 1]
    W[: n - 1] -= b[: n - 1, None] * Wl
    return RuleSet(test_basis, 1, rules_pm1.points, W, rules_pm1.target, rules_pm1.purpose)


def wq_rules(basis: UnivariateBasis, layout: PointLayout) -> dict[int, RuleSet]:
    """Rules needed for ``layout.purpose``: ``{0}`` for mass, ``{0, 1}`` for stiffness."""
    rules = {0: solve_wq_weights(basis, layout)}
    if layout.purpose == "stiffness" and basis.degree > 0:
        lower, _, _ = derivative_basis(basis)
        low = solve_wq_weights(lower, layout, target=rules[0].target, purpose="stiffness")
        rules[1] = wq_derivative_rule(basis, low)
    return rules


def exactness_report(rules: RuleSet, target: UnivariateBasis | None = None) -> float:
    """Maximum of ``|quadrature - exact| / (1 + |exact|)`` over all test/target pairs."""
    target = target or rules.target
    if len(rules) == 0 or target.n == 0:
        return 0.0
    exact = _overlap_integrals(target, rules.test_basis, rules.alpha)
    quad = target.collocation(rules.points) @ rules.weights.T
    return float(np.max(np.abs(quad - exact) / (1.0 + np.abs(exact))))


def rules_to_json(rules: list[RuleSet]) -> str:
    """Serialize rules sharing one test basis and point set; floats round-trip exactly."""
    first = rules[0]
    doc = {
        "degree": first.test_basis.degree,
        "knots": first.test_basis.knots.tolist(),
        "purpose": first.purpose,
        "points": first.points.tolist(),
        "rules": [
            {
                "test_index": r.test_index,
                "alpha": r.alpha,
                "point_indices": r.point_indices.tolist(),
                "weights": r.weights.tolist(),
            }
            for rs in rules
            for r in rs
        ],
    }
    return json.dumps(doc)


def rules_from_json(text: str) -> list[RuleSet]:
    doc = json.loads(text)
    basis = UnivariateBasis(KnotVector(doc["knots"], doc["degree"]))
    purpose = doc.get("purpose", "stiffness")
    points = np.array(doc["points"], dtype=float)
    target = target_space(basis, purpose)
    out: dict[int, np.ndarray] = {}
    for r in doc["rules"]:
        W = out.setdefault(r["alpha"], np.zeros((basis.n, points.size)))
        W[r["test_index"], np.array(r["point_indices"], dtype=np.int64)] = r["weights"]
    return [RuleSet(basis, a, points, W, target, purpose) for a, W in sorted(out.items())]
