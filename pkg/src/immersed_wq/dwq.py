"""Discontinuous weighted quadrature: rules with artificial ``C^-1`` knots and their placement.

A cut test function has its support split by artificial discontinuities
``gamma`` (existing breakpoints). Weighted rules are built on the refined,
discontinuous basis and mapped back to the smooth functions with the
transposed subdivision matrix, so that each piece of the support between two
``gamma`` values is integrated exactly on its own. Pieces that contain cut
elements are later replaced by element-wise rules.

Two placement strategies pick the ``gamma`` values: per function
(:func:`individual_placement`) or from a global box partition of the mesh
(:func:`global_box_partition` and :func:`classify_functions_global`).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .immersion import ElementClass
from .quadrature import PointLayout, Purpose, RuleSet, target_space, wq_point_layout, wq_rules
from .splines import KnotVector, TensorBasis, UnivariateBasis, insert_discontinuities


class InvalidDiscontinuityError(ValueError):
    """An artificial discontinuity is not an interior breakpoint."""


class FunctionClass(IntEnum):
    EXTERIOR = 0
    INTERIOR = 1
    CUT = 2
    GAUSS = 3


# ---------------------------------------------------------------------------
# univariate rules


@dataclass
class AxisRules:
    """Weighted rules of one axis for a fixed set of artificial discontinuities.

    ``region[k]`` is the index of the sub-interval (between consecutive
    ``gammas``) that contains point ``k``. ``weights[alpha]`` has shape
    ``(basis.n, n_points)``; restricting a row to the points of one region
    yields the rule of that piece of the support.
    """

    basis: UnivariateBasis
    gammas: tuple[float, ...]
    purpose: str
    points: np.ndarray
    region: np.ndarray
    weights: dict[int, np.ndarray]
    subdivision: object = None

    @property
    def n_regions(self) -> int:
        return len(self.gammas) + 1

    def region_bounds(self, r: int) -> tuple[float, float]:
        cuts = (self.basis.domain[0], *self.gammas, self.basis.domain[1])
        return cuts[r], cuts[r + 1]

    def region_points(self, r: int) -> np.ndarray:
        return np.nonzero(self.region == r)[0]

    def restricted(self, alpha: int, regions: Sequence[int]) -> np.ndarray:
        """Weights with every point outside ``regions`` dropped (set to zero)."""
        W = self.weights[alpha].copy()
        W[:, ~np.isin(self.region, regions)] = 0.0
        return W


def _check_gammas(basis: UnivariateBasis, gammas: Sequence[float]) -> tuple[float, ...]:
    bp = basis.breakpoints
    out = []
    for g in sorted(set(float(g) for g in gammas)):
        if not np.any(bp[1:-1] == g):
            raise InvalidDiscontinuityError(f"gamma={g} is not an interior breakpoint")
        out.append(g)
    return tuple(out)


def split_knot_vector(basis: UnivariateBasis, gammas: Sequence[float]) -> list[UnivariateBasis]:
    """Open sub-bases of a basis that is ``C^-1`` at every ``gamma``."""
    k = basis.knots
    cuts = (basis.domain[0], *gammas, basis.domain[1])
    return [
        UnivariateBasis(KnotVector(k[(k >= lo) & (k <= hi)], basis.degree))
        for lo, hi in zip(cuts[:-1], cuts[1:])
    ]


def build_axis_rules(basis: UnivariateBasis, gammas: Sequence[float] = (), purpose: Purpose = "stiffness") -> AxisRules:
    """WQ (no ``gammas``) or DWQ rules for value and, for stiffness, derivative tests.

    The basis is made discontinuous at every ``gamma`` and split into open
    sub-bases. Each sub-basis gets its own WQ layout, so the elements next
    to a ``gamma`` carry all ``p + 1`` Gauss points (the nested points), while
    all other elements keep their WQ points. The refined weights are mapped
    back with ``w = S~^T w~``.
    """
    if not basis.kv.is_open:
        raise ValueError("DWQ rules require an open knot vector")
    gammas = _check_gammas(basis, gammas)
    if not gammas:
        layout = wq_point_layout(basis, purpose)
        rules = wq_rules(basis, layout)
        return AxisRules(
            basis, (), purpose, layout.points, np.zeros(layout.points.size, dtype=np.int64),
            {a: r.weights for a, r in rules.items()},
        )
    refined, S = insert_discontinuities(basis, gammas)
    subs = split_knot_vector(refined, gammas)
    parts = []
    for sub in subs:
        layout = wq_point_layout(sub, purpose)
        parts.append((layout.points, wq_rules(sub, layout)))
    points = np.concatenate([pts for pts, _ in parts])
    region = np.concatenate([np.full(pts.size, b, dtype=np.int64) for b, (pts, _) in enumerate(parts)])
    weights = {}
    for alpha in parts[0][1]:
        Wt = np.zeros((refined.n, points.size))
        row = col = 0
        for pts, rules in parts:
            Wb = rules[alpha].weights
            Wt[row : row + Wb.shape[0], col : col + pts.size] = Wb
            row += Wb.shape[0]
            col += pts.size
        weights[alpha] = np.asarray(S.matrix.T @ Wt)
    return AxisRules(basis, gammas, purpose, points, region, weights, S)


def _as_ruleset(rules: AxisRules, alpha: int) -> RuleSet:
    return RuleSet(
        rules.basis, alpha, rules.points, rules.weights[alpha],
        target_space(rules.basis, rules.purpose), rules.purpose,
        {"gammas": rules.gammas, "region": rules.region},
    )


def build_dwq0(basis: UnivariateBasis, gammas: Sequence[float], layout: PointLayout) -> RuleSet:
    """Value rules (``alpha = 0``) for ``basis`` with artificial discontinuities.

    ``layout`` is the WQ layout of the smooth basis; the returned points
    contain it and add nested Gauss points next to every ``gamma``. The
    point-to-region map is stored in ``meta["region"]``.
    """
    rules = build_axis_rules(basis, gammas, layout.purpose)
    if not np.all(np.isin(layout.points, rules.points)):
        raise ValueError("layout does not belong to this basis")
    return _as_ruleset(rules, 0)


def build_dwq1(basis: UnivariateBasis, gammas: Sequence[float], layout: PointLayout) -> RuleSet:
    """Derivative rules (``alpha = 1``), built per sub-basis and mapped back with ``S~^T``."""
    rules = build_axis_rules(basis, gammas, "stiffness")
    if not np.all(np.isin(layout.points, rules.points)):
        raise ValueError("layout does not belong to this basis")
    return _as_ruleset(rules, 1)


class AxisRuleCache:
    """Memoized :class:`AxisRules` per ``(axis, gammas)``."""

    def __init__(self, basis: TensorBasis, purpose: Purpose = "stiffness"):
        self.basis = basis
        self.purpose = purpose
        self._cache: dict[tuple[int, tuple[float, ...]], AxisRules] = {}

    def __call__(self, axis: int, gammas: Sequence[float] = ()) -> AxisRules:
        key = (axis, tuple(float(g) for g in gammas))
        if key not in self._cache:
            self._cache[key] = build_axis_rules(self.basis.axes[axis], key[1], self.purpose)
        return self._cache[key]

    def __len__(self):
        return len(self._cache)


# ---------------------------------------------------------------------------
# per-function plans


@dataclass
class TestPlan:
    """How the row of one test function is integrated.

    ``gammas[d]`` are element-boundary indices of the artificial
    discontinuities on axis ``d`` and ``gamma_values[d]`` their coordinates.
    ``wq_boxes`` lists the sub-regions (one region id per axis) integrated
    with (D)WQ; ``gauss_elements`` are element multi-indices of the support
    that the function integrates element-wise on its own (individual
    strategy only).
    """

    index: tuple[int, ...]
    cls: FunctionClass
    gammas: tuple[tuple[int, ...], ...] = ()
    gamma_values: tuple[tuple[float, ...], ...] = ()
    wq_boxes: list[tuple[int, ...]] = field(default_factory=list)
    gauss_elements: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))

    @property
    def is_dwq(self) -> bool:
        return any(len(g) for g in self.gammas)


def support_ranges(basis: TensorBasis) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per axis, element index ranges ``[lo[i], hi[i])`` of every function's support."""
    out = []
    for b in basis.axes:
        s = b.kv.spans
        i = np.arange(b.n)
        lo = np.searchsorted(s, i)
        hi = np.searchsorted(s, i + b.degree, side="right")
        out.append((lo, hi))
    return out


def _window_sums(mask: np.ndarray, ranges) -> np.ndarray:
    """Number of true entries of ``mask`` in every support box (function grid)."""
    P = np.pad(_cumsum_all(mask), [(1, 0)] * mask.ndim)
    dim = mask.ndim
    total = 0
    for corner in itertools.product((0, 1), repeat=dim):
        idx = np.ix_(*[ranges[d][1] if c else ranges[d][0] for d, c in enumerate(corner)])
        sign = (-1) ** (dim - sum(corner))
        total = total + sign * P[idx]
    return total


def _cumsum_all(mask: np.ndarray) -> np.ndarray:
    out = mask.astype(np.int64)
    for d in range(mask.ndim):
        out = np.cumsum(out, axis=d)
    return out


def _support_sizes(ranges) -> np.ndarray:
    sizes = [hi - lo for lo, hi in ranges]
    out = sizes[0]
    for s in sizes[1:]:
        out = np.multiply.outer(out, s)
    return out


def classify_functions(basis: TensorBasis, classes: np.ndarray) -> np.ndarray:
    """Exterior/interior/cut class of every function against the level set (function grid)."""
    ranges = support_ranges(basis)
    n_valid = _window_sums(classes != ElementClass.EXTERIOR, ranges)
    n_int = _window_sums(classes == ElementClass.INTERIOR, ranges)
    size = _support_sizes(ranges)
    out = np.full(basis.shape, FunctionClass.CUT, dtype=np.int8)
    out[n_valid == 0] = FunctionClass.EXTERIOR
    out[n_int == size] = FunctionClass.INTERIOR
    return out


def _box_sum(P: np.ndarray, lo, hi) -> int:
    """Sum over ``[lo, hi)`` from the zero-padded prefix-sum array ``P``."""
    total = 0
    dim = len(lo)
    for corner in itertools.product((0, 1), repeat=dim):
        idx = tuple(hi[d] if c else lo[d] for d, c in enumerate(corner))
        total += (-1) ** (dim - sum(corner)) * P[idx]
    return int(total)


def _pieces(length: int, cut: int | None) -> list[tuple[int, int]]:
    return [(0, length)] if cut is None else [(0, cut), (cut, length)]


def individual_placement(basis: TensorBasis, classes: np.ndarray, index: Sequence[int]) -> TestPlan:
    """Pick at most one ``gamma`` per direction maximizing the (D)WQ region of one function.

    Candidates are the interior breakpoints of the support. The (D)WQ region
    is the union of the sub-boxes whose elements are all interior; the other
    interior elements of the support become the function's Gauss elements.
    Ties prefer fewer ``gamma``, then the ``gamma`` closest to the support
    center, then the smaller coordinates.
    """
    index = tuple(int(i) for i in index)
    ranges = support_ranges(basis)
    lo = [int(ranges[d][0][i]) for d, i in enumerate(index)]
    hi = [int(ranges[d][1][i]) for d, i in enumerate(index)]
    sub = classes[tuple(slice(a, b) for a, b in zip(lo, hi))]
    good = sub == ElementClass.INTERIOR
    P = np.pad(_cumsum_all(good), [(1, 0)] * good.ndim)
    L = good.shape
    bps = [ax.kv.breakpoints for ax in basis.axes]
    center = [0.5 * (bps[d][lo[d]] + bps[d][hi[d]]) for d in range(basis.dim)]

    best = None
    for cuts in itertools.product(*[[None, *range(1, n)] for n in L]):
        count = 0
        boxes = []
        for combo in itertools.product(*[enumerate(_pieces(n, c)) for n, c in zip(L, cuts)]):
            blo = [a for _, (a, _) in combo]
            bhi = [b for _, (_, b) in combo]
            vol = int(np.prod([b - a for a, b in zip(blo, bhi)]))
            if _box_sum(P, blo, bhi) == vol:
                count += vol
                boxes.append(tuple(r for r, _ in combo))
        coords = [None if c is None else float(bps[d][lo[d] + c]) for d, c in enumerate(cuts)]
        used = [(d, x) for d, x in enumerate(coords) if x is not None]
        dist = sum(abs(x - center[d]) for d, x in used)
        key = (-count, len(used), dist, tuple(x for _, x in used))
        if best is None or key < best[0]:
            best = (key, cuts, boxes)
    _, cuts, boxes = best
    if not boxes:
        cuts = (None,) * basis.dim
    in_wq = np.zeros(L, dtype=bool)
    for box in boxes:
        sl = tuple(slice(*_pieces(n, c)[r]) for n, c, r in zip(L, cuts, box))
        in_wq[sl] = True
    gauss = np.argwhere(good & ~in_wq) + np.array(lo)
    gam = tuple(() if c is None else (lo[d] + c,) for d, c in enumerate(cuts))
    vals = tuple(tuple(float(bps[d][g]) for g in gam[d]) for d in range(basis.dim))
    return TestPlan(index, FunctionClass.CUT, gam, vals, boxes, gauss)


# ---------------------------------------------------------------------------
# global box partition


@dataclass(frozen=True)
class BoxPartition:
    """Element-aligned partition into boxes of ``h_b`` elements per direction.

    Box boundaries on axis ``d`` sit at element indices ``b`` with
    ``b % h_b == shift[d]`` (plus the mesh ends).
    """

    h_b: int
    shift: tuple[int, ...]
    box_of_element: tuple[np.ndarray, ...]
    admissible: np.ndarray
    wq_mask: np.ndarray
    gauss_mask: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.shift)

    @property
    def n_gauss(self) -> int:
        return int(self.gauss_mask.sum())

    def facet_masks(self) -> list[np.ndarray]:
        """Per axis ``d``, boolean array over element facets normal to ``d`` lying on ``Gamma^disc``.

        Entry ``[..., b, ...]`` (index ``b`` along axis ``d`` in ``0..n_d``)
        is the facet at element boundary ``b``; it belongs to the interface
        when exactly one side lies in an admissible box (outside the mesh
        counts as inadmissible).
        """
        out = []
        for d in range(self.dim):
            pad = [(0, 0)] * self.dim
            pad[d] = (1, 1)
            W = np.pad(self.wq_mask, pad, constant_values=False)
            a = np.take(W, np.arange(W.shape[d] - 1), axis=d)
            b = np.take(W, np.arange(1, W.shape[d]), axis=d)
            out.append(a != b)
        return out

    def boxes(self) -> list[dict]:
        out = []
        for bidx in np.ndindex(*self.admissible.shape):
            rng = []
            for d, b in enumerate(bidx):
                e = np.nonzero(self.box_of_element[d] == b)[0]
                rng.append([int(e[0]), int(e[-1]) + 1])
            out.append({"index": list(bidx), "elements": rng, "admissible": bool(self.admissible[bidx])})
        return out

    def gamma_facets(self, breakpoints: Sequence[np.ndarray] | None = None) -> list[dict]:
        out = []
        for d, F in enumerate(self.facet_masks()):
            for f in np.argwhere(F):
                rec = {"axis": d, "element_facet": [int(v) for v in f]}
                if breakpoints is not None:
                    rec["coordinate"] = float(breakpoints[d][f[d]])
                out.append(rec)
        return out


def _box_ids(n: int, h_b: int, s: int) -> np.ndarray:
    e = np.arange(n)
    return (e - s) // h_b + (1 if s > 0 else 0)


def _partition(classes: np.ndarray, h_b: int, shift: tuple[int, ...]) -> BoxPartition:
    ids = tuple(_box_ids(n, h_b, s) for n, s in zip(classes.shape, shift))
    shape = tuple(int(i[-1]) + 1 for i in ids)
    bad = np.zeros(shape, dtype=np.int64)
    grid = np.ix_(*ids)
    np.add.at(bad, tuple(np.broadcast_arrays(*grid)), (classes != ElementClass.INTERIOR).astype(np.int64))
    admissible = bad == 0
    wq = admissible[grid]
    gauss = (classes == ElementClass.INTERIOR) & ~wq
    return BoxPartition(h_b, shift, ids, admissible, wq, gauss)


def global_box_partition(classes: np.ndarray, h_b: int = 3) -> BoxPartition:
    """Box partition with the fewest Gauss elements over ``(h_b - 1)^dim`` origin shifts.

    Gauss elements are interior elements inside inadmissible boxes. Ties go
    to the lexicographically smallest shift.
    """
    if h_b < 2:
        raise ValueError("box width h_b must be at least 2")
    best = None
    for shift in candidate_shifts(classes.ndim, h_b):
        part = _partition(classes, h_b, shift)
        if best is None or part.n_gauss < best.n_gauss:
            best = part
    return best


def candidate_shifts(dim: int, h_b: int) -> list[tuple[int, ...]]:
    return list(itertools.product(range(h_b - 1), repeat=dim))


def partition_with_shift(classes: np.ndarray, h_b: int, shift: Sequence[int]) -> BoxPartition:
    return _partition(classes, h_b, tuple(int(s) for s in shift))


def classify_functions_global(
    basis: TensorBasis, partition: BoxPartition, classes: np.ndarray
) -> tuple[np.ndarray, dict[tuple[int, ...], TestPlan]]:
    """Function classes against ``Gamma^disc`` and plans of the cut functions.

    A cut function takes as ``gamma`` on axis ``d`` every element boundary
    strictly inside its support that carries a ``Gamma^disc`` facet within
    the support; the resulting sub-boxes are each entirely inside or outside
    the admissible region.
    """
    ranges = support_ranges(basis)
    n_valid = _window_sums(classes != ElementClass.EXTERIOR, ranges)
    n_wq = _window_sums(partition.wq_mask, ranges)
    size = _support_sizes(ranges)
    cls = np.full(basis.shape, FunctionClass.CUT, dtype=np.int8)
    cls[n_wq == 0] = FunctionClass.GAUSS
    cls[n_wq == size] = FunctionClass.INTERIOR
    cls[n_valid == 0] = FunctionClass.EXTERIOR

    facets = partition.facet_masks()
    bps = [ax.kv.breakpoints for ax in basis.axes]
    plans = {}
    for index in map(tuple, np.argwhere(cls == FunctionClass.CUT)):
        lo = [int(ranges[d][0][i]) for d, i in enumerate(index)]
        hi = [int(ranges[d][1][i]) for d, i in enumerate(index)]
        gam = []
        for d, F in enumerate(facets):
            sl = [slice(a, b) for a, b in zip(lo, hi)]
            sl[d] = slice(lo[d] + 1, hi[d])
            hit = np.any(F[tuple(sl)], axis=tuple(a for a in range(basis.dim) if a != d))
            gam.append(tuple(int(lo[d] + 1 + b) for b in np.nonzero(hit)[0]))
        edges = [[lo[d], *gam[d], hi[d]] for d in range(basis.dim)]
        boxes = []
        for box in itertools.product(*[range(len(e) - 1) for e in edges]):
            sl = tuple(slice(edges[d][r], edges[d][r + 1]) for d, r in enumerate(box))
            inside = partition.wq_mask[sl]
            if inside.all():
                boxes.append(box)
            elif inside.any():
                raise AssertionError(f"sub-box {box} of function {index} straddles Gamma^disc")
        vals = tuple(tuple(float(bps[d][g]) for g in gam[d]) for d in range(basis.dim))
        plans[index] = TestPlan(index, FunctionClass.CUT, tuple(gam), vals, boxes)
    return cls, plans


def box_point_bound(p: int | Sequence[int], nq_interior: int, h_b: int, dim: int) -> int:
    """``prod(p_d + 1) * 2 + prod(n_q^i) * (h_b - 2)`` as stated for equal admissible boxes.

    This is the published per-box bound. It is not an upper bound on the
    tensor-product point count of a box for ``dim >= 2``; see
    :func:`box_point_count` for the actual count.
    """
    if h_b < 2:
        raise ValueError("box width h_b must be at least 2")
    ps = [p] * dim if np.ndim(p) == 0 else list(p)
    return int(np.prod([q + 1 for q in ps]) * 2 + nq_interior**dim * (h_b - 2))


def box_point_count(p: int | Sequence[int], nq_interior: int, h_b: int, dim: int) -> int:
    """Largest number of (D)WQ points in one admissible box.

    Per axis the two boundary elements of a box may carry ``p + 1`` nested
    points and the ``h_b - 2`` inner ones ``n_q^i`` points.
    """
    if h_b < 2:
        raise ValueError("box width h_b must be at least 2")
    ps = [p] * dim if np.ndim(p) == 0 else list(p)
    return int(np.prod([2 * (q + 1) + nq_interior * (h_b - 2) for q in ps]))


# ---------------------------------------------------------------------------
# diagnostics


def class_counts(function_classes: np.ndarray) -> dict[str, int]:
    return {c.name.lower(): int(np.count_nonzero(function_classes == c)) for c in FunctionClass}


def diagnostics_json(
    basis: TensorBasis,
    partition: BoxPartition | None,
    function_classes: np.ndarray,
    counts: dict[str, int],
) -> str:
    """JSON dump of boxes, interface facets, function classes and region counts."""
    bps = [ax.kv.breakpoints for ax in basis.axes]
    doc = {
        "boxes": partition.boxes() if partition is not None else [],
        "admissible": partition.admissible.astype(int).tolist() if partition is not None else [],
        "gamma_facets": partition.gamma_facets(bps) if partition is not None else [],
        "function_classes": {
            "codes": {c.name.lower(): int(c) for c in FunctionClass},
            "values": function_classes.ravel(order="F").astype(int).tolist(),
            "counts": class_counts(function_classes),
        },
        "counts": counts,
    }
    return json.dumps(doc)
