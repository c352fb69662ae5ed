"""Univariate and tensor-product B-spline spaces.

Evaluation follows the Cox-de Boor recursion (vectorized over points),
derivatives use the lower-degree combination rule, and knot insertion
produces the sparse subdivision matrix mapping coarse to refined
coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class DomainError(ValueError):
    """Raised when a parametric coordinate lies outside the knot-vector domain."""


class UnsupportedDegreeError(ValueError):
    """Raised when an operation is undefined for the given degree."""


def _safe_div(num, den):
    """Elementwise ``num / den`` with the B-spline convention ``x / 0 := 0``."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


class KnotVector:
    """Non-decreasing knot sequence together with a degree.

    Knots are compared exactly as stored; meshes are expected to emit all
    knots from one shared construction.
    """

    def __init__(self, knots: Sequence[float], degree: int):
        knots = np.array(knots, dtype=float)
        if knots.ndim != 1:
            raise ValueError("knots must be one-dimensional")
        if degree < 0:
            raise ValueError("degree must be non-negative")
        if knots.size < degree + 2:
            raise ValueError("need at least degree + 2 knots")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be non-decreasing")
        knots.setflags(write=False)
        self.knots = knots
        self.degree = int(degree)
        _, counts = np.unique(knots, return_counts=True)
        if np.any(counts[1:-1] > degree + 1):
            raise ValueError("interior knot multiplicity exceeds degree + 1")
        if self.domain[0] == self.domain[1]:
            raise ValueError("knot vector has an empty domain")

    def __repr__(self):
        return f"KnotVector(degree={self.degree}, knots={self.knots.tolist()})"

    def __eq__(self, other):
        return (
            isinstance(other, KnotVector)
            and self.degree == other.degree
            and np.array_equal(self.knots, other.knots)
        )

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        p = self.degree
        return float(self.knots[p]), float(self.knots[-p - 1])

    @cached_property
    def breakpoints(self) -> np.ndarray:
        a, b = self.domain
        u = np.unique(self.knots)
        return u[(u >= a) & (u <= b)]

    @cached_property
    def multiplicities(self) -> np.ndarray:
        return np.array([np.count_nonzero(self.knots == u) for u in self.breakpoints])

    @property
    def regularities(self) -> np.ndarray:
        return self.degree - self.multiplicities

    @property
    def is_open(self) -> bool:
        p = self.degree
        k = self.knots
        return bool(np.all(k[: p + 1] == k[0]) and np.all(k[-p - 1 :] == k[-1]))

    @cached_property
    def spans(self) -> np.ndarray:
        """Indices ``s`` of the nonempty knot spans ``[knots[s], knots[s+1])`` inside the domain."""
        p = self.degree
        s = np.arange(p, self.knots.size - p - 1)
        return s[self.knots[s] < self.knots[s + 1]]

    @property
    def n_elements(self) -> int:
        return self.spans.size

    @property
    def elements(self) -> np.ndarray:
        """``(n_elements, 2)`` array of element bounds."""
        s = self.spans
        return np.stack([self.knots[s], self.knots[s + 1]], axis=1)

    def find_span(self, u):
        """Span index ``s`` with ``knots[s] <= u < knots[s+1]``.

        The right end of the domain is assigned to the last nonempty span.
        Accepts scalars or arrays.
        """
        u_arr = np.asarray(u, dtype=float)
        a, b = self.domain
        if np.any(u_arr < a) or np.any(u_arr > b) or np.any(np.isnan(u_arr)):
            raise DomainError(f"parameter outside the domain [{a}, {b}]")
        s = np.searchsorted(self.knots, u_arr, side="right") - 1
        s = np.clip(s, self.degree, self.spans[-1])
        if np.ndim(u) == 0:
            return int(s)
        return s

    def greville(self) -> np.ndarray:
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        k = self.knots
        return np.array([k[i + 1 : i + p + 1].mean() for i in range(self.n)])

    def support(self, i: int) -> tuple[float, float]:
        return float(self.knots[i]), float(self.knots[i + self.degree + 1])

    def element_of(self, span: int) -> int:
        return int(np.searchsorted(self.spans, span))

    def supported_elements(self, i: int) -> np.ndarray:
        """Element indices inside the support of function ``i``."""
        p = self.degree
        s = self.spans
        return np.nonzero((s >= i) & (s <= i + p))[0]


def open_uniform(n_elements: int, degree: int, a: float = 0.0, b: float = 1.0) -> KnotVector:
    """Open, maximally smooth, uniform knot vector on ``[a, b]``."""
    if n_elements < 1:
        raise ValueError("need at least one element")
    inner = np.linspace(a, b, n_elements + 1)
    knots = np.concatenate([[a] * degree, inner, [b] * degree])
    return KnotVector(knots, degree)


def _basis_ders(knots: np.ndarray, p: int, span: np.ndarray, u: np.ndarray, nd: int) -> np.ndarray:
    """Vectorized Cox-de Boor with derivatives.

    Returns ``(len(u), nd + 1, p + 1)`` values of the active functions
    ``span - p .. span``.
    """
    m = u.size
    ndu = np.zeros((m, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((m, p + 1))
    right = np.zeros((m, p + 1))
    for j in range(1, p + 1):
        left[:, j] = u - knots[span + 1 - j]
        right[:, j] = knots[span + j] - u
        saved = np.zeros(m)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = ndu[:, r, j - 1] / ndu[:, j, r]
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved

    ders = np.zeros((m, nd + 1, p + 1))
    ders[:, 0, :] = ndu[:, :, p]
    if nd == 0:
        return ders
    a = np.zeros((m, 2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:] = 0.0
        a[:, 0, 0] = 1.0
        for k in range(1, nd + 1):
            d = np.zeros(m)
            rk, pk = r - k, p - k
            if r >= k:
                a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                d = a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                d = d + a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                a[:, s2, k] = -a[:, s1, k - 1] / ndu[:, pk + 1, r]
                d = d + a[:, s2, k] * ndu[:, r, pk]
            ders[:, k, r] = d
            s1, s2 = s2, s1
    fac = p
    for k in range(1, nd + 1):
        ders[:, k, :] *= fac
        fac *= p - k
    return ders


class UnivariateBasis:
    """B-spline basis ``S^p_r`` spanned by a knot vector."""

    def __init__(self, knot_vector: KnotVector):
        self.kv = knot_vector

    @classmethod
    def from_knots(cls, knots, degree) -> "UnivariateBasis":
        return cls(KnotVector(knots, degree))

    def __repr__(self):
        return f"UnivariateBasis(p={self.degree}, n={self.n}, n_el={self.kv.n_elements})"

    def __eq__(self, other):
        return isinstance(other, UnivariateBasis) and self.kv == other.kv

    def __hash__(self):
        return hash(self.kv)

    @property
    def degree(self) -> int:
        return self.kv.degree

    @property
    def knots(self) -> np.ndarray:
        return self.kv.knots

    @property
    def n(self) -> int:
        return self.kv.n

    @property
    def breakpoints(self) -> np.ndarray:
        return self.kv.breakpoints

    @property
    def regularities(self) -> np.ndarray:
        return self.kv.regularities

    @property
    def domain(self) -> tuple[float, float]:
        return self.kv.domain

    def support(self, i: int) -> tuple[float, float]:
        return self.kv.support(i)

    def evaluate(self, u, nderiv: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Active functions and derivatives at the points ``u``.

        Returns ``(first, values)`` where ``first[k]`` is the index of the
        first active function at ``u[k]`` and ``values[k, d, a]`` is the
        ``d``-th derivative of function ``first[k] + a``.
        """
        if nderiv > self.degree and self.degree > 0:
            nderiv_eval = self.degree
        else:
            nderiv_eval = nderiv
        u = np.atleast_1d(np.asarray(u, dtype=float))
        span = self.kv.find_span(u)
        vals = _basis_ders(self.knots, self.degree, np.atleast_1d(span), u, nderiv_eval)
        if nderiv_eval < nderiv:
            pad = np.zeros((u.size, nderiv - nderiv_eval, self.degree + 1))
            vals = np.concatenate([vals, pad], axis=1)
        return np.atleast_1d(span) - self.degree, vals

    def collocation(self, u, deriv: int = 0) -> np.ndarray:
        """Dense ``(n, len(u))`` matrix of ``B_i^{(deriv)}(u_k)``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        first, vals = self.evaluate(u, deriv)
        out = np.zeros((self.n, u.size))
        cols = np.arange(u.size)
        for a in range(self.degree + 1):
            out[first + a, cols] = vals[:, deriv, a]
        return out

    def __call__(self, coeffs, u, deriv: int = 0) -> np.ndarray:
        """Evaluate the spline with coefficients ``coeffs`` at ``u``."""
        coeffs = np.asarray(coeffs, dtype=float)
        first, vals = self.evaluate(u, deriv)
        idx = first[:, None] + np.arange(self.degree + 1)
        return np.sum(coeffs[idx] * vals[:, deriv, :], axis=1)


def eval_basis(basis: UnivariateBasis, u: float, max_deriv: int = 0) -> tuple[int, np.ndarray]:
    """Index of the first active function and the ``(max_deriv+1, p+1)`` table at ``u``."""
    if max_deriv > basis.degree:
        raise ValueError("max_deriv must not exceed the degree")
    if np.ndim(u) != 0:
        raise ValueError("eval_basis takes a scalar parameter")
    first, vals = basis.evaluate([u], max_deriv)
    return int(first[0]), vals[0]


def derivative_basis(basis: UnivariateBasis) -> tuple[UnivariateBasis, np.ndarray, np.ndarray]:
    """Degree ``p-1`` basis and coefficients of the derivative identity.

    With ``lower`` the basis on ``knots[1:-1]``, each derivative reads
    ``B_i' = a[i] * lower[i-1] - b[i] * lower[i]``, where out-of-range lower
    functions are absent. Zero-length spans give zero coefficients.
    """
    p = basis.degree
    if p == 0:
        raise UnsupportedDegreeError("degree-0 splines have no derivative basis")
    k = basis.knots
    i = np.arange(basis.n)
    a = p * _safe_div(1.0, k[i + p] - k[i])
    b = p * _safe_div(1.0, k[i + p + 1] - k[i + 1])
    lower = UnivariateBasis(KnotVector(k[1:-1], p - 1))
    return lower, a, b


@dataclass(frozen=True)
class SubdivisionMatrix:
    """Sparse map from coarse to refined coefficients (``c_refined = matrix @ c``)."""

    matrix: sp.csr_matrix
    inserted: tuple[float, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other

    def compose(self, first: "SubdivisionMatrix") -> "SubdivisionMatrix":
        """Matrix of inserting ``first.inserted`` and then ``self.inserted``."""
        return SubdivisionMatrix((self.matrix @ first.matrix).tocsr(), first.inserted + self.inserted)


def _insert_once(kv: KnotVector, u: float) -> tuple[KnotVector, sp.csr_matrix]:
    p = kv.degree
    k = kv.knots
    n = kv.n
    s = kv.find_span(u)
    rows, cols, vals = [], [], []
    for c in range(n + 1):
        if c <= s - p:
            alpha = 1.0
        elif c <= s:
            den = k[c + p] - k[c]
            alpha = (u - k[c]) / den if den != 0 else 0.0
        else:
            alpha = 0.0
        if c - 1 >= 0 and alpha != 1.0:
            rows.append(c)
            cols.append(c - 1)
            vals.append(1.0 - alpha)
        if c < n and alpha != 0.0:
            rows.append(c)
            cols.append(c)
            vals.append(alpha)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))
    new_knots = np.insert(k, s + 1, u)
    return KnotVector(new_knots, p), mat


def insert_knot(
    basis: UnivariateBasis, u: float, target_multiplicity: int = 1
) -> tuple[UnivariateBasis, SubdivisionMatrix]:
    """Raise the multiplicity of ``u`` to ``target_multiplicity`` by repeated insertion."""
    kv = basis.kv
    a, b = kv.domain
    if not a < u < b:
        raise DomainError(f"knot {u} not strictly inside the domain ({a}, {b})")
    p = kv.degree
    if target_multiplicity > p + 1:
        raise ValueError("target multiplicity exceeds degree + 1")
    current = int(np.count_nonzero(kv.knots == u))
    mat = sp.identity(kv.n, format="csr")
    inserted = []
    for _ in range(max(target_multiplicity - current, 0)):
        kv, single = _insert_once(kv, u)
        mat = (single @ mat).tocsr()
        inserted.append(float(u))
    return UnivariateBasis(kv), SubdivisionMatrix(mat, tuple(inserted))


def insert_discontinuities(
    basis: UnivariateBasis, gammas: Sequence[float]
) -> tuple[UnivariateBasis, SubdivisionMatrix]:
    """Make the basis ``C^-1`` at every value of ``gammas`` (sequential insertion)."""
    refined = basis
    total = SubdivisionMatrix(sp.identity(basis.n, format="csr"), ())
    for g in sorted(gammas):
        refined, S = insert_knot(refined, g, basis.degree + 1)
        total = S.compose(total)
    return refined, total


class TensorBasis:
    """Tensor product of univariate bases; flat index runs with axis 0 fastest."""

    def __init__(self, axes: Sequence[UnivariateBasis]):
        if not 1 <= len(axes) <= 3:
            raise ValueError("tensor bases support 1 to 3 axes")
        self.axes = tuple(axes)

    def __repr__(self):
        return f"TensorBasis({list(self.axes)})"

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b.n for b in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(b.degree for b in self.axes)

    @property
    def element_shape(self) -> tuple[int, ...]:
        return tuple(b.kv.n_elements for b in self.axes)

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.element_shape))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([b.domain[0] for b in self.axes])
        hi = np.array([b.domain[1] for b in self.axes])
        return lo, hi

    def flat_index(self, multi) -> np.ndarray | int:
        return np.ravel_multi_index(tuple(np.asarray(multi).T) if np.ndim(multi) > 1 else tuple(multi),
                                    self.shape, order="F")

    def multi_index(self, flat) -> tuple:
        return np.unravel_index(flat, self.shape, order="F")

    def element_flat(self, multi) -> int:
        return int(np.ravel_multi_index(tuple(multi), self.element_shape, order="F"))

    def element_multi(self, flat) -> tuple:
        return np.unravel_index(flat, self.element_shape, order="F")

    def element_bounds(self, multi) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([b.kv.elements[e, 0] for b, e in zip(self.axes, multi)])
        hi = np.array([b.kv.elements[e, 1] for b, e in zip(self.axes, multi)])
        return lo, hi

    def element_first(self, multi) -> tuple[int, ...]:
        """First active function index per axis on the element."""
        return tuple(int(b.kv.spans[e]) - b.degree for b, e in zip(self.axes, multi))

    def evaluate(self, x, nderiv: int = 0):
        """Per-axis active-function tables at points ``x`` of shape ``(P, dim)``.

        Returns lists ``first[d]`` and ``vals[d]`` as produced by
        :meth:`UnivariateBasis.evaluate`.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = [b.evaluate(x[:, d], nderiv) for d, b in enumerate(self.axes)]
        return [o[0] for o in out], [o[1] for o in out]

    def local_indices(self, first) -> np.ndarray:
        """Flat indices ``(P, n_loc)`` of the active functions, axis 0 fastest."""
        grids = [f[:, None] + np.arange(b.degree + 1)[None, :] for f, b in zip(first, self.axes)]
        idx = np.zeros((grids[0].shape[0], 1), dtype=np.int64)
        stride = 1
        for d, g in enumerate(grids):
            idx = (idx[:, None, :] + stride * g[:, :, None]).reshape(g.shape[0], -1)
            stride *= self.axes[d].n
        return idx

    def local_values(self, vals, orders) -> np.ndarray:
        """Products ``(P, n_loc)`` of per-axis values with the given derivative orders."""
        out = np.ones((vals[0].shape[0], 1))
        for v, o in zip(vals, orders):
            out = (out[:, None, :] * v[:, o, :, None]).reshape(out.shape[0], -1)
        return out

    def __call__(self, coeffs, x, orders=None) -> np.ndarray:
        """Evaluate the tensor spline with flat ``coeffs`` at points ``x``."""
        orders = orders or (0,) * self.dim
        first, vals = self.evaluate(x, max(orders))
        idx = self.local_indices(first)
        phi = self.local_values(vals, orders)
        return np.sum(np.asarray(coeffs)[idx] * phi, axis=1)
