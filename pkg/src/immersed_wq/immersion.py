"""Level-set geometry on a tensor-product background mesh.

Element classification, adaptive cut-cell and cut-face quadrature, and the
extended B-spline extraction that removes badly cut functions while keeping
polynomial reproduction. The valid domain is ``{x : phi(x) < 0}``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import null_space

from .quadrature import gauss_legendre
from .splines import TensorBasis


class ElementClass(IntEnum):
    INTERIOR = 0
    CUT = 1
    EXTERIOR = 2


class DegenerateDomainError(ValueError):
    """No stable (inner) function exists for the extraction."""


# ---------------------------------------------------------------------------
# level sets


class LevelSet:
    """Scalar field with the valid domain on its negative side.

    Subclasses provide ``__call__`` and ``grad`` for points of shape
    ``(P, dim)``. ``bounds`` may return exact ``(min, max)`` values over boxes;
    the default ``None`` makes callers fall back to sampling. ``axes`` lists
    the coordinates the field depends on (``None`` means all).
    """

    axes: tuple[int, ...] | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounds(self, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        return None


@dataclass
class SphereLevelSet(LevelSet):
    """``phi = R^2 - sum_{d in axes} (x_d - c_d)^2``: the ball (or cylinder) is cut away."""

    center: Sequence[float]
    radius: float
    axes: tuple[int, ...] | None = None

    def _axes(self, dim: int) -> tuple[int, ...]:
        return tuple(range(dim)) if self.axes is None else tuple(self.axes)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = np.asarray(self.center, dtype=float)
        ax = list(self._axes(x.shape[1]))
        return self.radius**2 - np.sum((x[:, ax] - c[ax]) ** 2, axis=1)

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = np.asarray(self.center, dtype=float)
        g = np.zeros_like(x)
        ax = list(self._axes(x.shape[1]))
        g[:, ax] = -2.0 * (x[:, ax] - c[ax])
        return g

    def bounds(self, lo, hi):
        """Exact range over boxes ``[lo, hi]`` given as ``(B, dim)`` arrays."""
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        c = np.asarray(self.center, dtype=float)
        ax = list(self._axes(lo.shape[1]))
        a = lo[:, ax] - c[ax]
        b = hi[:, ax] - c[ax]
        far = np.maximum(a**2, b**2)
        near = np.where((a <= 0) & (b >= 0), 0.0, np.minimum(a**2, b**2))
        r2 = self.radius**2
        return r2 - far.sum(axis=1), r2 - near.sum(axis=1)


def hole_level_set() -> SphereLevelSet:
    """Quarter-circle hole of radius 1 at the origin, extruded along z."""
    return SphereLevelSet((0.0, 0.0, 0.0), 1.0, axes=(0, 1))


def cavity_level_set() -> SphereLevelSet:
    """Spherical cavity of radius 1 at the origin."""
    return SphereLevelSet((0.0, 0.0, 0.0), 1.0)


def _box_range(level_set: LevelSet, lo: np.ndarray, hi: np.ndarray, samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Range of ``phi`` over boxes: exact when available, else from a tensor sample grid."""
    rng = level_set.bounds(lo, hi)
    if rng is not None:
        return rng
    t = np.linspace(0.0, 1.0, samples)
    dim = lo.shape[1]
    grid = np.array(list(itertools.product(t, repeat=dim)))
    x = lo[:, None, :] + grid[None, :, :] * (hi - lo)[:, None, :]
    vals = level_set(x.reshape(-1, dim)).reshape(lo.shape[0], -1)
    return vals.min(axis=1), vals.max(axis=1)


def _classify_boxes(level_set, lo, hi, samples) -> np.ndarray:
    vmin, vmax = _box_range(level_set, lo, hi, samples)
    out = np.full(lo.shape[0], ElementClass.CUT, dtype=np.int8)
    out[vmax < 0] = ElementClass.INTERIOR
    out[vmin > 0] = ElementClass.EXTERIOR
    return out


def element_boxes(basis: TensorBasis) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper corners ``(n_elements, dim)`` in C order over the element grid."""
    els = [ax.kv.elements for ax in basis.axes]
    idx = np.array(list(np.ndindex(*basis.element_shape)))
    lo = np.stack([els[d][idx[:, d], 0] for d in range(basis.dim)], axis=1)
    hi = np.stack([els[d][idx[:, d], 1] for d in range(basis.dim)], axis=1)
    return lo, hi


def classify_elements(level_set: LevelSet, basis: TensorBasis) -> np.ndarray:
    """Interior/cut/exterior class of every element, shaped like the element grid.

    Uses the exact range of ``phi`` when the level set provides one,
    otherwise a ``(p + 2)^dim`` sample grid including the corners. A zero
    value anywhere makes the element cut.
    """
    lo, hi = element_boxes(basis)
    samples = max(basis.degrees) + 2
    return _classify_boxes(level_set, lo, hi, samples).reshape(basis.element_shape)


# ---------------------------------------------------------------------------
# cut quadrature


@dataclass
class CutQuadrature:
    points: np.ndarray
    weights: np.ndarray
    depth: int = 0
    leaves: int = 0

    @property
    def measure(self) -> float:
        return float(self.weights.sum())

    def __len__(self):
        return self.weights.size


def _tensor_gauss(lo: np.ndarray, hi: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on boxes ``(B, dim)``; degenerate axes get a single unit-weight point."""
    rule = gauss_legendre(order)
    ref = 0.5 * (rule.points + 1.0)
    B, dim = lo.shape
    pts = np.zeros((B, order**dim, dim))
    wts = np.ones((B, order**dim))
    for combo_i, combo in enumerate(itertools.product(range(order), repeat=dim)):
        for d, j in enumerate(combo):
            h = hi[:, d] - lo[:, d]
            flat = h == 0
            pts[:, combo_i, d] = lo[:, d] + ref[j] * h
            wts[:, combo_i] *= np.where(flat, 1.0 if j == 0 else 0.0, 0.5 * rule.weights[j] * h)
    keep = wts != 0
    return pts[keep], wts[keep]


def _adaptive(level_set, lo, hi, order, max_depth, split_axes, samples):
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    dim = lo.shape[1]
    split = [d for d in split_axes if np.all(hi[:, d] > lo[:, d])]
    pts, wts = [], []
    depth = leaves = 0
    for level in range(max_depth + 1):
        if lo.shape[0] == 0:
            break
        depth = level
        cls = _classify_boxes(level_set, lo, hi, samples)
        inside = cls == ElementClass.INTERIOR
        if inside.any():
            p, w = _tensor_gauss(lo[inside], hi[inside], order)
            pts.append(p)
            wts.append(w)
        mixed = cls == ElementClass.CUT
        lo, hi = lo[mixed], hi[mixed]
        if level == max_depth or not split:
            p, w = _tensor_gauss(lo, hi, order)
            keep = level_set(p) < 0
            pts.append(p[keep])
            wts.append(w[keep])
            leaves = lo.shape[0]
            break
        mid = 0.5 * (lo + hi)
        new_lo, new_hi = [], []
        for corner in itertools.product((0, 1), repeat=len(split)):
            clo, chi = lo.copy(), hi.copy()
            for d, c in zip(split, corner):
                if c:
                    clo[:, d] = mid[:, d]
                else:
                    chi[:, d] = mid[:, d]
            new_lo.append(clo)
            new_hi.append(chi)
        lo, hi = np.concatenate(new_lo), np.concatenate(new_hi)
    if pts:
        points = np.concatenate(pts)
        weights = np.concatenate(wts)
    else:
        points, weights = np.zeros((0, dim)), np.zeros(0)
    return CutQuadrature(points, weights, depth, leaves)


def cut_cell_quadrature(
    level_set: LevelSet, lo, hi, gauss_order: int, max_depth: int
) -> CutQuadrature:
    """Adaptive ``2^k``-tree quadrature of ``[lo, hi] ∩ {phi < 0}``.

    Sub-cells entirely inside get a full tensor Gauss rule, sub-cells
    entirely outside are dropped, mixed ones are bisected along the axes the
    level set depends on. At ``max_depth`` the Gauss points of a mixed leaf
    are kept where ``phi < 0`` with their weights unchanged.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be non-negative")
    lo = np.asarray(lo, dtype=float)
    dim = lo.shape[-1]
    split = tuple(range(dim)) if level_set.axes is None else tuple(level_set.axes)
    return _adaptive(level_set, lo, hi, gauss_order, max_depth, split, gauss_order + 1)


def face_quadrature(
    level_set: LevelSet, lo, hi, axis: int, side: int, gauss_order: int, max_depth: int
) -> CutQuadrature:
    """Quadrature of the face ``x_axis = (lo, hi)[side]`` of a box, restricted to ``phi < 0``.

    The weights measure area (the fixed coordinate gets a unit weight).
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    value = hi[axis] if side else lo[axis]
    lo[axis] = hi[axis] = value
    return cut_cell_quadrature(level_set, lo, hi, gauss_order, max_depth)


# ---------------------------------------------------------------------------
# extended B-splines


@dataclass
class Extraction:
    """Extraction matrices ``C^(k)`` (``N_k x M``) per displacement component.

    ``inner[k]`` and ``kept[k]`` hold background flat indices of the stable
    functions (rows of ``C^(k)`` in order) and ``outer[k]`` those absorbed
    by extension.
    """

    matrices: list[sp.csr_matrix]
    rows: list[np.ndarray]
    outer: list[np.ndarray]
    dropped: list[np.ndarray] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [C.shape[0] for C in self.matrices]

    def block(self) -> sp.csr_matrix:
        return sp.block_diag(self.matrices, format="csr")


def _marsden_coefficients(knots: np.ndarray, p: int, rows: np.ndarray, ys: np.ndarray, scale: float) -> np.ndarray:
    """B-spline coefficients of ``((x - y_m) / scale)^p`` for the given rows (Marsden's identity)."""
    out = np.ones((rows.size, ys.size))
    for r in range(1, p + 1):
        out *= (knots[rows + r][:, None] - ys[None, :]) / scale
    return out


def _extension_1d(basis_1d, j: int, window: np.ndarray, constrained: Sequence[int]) -> np.ndarray:
    """Coefficients ``e`` with ``c_j = e @ c_window`` for every admissible degree-``p`` polynomial.

    Admissible polynomials have zero coefficients at the ``constrained``
    indices (the first/last function of an open knot vector, i.e. they
    vanish on the corresponding end).
    """
    p = basis_1d.degree
    k = basis_1d.knots
    if p == 0:
        return np.ones(1)
    lo = k[window[0] + 1]
    hi = k[window[-1] + p]
    center = 0.5 * (lo + hi)
    scale = hi - lo if hi > lo else 1.0
    ys = center + 0.5 * scale * np.cos(np.pi * (np.arange(p + 1) + 0.5) / (p + 1))
    A_win = _marsden_coefficients(k, p, window, ys, scale)
    A_j = _marsden_coefficients(k, p, np.array([j]), ys, scale)
    if constrained:
        N = null_space(_marsden_coefficients(k, p, np.asarray(constrained), ys, scale))
        A_win = A_win @ N
        A_j = A_j @ N
    return np.linalg.solve(A_win.T, A_j.T).ravel()


def _function_window_masks(basis: TensorBasis, classes: np.ndarray):
    from .dwq import _window_sums, support_ranges

    ranges = support_ranges(basis)
    n_int = _window_sums(classes == ElementClass.INTERIOR, ranges)
    n_valid = _window_sums(classes != ElementClass.EXTERIOR, ranges)
    return n_int > 0, n_valid > 0


def build_extraction(
    basis: TensorBasis,
    classes: np.ndarray,
    dirichlet: Sequence[Sequence[tuple[int, int]]] = ((),),
) -> Extraction:
    """Extended B-spline extraction per component.

    ``dirichlet[k]`` lists ``(axis, side)`` faces with homogeneous strong
    conditions for component ``k``; the layer of functions on such a face is
    dropped and the preserved polynomials are those vanishing there.
    Functions whose support holds at least one interior element are inner
    (stable); every other non-exterior function is extended into the
    nearest all-inner tensor array of ``p + 1`` consecutive admissible
    indices per axis with coefficients that reproduce all polynomials of
    degree ``p``. Only when no such array exists are smaller arrays used,
    reproducing the polynomials that satisfy the Dirichlet conditions.
    """
    inner_mask, valid_mask = _function_window_masks(basis, classes)
    if not inner_mask.any():
        raise DegenerateDomainError("no function has an interior element in its support")
    mats, rows_out, outer_out, dropped_out = [], [], [], []
    for faces in dirichlet:
        faces = set(tuple(f) for f in faces)
        allowed = np.ones(basis.shape, dtype=bool)
        cons = []
        for d, ax in enumerate(basis.axes):
            c = [i for side, i in ((0, 0), (1, ax.n - 1)) if (d, side) in faces]
            cons.append(c)
            for i in c:
                sl = [slice(None)] * basis.dim
                sl[d] = i
                allowed[tuple(sl)] = False
        stable = inner_mask & allowed
        outer = valid_mask & ~inner_mask & allowed
        if not stable.any():
            raise DegenerateDomainError("no stable function left after Dirichlet constraints")
        mats.append(_extraction_component(basis, stable, outer, cons))
        rows_out.append(_flat_sorted(basis, stable))
        outer_out.append(_flat_sorted(basis, outer))
        dropped_out.append(_flat_sorted(basis, ~allowed))
    return Extraction(mats, rows_out, outer_out, dropped_out)


def _flat_sorted(basis: TensorBasis, mask: np.ndarray) -> np.ndarray:
    idx = np.argwhere(mask)
    if idx.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.atleast_1d(basis.flat_index(idx)))


def _window_candidates(basis: TensorBasis, stable, m, first, last) -> np.ndarray:
    """Start indices ``(K, dim)`` of all-stable tensor windows of sizes ``m``."""
    from .dwq import _cumsum_all

    dim = basis.dim
    starts = [np.arange(f, l - mm + 1) for f, l, mm in zip(first, last, m)]
    if any(s.size == 0 for s in starts):
        return np.zeros((0, dim), dtype=np.int64)
    P = np.pad(_cumsum_all(stable), [(1, 0)] * dim)
    total = 0
    for corner in itertools.product((0, 1), repeat=dim):
        idx = np.ix_(*[s + mm if c else s for s, mm, c in zip(starts, m, corner)])
        total = total + (-1) ** (dim - sum(corner)) * P[idx]
    cand = np.argwhere(total == int(np.prod(m)))
    return np.stack([starts[d][cand[:, d]] for d in range(dim)], axis=1) if cand.size else cand


def _extraction_component(basis: TensorBasis, stable, outer, cons) -> sp.csr_matrix:
    dim = basis.dim
    M = basis.size
    stable_flat = _flat_sorted(basis, stable)
    row_of = -np.ones(M, dtype=np.int64)
    row_of[stable_flat] = np.arange(stable_flat.size)

    rows = list(row_of[stable_flat])
    cols = list(stable_flat)
    vals = [1.0] * stable_flat.size

    outer_idx = np.argwhere(outer)
    if outer_idx.size:
        first = [1 if 0 in c else 0 for c in cons]
        last = [ax.n - (1 if (ax.n - 1) in c else 0) for ax, c in zip(basis.axes, cons)]
        # full windows reproduce every polynomial; reduced windows only those
        # satisfying the constraints and serve as a fallback near small domains
        m = [ax.degree + 1 for ax in basis.axes]
        axis_cons: list = [()] * dim
        cand_start = _window_candidates(basis, stable, m, first, last)
        if cand_start.size == 0:
            m = [ax.degree + 1 - len(c) for ax, c in zip(basis.axes, cons)]
            axis_cons = [tuple(c) for c in cons]
            cand_start = _window_candidates(basis, stable, m, first, last)
        if cand_start.size == 0:
            raise DegenerateDomainError("no all-stable index array for extension")
        twice_center = 2 * cand_start + (np.array(m) - 1)
        ext_cache: dict = {}
        for j in outer_idx:
            d2 = np.sum((twice_center - 2 * j) ** 2, axis=1)
            best = cand_start[int(np.argmin(d2))]
            per_axis = []
            for d, ax in enumerate(basis.axes):
                window = np.arange(best[d], best[d] + m[d])
                key = (d, int(j[d]), int(best[d]))
                if key not in ext_cache:
                    ext_cache[key] = _extension_1d(ax, int(j[d]), window, axis_cons[d])
                per_axis.append((window, ext_cache[key]))
            e = np.ones(1)
            idx = np.zeros(1, dtype=np.int64)
            stride = 1
            for d, (window, ed) in enumerate(per_axis):
                e = (e[None, :] * ed[:, None]).ravel()
                idx = (idx[None, :] + stride * window[:, None]).ravel()
                stride *= basis.axes[d].n
            jflat = int(basis.flat_index(j))
            rows.extend(row_of[idx])
            cols.extend([jflat] * idx.size)
            vals.extend(e)
    C = sp.coo_matrix((vals, (rows, cols)), shape=(stable_flat.size, M))
    return C.tocsr()
