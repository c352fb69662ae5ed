"""Sum-factorized formation and assembly of mass and elasticity matrices.

The matrix of an immersed discretization is split into four parts:

* rows of interior test functions, formed with weighted quadrature (WQ),
* rows of cut test functions over their regular (D)WQ regions,
* Gauss elements (interior elements integrated element-wise),
* cut elements, integrated with a point loop over the cut rule.

``assemble`` supports plain element assembly and the two row strategies
(individual or global placement of the artificial discontinuities) and
reports analytic multiply-add counts for each part.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp

from .dwq import (
    AxisRuleCache,
    BoxPartition,
    FunctionClass,
    classify_functions,
    classify_functions_global,
    global_box_partition,
    individual_placement,
    support_ranges,
)
from .immersion import CutQuadrature, ElementClass, LevelSet, classify_elements, cut_cell_quadrature
from .quadrature import element_gauss
from .splines import TensorBasis

Strategy = Literal["element", "row_individual", "row_global"]
STRATEGIES = ("element", "row_individual", "row_global")


# ---------------------------------------------------------------------------
# forms and material


def lame_parameters(E: float, nu: float) -> tuple[float, float]:
    """Lame constants ``(lambda, mu)`` of an isotropic material."""
    if E <= 0 or not -1.0 < nu < 0.5:
        raise ValueError("need E > 0 and -1 < nu < 0.5")
    return nu * E / ((1 + nu) * (1 - 2 * nu)), E / (2 * (1 + nu))


@dataclass(frozen=True)
class Form:
    """Bilinear form assembled block-wise from integrals ``G[c, m, n]``.

    ``G[c, m, n]_{ij} = int c(x) d_m B_i d_n B_j`` where ``m`` or ``n`` equal
    to ``-1`` means no derivative. ``kind`` is ``mass`` (one component,
    channel 1), ``laplace`` (one component, channel 1) or ``elasticity``
    (``dim`` components, channels ``lambda`` and ``mu``).
    """

    kind: Literal["mass", "laplace", "elasticity"]
    dim: int

    @property
    def n_components(self) -> int:
        return self.dim if self.kind == "elasticity" else 1

    @property
    def n_channels(self) -> int:
        return 2 if self.kind == "elasticity" else 1

    @property
    def purpose(self) -> str:
        return "mass" if self.kind == "mass" else "stiffness"

    def patterns(self) -> list[tuple[int, int, int]]:
        if self.kind == "mass":
            return [(0, -1, -1)]
        if self.kind == "laplace":
            return [(0, m, m) for m in range(self.dim)]
        return [(c, m, n) for c in (0, 1) for m in range(self.dim) for n in range(self.dim)]

    def combine(self, G: dict) -> dict[tuple[int, int], np.ndarray]:
        """Component blocks ``(a, b)`` from the pattern integrals."""
        if self.kind == "mass":
            return {(0, 0): G[(0, -1, -1)]}
        if self.kind == "laplace":
            return {(0, 0): sum(G[(0, m, m)] for m in range(self.dim))}
        trace = sum(G[(1, m, m)] for m in range(self.dim))
        out = {}
        for a in range(self.dim):
            for b in range(self.dim):
                blk = G[(0, a, b)] + G[(1, b, a)]
                out[(a, b)] = blk + trace if a == b else blk
        return out

    def orders(self, m: int) -> tuple[int, ...]:
        return tuple(1 if d == m else 0 for d in range(self.dim))


@dataclass(frozen=True)
class Material:
    """Constant coefficients per channel (``(lambda, mu)`` for elasticity, ``(1,)`` otherwise)."""

    channels: tuple[float, ...]

    @classmethod
    def elastic(cls, E: float, nu: float) -> "Material":
        return cls(lame_parameters(E, nu))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Coefficient values ``(n_channels, P)``; the geometry map is the identity."""
        return np.repeat(np.asarray(self.channels, dtype=float)[:, None], len(x), axis=1)


@dataclass
class MaterialCache:
    """Material coefficients at the points of tensor-product regions.

    ``values[key]`` has shape ``(n_channels, n_0, ..., n_{d-1})`` matching the
    per-axis point arrays of that region.
    """

    material: Material
    values: dict = field(default_factory=dict)
    n_points: int = 0

    def grid(self, key, axes_points: Sequence[np.ndarray]) -> np.ndarray:
        if key not in self.values:
            self.values[key] = pull_back_material(axes_points, self.material)
            self.n_points += int(np.prod([len(a) for a in axes_points]))
        return self.values[key]

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))


def pull_back_material(axes_points: Sequence[np.ndarray], material: Material) -> np.ndarray:
    """Coefficients on the tensor grid of ``axes_points`` (identity geometry, Jacobian 1)."""
    shape = tuple(len(a) for a in axes_points)
    if 0 in shape:
        return np.zeros((len(material.channels), *shape))
    mesh = np.meshgrid(*axes_points, indexing="ij")
    x = np.stack([m.ravel() for m in mesh], axis=1)
    return material.evaluate(x).reshape(len(material.channels), *shape)


# ---------------------------------------------------------------------------
# FLOP accounting and sparse staging


@dataclass
class FlopReport:
    """Region counts and multiply-adds of the four parts of the assembly."""

    N_WQ: int = 0
    N_DWQ: int = 0
    N_REG: int = 0
    N_CUT: int = 0
    flops: dict = field(default_factory=lambda: {"wq": 0, "dwq": 0, "gauss_elements": 0, "cut_elements": 0})
    overlap_elements: int = 0
    pull_back_points: int = 0
    timings: dict = field(default_factory=lambda: defaultdict(float))

    @property
    def counts(self) -> dict[str, int]:
        return {"N_WQ": self.N_WQ, "N_DWQ": self.N_DWQ, "N_REG": self.N_REG, "N_CUT": self.N_CUT}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["timings"] = dict(self.timings)
        return d


class SparseBuilder:
    """Coordinate-format staging with duplicate summation on finalize."""

    def __init__(self, n: int):
        self.n = n
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._staged = 0
        self._partial: sp.csr_matrix | None = None

    def add(self, rows, cols, vals):
        """Add a dense block ``vals[len(rows), len(cols)]`` (or matching flat arrays)."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 2:
            rows, cols = np.broadcast_arrays(rows[:, None], cols[None, :])
        self._rows.append(rows.ravel())
        self._cols.append(cols.ravel())
        self._vals.append(vals.ravel())
        self._staged += vals.size
        if self._staged > 20_000_000:
            self._flush()

    def _flush(self):
        if not self._rows:
            return
        m = sp.coo_matrix(
            (np.concatenate(self._vals), (np.concatenate(self._rows), np.concatenate(self._cols))),
            shape=(self.n, self.n),
        ).tocsr()
        self._partial = m if self._partial is None else self._partial + m
        self._rows, self._cols, self._vals = [], [], []
        self._staged = 0

    def tocsr(self) -> sp.csr_matrix:
        self._flush()
        if self._partial is None:
            return sp.csr_matrix((self.n, self.n))
        out = self._partial.tocsr()
        out.sum_duplicates()
        out.sort_indices()
        return out


def sumfac_flops(pair_sizes: Sequence[int], nq: Sequence[int], batch: int = 1) -> int:
    """Multiply-adds of the axis-by-axis contraction ``X[Q, k_d, R] -> X[Q*pair_d, R]``."""
    total = 0
    q = 1
    for d in range(len(nq)):
        rest = int(np.prod(nq[d + 1 :])) if d + 1 < len(nq) else 1
        total += batch * q * pair_sizes[d] * nq[d] * rest
        q *= pair_sizes[d]
    return int(total)


def _reuse_keys(form: Form) -> list[list[tuple]]:
    """Distinct prefixes ``(c, (alpha_0, beta_0), ..., (alpha_d, beta_d))`` per contraction stage."""
    stages = []
    for d in range(form.dim):
        keys = set()
        for c, m, n in form.patterns():
            a, b = form.orders(m), form.orders(n)
            keys.add((c,) + tuple((a[e], b[e]) for e in range(d + 1)))
        stages.append(sorted(keys))
    return stages


def element_sumfac_flops(form: Form, n_loc: Sequence[int], nq: Sequence[int], batch: int = 1) -> int:
    """Multiply-adds of element formation by sum factorization with the reuse tree."""
    stages = _reuse_keys(form)
    total = 0
    q = 1
    for d in range(form.dim):
        rest = int(np.prod(nq[d + 1 :])) if d + 1 < form.dim else 1
        total += len(stages[d]) * batch * q * n_loc[d] ** 2 * nq[d] * rest
        q *= n_loc[d] ** 2
    return int(total)


def row_sumfac_flops(form: Form, n_trial: Sequence[int], nq: Sequence[int]) -> int:
    """Multiply-adds of one row block by sum factorization with the reuse tree."""
    stages = _reuse_keys(form)
    total = 0
    q = 1
    for d in range(form.dim):
        rest = int(np.prod(nq[d + 1 :])) if d + 1 < form.dim else 1
        total += len(stages[d]) * q * n_trial[d] * nq[d] * rest
        q *= n_trial[d]
    return int(total)


def point_loop_flops(form: Form, n_points: int, n_loc: int) -> int:
    """Multiply-adds of the point-loop formation ``sum_k w_k c_k phi_i phi_j``."""
    return int(len(form.patterns()) * n_points * n_loc * n_loc)


# ---------------------------------------------------------------------------
# element formation


def _contract(X: np.ndarray, T: np.ndarray) -> np.ndarray:
    """``X[e, Q, k, R]`` with ``T[e, P, k]`` -> ``X'[e, Q, P, R]``."""
    return np.matmul(T[:, None, :, :], X)


def _sumfac(C: np.ndarray, tables: Sequence[np.ndarray]) -> np.ndarray:
    """Contract ``C[e, k_0, ..., k_{d-1}]`` with per-axis tables ``T_d[e, P_d, k_d]``."""
    e = C.shape[0]
    nq = C.shape[1:]
    X = C.reshape(e, 1, nq[0], -1)
    q = 1
    for d, T in enumerate(tables):
        X = _contract(X, T)
        q *= T.shape[1]
        nxt = nq[d + 1] if d + 1 < len(nq) else 1
        X = X.reshape(e, q, nxt, -1)
    return X.reshape(e, q)


def element_form_sumfac(
    basis: TensorBasis,
    elements: np.ndarray,
    form: Form,
    material: Material,
    order: int | None = None,
) -> tuple[dict[tuple[int, int], np.ndarray], np.ndarray, int]:
    """Element matrices of uncut elements by sum factorization (batched).

    ``elements`` is an ``(E, dim)`` array of element multi-indices. Returns
    the component blocks ``(E, n_loc, n_loc)`` with local functions in C
    order over ``(i_0, ..., i_{d-1})``, the matching global flat indices
    ``(E, n_loc)`` and the multiply-add count.
    """
    elements = np.atleast_2d(np.asarray(elements, dtype=np.int64))
    E = elements.shape[0]
    dim = basis.dim
    axis_tab = []
    nq = []
    for d, ax in enumerate(basis.axes):
        q = order or ax.degree + 1
        gp, gw = element_gauss(ax.kv, q)
        e_d = elements[:, d]
        pts = gp[e_d]
        span = ax.kv.spans[e_d]
        vals = ax.evaluate(pts.ravel(), 1)[1].reshape(E, q, 2, ax.degree + 1)
        # V[e, alpha, i, k]
        V = np.transpose(vals, (0, 2, 3, 1))
        axis_tab.append((V, gw[e_d], span - ax.degree))
        nq.append(q)
    pts_grid = [gp for gp in [element_gauss(ax.kv, nq[d])[0][elements[:, d]] for d, ax in enumerate(basis.axes)]]
    n_loc = [ax.degree + 1 for ax in basis.axes]

    # material at every element's tensor grid
    C = np.empty((form.n_channels, E, *nq))
    for e in range(E):
        C[:, e] = pull_back_material([pts_grid[d][e] for d in range(dim)], material)

    stages = _reuse_keys(form)
    cache: dict[tuple, np.ndarray] = {}
    for d in range(dim):
        V, w, _ = axis_tab[d]
        for key in stages[d]:
            c = key[0]
            a, b = key[-1]
            T = (V[:, a, :, None, :] * V[:, b, None, :, :] * w[:, None, None, :]).reshape(E, -1, nq[d])
            if d == 0:
                X = C[c].reshape(E, 1, nq[0], -1)
            else:
                X = cache[key[:-1]]
            X = _contract(X, T)
            q = int(np.prod([n_loc[t] ** 2 for t in range(d + 1)]))
            nxt = nq[d + 1] if d + 1 < dim else 1
            cache[key] = X.reshape(E, q, nxt, -1)
    G = {}
    shape = [E]
    for d in range(dim):
        shape += [n_loc[d], n_loc[d]]
    perm = [0] + [1 + 2 * d for d in range(dim)] + [2 + 2 * d for d in range(dim)]
    nl = int(np.prod(n_loc))
    for c, m, n in form.patterns():
        a, b = form.orders(m), form.orders(n)
        key = (c,) + tuple((a[d], b[d]) for d in range(dim))
        G[(c, m, n)] = cache[key].reshape(shape).transpose(perm).reshape(E, nl, nl)
    blocks = form.combine(G)

    glob = np.zeros((E, 1), dtype=np.int64)
    stride = 1
    strides = []
    for d, ax in enumerate(basis.axes):
        strides.append(stride)
        stride *= ax.n
    for d, ax in enumerate(basis.axes):
        first = axis_tab[d][2]
        idx = (first[:, None] + np.arange(n_loc[d])[None, :]) * strides[d]
        glob = (glob[:, :, None] + idx[:, None, :]).reshape(E, -1)
    flops = element_sumfac_flops(form, n_loc, nq, E)
    return blocks, glob, flops


def element_form_cut(
    basis: TensorBasis,
    element: Sequence[int],
    rule: CutQuadrature,
    form: Form,
    material: Material,
) -> tuple[dict[tuple[int, int], np.ndarray], np.ndarray, int]:
    """Element matrix of one cut element by a plain loop over its cut-rule points.

    Returns the component blocks ``(n_loc, n_loc)`` (local functions with
    axis 0 fastest), their global flat indices and the multiply-add count.
    """
    first = np.array(basis.element_first(element))
    n_loc = int(np.prod([ax.degree + 1 for ax in basis.axes]))
    glob = basis.local_indices([np.array([f]) for f in first])[0]
    if len(rule) == 0:
        zero = np.zeros((n_loc, n_loc))
        return {k: zero for k in form.combine(defaultdict(lambda: zero))}, glob, 0
    x = rule.points
    _, vals = basis.evaluate(x, 1)
    phi = {}
    for m in sorted({m for _, m, _ in form.patterns()} | {n for _, _, n in form.patterns()}):
        phi[m] = basis.local_values(vals, form.orders(m))
    coeff = material.evaluate(x) * rule.weights[None, :]
    G = {}
    for c, m, n in form.patterns():
        G[(c, m, n)] = phi[m].T @ (coeff[c][:, None] * phi[n])
    flops = point_loop_flops(form, len(rule), n_loc)
    return form.combine(G), glob, flops


# ---------------------------------------------------------------------------
# row formation


class RowFormer:
    """Row blocks of test functions with per-axis (D)WQ rules and sum factorization."""

    def __init__(self, basis: TensorBasis, form: Form, material: Material):
        self.basis = basis
        self.form = form
        self.material = material
        self.rules = AxisRuleCache(basis, form.purpose)
        self.cache = MaterialCache(material)
        self._colloc: dict = {}
        self._stages = _reuse_keys(form)

    def _trial_table(self, axis: int, gammas: tuple) -> dict[int, np.ndarray]:
        key = (axis, gammas)
        if key not in self._colloc:
            r = self.rules(axis, gammas)
            ax = self.basis.axes[axis]
            orders = (0, 1) if self.form.kind != "mass" else (0,)
            self._colloc[key] = {b: ax.collocation(r.points, b) for b in orders}
        return self._colloc[key]

    def row(
        self, index: Sequence[int], gammas: Sequence[tuple[float, ...]] = None, boxes: Sequence[tuple[int, ...]] = None
    ) -> tuple[dict[tuple[int, int], np.ndarray], np.ndarray, int, int]:
        """Row block of test function ``index`` over the given (D)WQ sub-regions.

        Returns component blocks (flattened trial grids), global trial flat
        indices, multiply-adds and pulled-back point count.
        """
        dim = self.basis.dim
        gammas = tuple(tuple(g) for g in gammas) if gammas is not None else ((),) * dim
        boxes = boxes if boxes is not None else [(0,) * dim]
        ranges = []
        for d, ax in enumerate(self.basis.axes):
            p = ax.degree
            ranges.append(np.arange(max(0, index[d] - p), min(ax.n, index[d] + p + 1)))
        glob = self._global(ranges)
        total = defaultdict(float)
        flops = 0
        pulled = 0
        for box in boxes:
            G, f, npts = self._region(index, gammas, box, ranges)
            flops += f
            pulled += npts
            for k, v in G.items():
                total[k] = total[k] + v
        return self.form.combine(total), glob, flops, pulled

    def _global(self, ranges) -> np.ndarray:
        """Flat indices of the trial grid in C order over ``(j_0, ..., j_{d-1})``."""
        stride = 1
        parts = []
        for d, ax in enumerate(self.basis.axes):
            parts.append(stride * ranges[d])
            stride *= ax.n
        return sum(np.ix_(*parts)).ravel()

    def _region(self, index, gammas, box, ranges):
        dim = self.basis.dim
        A = []
        pts = []
        nq = []
        for d, ax in enumerate(self.basis.axes):
            r = self.rules(d, gammas[d])
            lo, hi = ax.support(index[d])
            K = np.nonzero((r.points > lo) & (r.points < hi) & (r.region == box[d]))[0]
            T = self._trial_table(d, gammas[d])
            A.append({(a, b): r.weights[a][index[d], K][None, :] * T[b][ranges[d]][:, K]
                      for a in r.weights for b in T})
            pts.append(r.points[K])
            nq.append(K.size)
        if 0 in nq:
            zero = np.zeros(int(np.prod([len(rg) for rg in ranges])))
            return {pat: zero for pat in self.form.patterns()}, 0, 0
        if all(not g for g in gammas):
            C = self._wq_grid(pts, index)
            npts = 0
        else:
            C = pull_back_material(pts, self.material)
            npts = int(np.prod(nq))
        cache: dict = {}
        for d in range(dim):
            for key in self._stages[d]:
                c = key[0]
                T = A[d][key[-1]][None]
                X = C[c].reshape(1, 1, nq[0], -1) if d == 0 else cache[key[:-1]]
                X = _contract(X, T)
                q = int(np.prod([len(ranges[t]) for t in range(d + 1)]))
                nxt = nq[d + 1] if d + 1 < dim else 1
                cache[key] = X.reshape(1, q, nxt, -1)
        G = {}
        for c, m, n in self.form.patterns():
            a, b = self.form.orders(m), self.form.orders(n)
            key = (c,) + tuple((a[d], b[d]) for d in range(dim))
            G[(c, m, n)] = cache[key].ravel()
        flops = row_sumfac_flops(self.form, [len(rg) for rg in ranges], nq)
        return G, flops, npts

    def _wq_grid(self, pts, index) -> np.ndarray:
        """Material on the WQ grid, pulled back once for the whole mesh and sliced per row."""
        full = [self.rules(d, ()).points for d in range(self.basis.dim)]
        grid = self.cache.grid("wq", full)
        sel = []
        for d, ax in enumerate(self.basis.axes):
            lo, hi = ax.support(index[d])
            sel.append(np.nonzero((full[d] > lo) & (full[d] < hi))[0])
        return grid[(slice(None), *np.ix_(*sel))]


# ---------------------------------------------------------------------------
# global assembly


@dataclass
class Problem:
    """Background basis, geometry, form and cut-quadrature settings."""

    basis: TensorBasis
    form: Form
    material: Material
    level_set: LevelSet | None = None
    cut_order: int | None = None
    cut_depth: int = 6
    h_b: int = 3

    _classes: np.ndarray | None = field(default=None, repr=False)
    _cut_rules: dict | None = field(default=None, repr=False)

    @property
    def element_classes(self) -> np.ndarray:
        if self._classes is None:
            if self.level_set is None:
                self._classes = np.full(self.basis.element_shape, ElementClass.INTERIOR, dtype=np.int8)
            else:
                self._classes = classify_elements(self.level_set, self.basis)
        return self._classes

    @property
    def cut_rules(self) -> dict[tuple[int, ...], CutQuadrature]:
        if self._cut_rules is None:
            order = self.cut_order or max(self.basis.degrees) + 1
            rules = {}
            for e in map(tuple, np.argwhere(self.element_classes == ElementClass.CUT)):
                lo, hi = self.basis.element_bounds(e)
                rules[e] = cut_cell_quadrature(self.level_set, lo, hi, order, self.cut_depth)
            self._cut_rules = rules
        return self._cut_rules

    @property
    def n_dofs(self) -> int:
        return self.form.n_components * self.basis.size


@dataclass
class AssemblyResult:
    matrix: sp.csr_matrix
    report: FlopReport
    function_classes: np.ndarray | None = None
    plans: dict | None = None
    partition: BoxPartition | None = None


def _add_blocks(builder: SparseBuilder, M: int, blocks, rows_glob, cols_glob):
    for (a, b), val in blocks.items():
        builder.add(a * M + rows_glob, b * M + cols_glob, val)


def _add_element_batch(builder, M, blocks, glob):
    E, nl = glob.shape
    for (a, b), val in blocks.items():
        r = np.broadcast_to((a * M + glob)[:, :, None], (E, nl, nl))
        c = np.broadcast_to((b * M + glob)[:, None, :], (E, nl, nl))
        builder.add(r.ravel(), c.ravel(), val.ravel())


def _assemble_elements(problem: Problem, builder: SparseBuilder, elements: np.ndarray, report: FlopReport,
                       chunk: int = 256) -> int:
    M = problem.basis.size
    flops = 0
    for s in range(0, len(elements), chunk):
        blocks, glob, f = element_form_sumfac(problem.basis, elements[s : s + chunk], problem.form, problem.material)
        _add_element_batch(builder, M, blocks, glob)
        flops += f
    return flops


def _assemble_cut(problem: Problem, builder: SparseBuilder) -> int:
    M = problem.basis.size
    flops = 0
    for e, rule in problem.cut_rules.items():
        blocks, glob, f = element_form_cut(problem.basis, e, rule, problem.form, problem.material)
        _add_blocks(builder, M, blocks, glob, glob)
        flops += f
    return flops


def assemble(strategy: Strategy, problem: Problem) -> AssemblyResult:
    """Global matrix on the background basis and its cost report.

    ``element`` forms every non-exterior element (sum factorization for
    interior elements, point loop for cut elements). ``row_individual`` and
    ``row_global`` form rows of interior and cut test functions with (D)WQ,
    then add the cut elements and the Gauss elements.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    basis = problem.basis
    M = basis.size
    builder = SparseBuilder(problem.n_dofs)
    report = FlopReport()
    classes = problem.element_classes
    t0 = time.perf_counter()
    cut_rules = problem.cut_rules
    report.timings["cut_rules"] += time.perf_counter() - t0
    report.N_CUT = len(cut_rules)
    result = AssemblyResult(None, report)

    if strategy == "element":
        interior = np.argwhere(classes == ElementClass.INTERIOR)
        t0 = time.perf_counter()
        report.flops["gauss_elements"] = _assemble_elements(problem, builder, interior, report)
        report.timings["gauss_elements"] += time.perf_counter() - t0
        report.N_REG = len(interior)
    else:
        former = RowFormer(basis, problem.form, problem.material)
        if strategy == "row_global":
            t0 = time.perf_counter()
            partition = global_box_partition(classes, problem.h_b)
            fcls, plans = classify_functions_global(basis, partition, classes)
            gauss = np.argwhere(partition.gauss_mask)
            report.timings["placement"] += time.perf_counter() - t0
            result.partition = partition
        else:
            t0 = time.perf_counter()
            fcls = classify_functions(basis, classes)
            plans = {
                idx: individual_placement(basis, classes, idx)
                for idx in map(tuple, np.argwhere(fcls == FunctionClass.CUT))
            }
            report.timings["placement"] += time.perf_counter() - t0
            gauss = None
        result.function_classes = fcls
        result.plans = plans

        t0 = time.perf_counter()
        interior_funcs = np.argwhere(fcls == FunctionClass.INTERIOR)
        for idx in interior_funcs:
            blocks, glob, f, _ = former.row(tuple(idx))
            i = int(basis.flat_index(idx))
            _add_blocks(builder, M, {k: v[None, :] for k, v in blocks.items()}, np.array([i]), glob)
            report.flops["wq"] += f
        report.N_WQ = len(interior_funcs)
        report.timings["wq"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        for idx, plan in plans.items():
            if not plan.wq_boxes:
                continue
            blocks, glob, f, npts = former.row(idx, plan.gamma_values, plan.wq_boxes)
            i = int(basis.flat_index(idx))
            _add_blocks(builder, M, {k: v[None, :] for k, v in blocks.items()}, np.array([i]), glob)
            report.flops["dwq"] += f
            report.pull_back_points += npts
        report.N_DWQ = len(plans)
        report.timings["dwq"] += time.perf_counter() - t0
        report.pull_back_points += former.cache.n_points

        t0 = time.perf_counter()
        if strategy == "row_global":
            report.flops["gauss_elements"] = _assemble_elements(problem, builder, gauss, report)
            report.N_REG = len(gauss)
            covered = _row_covered(basis, fcls, plans, classes)
            report.overlap_elements = int(np.count_nonzero(covered & partition.gauss_mask))
            if report.overlap_elements:
                raise AssertionError("global placement integrated an element by both rules")
        else:
            report.flops["gauss_elements"], report.N_REG, report.overlap_elements = _individual_gauss(
                problem, builder, fcls, plans
            )
        report.timings["gauss_elements"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    report.flops["cut_elements"] = _assemble_cut(problem, builder)
    report.timings["cut_elements"] += time.perf_counter() - t0
    t0 = time.perf_counter()
    result.matrix = builder.tocsr()
    report.timings["sparse"] += time.perf_counter() - t0
    return result


def _row_covered(basis: TensorBasis, fcls: np.ndarray, plans: dict, classes: np.ndarray) -> np.ndarray:
    """Elements integrated by some row rule."""
    covered = np.zeros(classes.shape, dtype=bool)
    ranges = support_ranges(basis)
    for idx in np.argwhere(fcls == FunctionClass.INTERIOR):
        covered[tuple(slice(ranges[d][0][i], ranges[d][1][i]) for d, i in enumerate(idx))] = True
    for idx, plan in plans.items():
        lo = [int(ranges[d][0][i]) for d, i in enumerate(idx)]
        hi = [int(ranges[d][1][i]) for d, i in enumerate(idx)]
        edges = [[lo[d], *plan.gammas[d], hi[d]] for d in range(basis.dim)]
        for box in plan.wq_boxes:
            covered[tuple(slice(edges[d][r], edges[d][r + 1]) for d, r in enumerate(box))] = True
    return covered


def _individual_gauss(problem: Problem, builder: SparseBuilder, fcls, plans) -> tuple[int, int, int]:
    """Per-function Gauss elements: each element is formed once and only the owning rows are kept."""
    basis = problem.basis
    M = basis.size
    owners: dict[tuple[int, ...], list[tuple[int, ...]]] = defaultdict(list)
    for idx, plan in plans.items():
        for e in map(tuple, plan.gauss_elements):
            owners[e].append(idx)
    if not owners:
        return 0, 0, 0
    elements = np.array(sorted(owners))
    flops = 0
    for s in range(0, len(elements), 256):
        chunk = elements[s : s + 256]
        blocks, glob, f = element_form_sumfac(basis, chunk, problem.form, problem.material)
        flops += f
        for k, e in enumerate(map(tuple, chunk)):
            for idx in owners[e]:
                i = int(basis.flat_index(idx))
                loc = int(np.nonzero(glob[k] == i)[0][0])
                for (a, b), val in blocks.items():
                    builder.add(np.array([a * M + i]), b * M + glob[k], val[k, loc][None, :])
    covered = _row_covered(basis, fcls, plans, problem.element_classes)
    gauss_mask = np.zeros(covered.shape, dtype=bool)
    gauss_mask[tuple(elements.T)] = True
    overlap = int(np.count_nonzero(covered & gauss_mask))
    return flops, len(elements), overlap


# ---------------------------------------------------------------------------
# extraction and export


def apply_extraction(K: sp.spmatrix, matrices: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    """``C K C^T`` with ``C = diag(C^(0), C^(1), ...)``."""
    C = sp.block_diag(matrices, format="csr")
    if C.shape[1] != K.shape[0]:
        raise ValueError(f"extraction has {C.shape[1]} columns, matrix has {K.shape[0]} rows")
    return (C @ K @ C.T).tocsr()


def export_matrix_market(path: str, K: sp.spmatrix) -> None:
    scipy.io.mmwrite(path, sp.coo_matrix(K), symmetry="general")


def cost_model_flops(form: Form, degree: int, n_el: int, strategy_terms: Iterable[str] = ("wq", "element", "point_loop")) -> dict[str, int]:
    """Multiply-adds of each formation kernel on an uncut ``n_el^dim`` unit mesh.

    ``wq``: all rows with WQ rules, ``element``: all elements with
    sum-factorized Gauss rules, ``point_loop``: all elements with the point
    loop over a ``(p + 1)^dim`` Gauss rule. Counts use the same formulas as
    the assembly routines but do not form the matrices.
    """
    from .splines import UnivariateBasis, open_uniform

    dim = form.dim
    ax = UnivariateBasis(open_uniform(n_el, degree))
    basis = TensorBasis([ax] * dim)
    out = {}
    n_loc = [degree + 1] * dim
    if "wq" in strategy_terms:
        rules = AxisRuleCache(basis, form.purpose)(0, ())
        per_axis = []
        for i in range(ax.n):
            lo, hi = ax.support(i)
            nq = int(np.count_nonzero((rules.points > lo) & (rules.points < hi)))
            nt = min(ax.n, i + degree + 1) - max(0, i - degree)
            per_axis.append((nt, nq))
        total = 0
        for combo in np.ndindex(*([ax.n] * dim)):
            total += row_sumfac_flops(form, [per_axis[i][0] for i in combo], [per_axis[i][1] for i in combo])
        out["wq"] = total
    n_elements = n_el**dim
    if "element" in strategy_terms:
        out["element"] = element_sumfac_flops(form, n_loc, [degree + 1] * dim, n_elements)
    if "point_loop" in strategy_terms:
        out["point_loop"] = n_elements * point_loop_flops(form, (degree + 1) ** dim, (degree + 1) ** dim)
    return out
