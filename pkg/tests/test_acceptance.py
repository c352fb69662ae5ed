"""Acceptance criteria, each checked at its stated tolerance.

Every test prints a single ``CRITERION n: PASS|FAIL`` line straight to the
terminal (bypassing capture) before asserting.
"""

import itertools

import numpy as np
import pytest

from immersed_wq.assembly import Form, apply_extraction, assemble, cost_model_flops
from immersed_wq.dwq import build_axis_rules, candidate_shifts, global_box_partition
from immersed_wq.elasticity import BenchmarkConfig, run_benchmark, setup
from immersed_wq.immersion import (
    SphereLevelSet,
    build_extraction,
    cavity_level_set,
    classify_elements,
    cut_cell_quadrature,
)
from immersed_wq.quadrature import element_gauss, exactness_report, wq_point_layout, wq_rules
from immersed_wq.splines import TensorBasis, UnivariateBasis, derivative_basis, insert_knot, open_uniform

I = 0  # ElementClass.INTERIOR


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def hole_p2_n10():
    """Reports and matrices of all three strategies on the hole benchmark, p = 2, n_el = 10."""
    runs = {}
    for strategy in ("element", "row_individual", "row_global"):
        report, _, result = run_benchmark(BenchmarkConfig(benchmark="hole", degree=2, n_el=10, strategy=strategy))
        runs[strategy] = (report, result.matrix)
    return runs


def cross_strategy_ok(runs):
    K = runs["element"][1]
    norm = np.sqrt((K.multiply(K)).sum())
    worst_matrix, worst_digits = 0.0, np.inf
    for s in ("row_individual", "row_global"):
        D = runs[s][1] - K
        worst_matrix = max(worst_matrix, np.sqrt((D.multiply(D)).sum()) / norm)
        ref, other = runs["element"][0].errors, runs[s][0].errors
        if set(ref) != set(other):
            return False, worst_matrix, 0.0
        for k in ref:
            gap = abs(other[k] - ref[k]) / abs(ref[k])
            worst_digits = min(worst_digits, -np.log10(gap) if gap > 0 else np.inf)
    return worst_matrix <= 1e-9 and worst_digits >= 8, worst_matrix, worst_digits


def gauss_pairings(basis, lo, hi, da, db):
    x, w = element_gauss(basis.kv, basis.degree + 2)
    keep = (x > lo) & (x < hi)
    x, w = x[keep], w[keep]
    return (basis.collocation(x, da) * w) @ basis.collocation(x, db).T


def brute_gauss_count(classes, h_b, shift):
    """Interior elements whose shifted box touches a non-interior element."""
    count = 0
    for e in np.ndindex(*classes.shape):
        if classes[e] != I:
            continue
        box = []
        for d, n in enumerate(classes.shape):
            lo = e[d] - ((e[d] - shift[d]) % h_b)
            box.append(slice(max(lo, 0), min(lo + h_b, n)))
        count += bool(np.any(classes[tuple(box)] != I))
    return count


def test_criterion_1_wq_exactness(verdict):
    worst = 0.0
    for p, n, purpose in itertools.product((2, 4, 6, 8), (5, 10, 20), ("mass", "stiffness")):
        basis = UnivariateBasis(open_uniform(n, p))
        for rule in wq_rules(basis, wq_point_layout(basis, purpose)).values():
            worst = max(worst, exactness_report(rule))
    verdict(1, worst <= 1e-11, f"WQ exactness, worst relative residual {worst:.2e} (limit 1e-11)")


def test_criterion_2_dwq_regular_side(verdict):
    worst = 0.0
    for p in (2, 3, 4):
        basis = UnivariateBasis(open_uniform(10, p))
        for gamma in basis.breakpoints[1:-1]:
            for purpose, (da, db) in (("mass", (0, 0)), ("stiffness", (1, 1))):
                rules = build_axis_rules(basis, [gamma], purpose)
                for r in range(rules.n_regions):
                    lo, hi = rules.region_bounds(r)
                    Q = rules.restricted(da, [r]) @ basis.collocation(rules.points, db).T
                    ref = gauss_pairings(basis, lo, hi, da, db)
                    worst = max(worst, np.max(np.abs(Q - ref)) / np.abs(ref).max())
    verdict(2, worst <= 1e-11, f"DWQ pairings vs Gauss, worst relative gap {worst:.2e} (limit 1e-11)")


def test_criterion_3_cross_strategy(verdict, hole_p2_n10):
    ok, gap, digits = cross_strategy_ok(hole_p2_n10)
    verdict(3, ok, f"Frobenius gap {gap:.2e} (limit 1e-9), error columns agree to {digits:.1f} digits (need 8)")


REFERENCE_HOLE = {"u_x": 1.904789e-05, "u_y": 3.079523e-05, "sigma_xx": 1.148239e-03}
REFERENCE_CAVITY = {"u_z": 1.058461e-02, "sigma_zz": 4.541756e-02}


def observed_order(coarse, fine, n_coarse, n_fine, keys):
    return min(np.log(coarse[k] / fine[k]) / np.log(n_fine / n_coarse) for k in keys)


@pytest.mark.slow
def test_criterion_4_error_reproduction(verdict, hole_p2_n10):
    p = 2
    hole = {n: run_benchmark(BenchmarkConfig(benchmark="hole", degree=p, n_el=n, cut_depth=8))[0].errors
            for n in (20, 40)}
    cavity = {n: run_benchmark(BenchmarkConfig(benchmark="cavity", degree=p, n_el=n))[0].errors for n in (10, 21)}
    gaps = {f"hole {k}": hole[40][k] / v - 1 for k, v in REFERENCE_HOLE.items()}
    gaps |= {f"cavity {k}": cavity[10][k] / v - 1 for k, v in REFERENCE_CAVITY.items()}
    within = all(abs(g) <= 0.05 for g in gaps.values())
    band = ", ".join(f"{k} {100 * g:+.1f}%" for k, g in gaps.items())
    if within:
        verdict(4, True, f"all values within 5%: {band}")
        return
    order_hole = observed_order(hole[20], hole[40], 20, 40, ("u_x", "u_y"))
    order_cavity = observed_order(cavity[10], cavity[21], 10, 21, ("u_x", "u_y", "u_z"))
    equivalent, _, _ = cross_strategy_ok(hole_p2_n10)
    ok = equivalent and min(order_hole, order_cavity) >= p + 0.5
    verdict(4, ok, f"5% band missed ({band}); fallback: criterion 3 {'holds' if equivalent else 'fails'}, "
                   f"displacement order hole 20->40 {order_hole:.2f}, cavity 10->21 {order_cavity:.2f} (need {p + 0.5})")


def test_criterion_5_cost_slopes(verdict):
    degrees = np.array([2, 4, 6, 8])
    bands = {"wq": (3.3, 5.0), "element": (6.0, 7.6), "point_loop": (8.0, 9.6)}
    lines, ok = [], True
    for kind in ("mass", "elasticity"):
        flops = [cost_model_flops(Form(kind, 3), int(p), 8) for p in degrees]
        for term, (lo, hi) in bands.items():
            slope = np.polyfit(np.log(degrees), np.log([f[term] for f in flops]), 1)[0]
            inside = lo <= slope <= hi
            ok &= inside
            lines.append(f"{kind}/{term} {slope:.2f}{'' if inside else ' (outside [%g, %g])' % (lo, hi)}")
    verdict(5, ok, "log-log slopes vs p: " + ", ".join(lines))


def test_criterion_6_geometry_quadrature(verdict):
    disk = cut_cell_quadrature(SphereLevelSet((0.0, 0.0), 1.0), [0.0, 0.0], [1.0, 1.0], 3, 8)
    ball = cut_cell_quadrature(cavity_level_set(), [0.0] * 3, [2.0] * 3, 3, 6)
    e_disk = abs(disk.measure - (1 - np.pi / 4))
    e_ball = abs(ball.measure - (8 - np.pi / 6))
    verdict(6, e_disk <= 1e-5 and e_ball <= 1e-4,
            f"quarter-disk area error {e_disk:.1e} (limit 1e-5), eighth-sphere volume error {e_ball:.1e} (limit 1e-4)")


def test_criterion_7_global_partition(verdict):
    axis = UnivariateBasis(open_uniform(9, 2, 0.0, 2.25))
    classes = classify_elements(SphereLevelSet((0.0, 0.0), 1.0), TensorBasis([axis, axis]))
    part = global_box_partition(classes, 3)
    counts = {s: brute_gauss_count(classes, 3, s) for s in candidate_shifts(2, 3)}
    best = min(counts.values())
    verdict(7, part.n_gauss == best,
            f"chosen shift {part.shift} gives {part.n_gauss} Gauss elements, brute-force minimum {best} "
            f"over {len(counts)} shifts")


def test_criterion_8_structural_invariants(verdict):
    rng = np.random.default_rng(8)
    checks = {}

    basis = UnivariateBasis(open_uniform(7, 4))
    x = np.linspace(0, 1, 501)
    checks["partition of unity"] = np.max(np.abs(basis.collocation(x).sum(axis=0) - 1)) <= 1e-14

    c = rng.normal(size=basis.n)
    refined, S = insert_knot(basis, 0.37, 3)
    checks["subdivision invariance"] = np.max(np.abs(refined(S @ c, x) - basis(c, x))) <= 1e-13 * np.abs(c).max()

    lower, a, b = derivative_basis(basis)
    L = lower.collocation(x[1:-1])
    D = a[:, None] * np.vstack([np.zeros_like(L[0]), L]) - b[:, None] * np.vstack([L, np.zeros_like(L[0])])
    exact = basis.collocation(x[1:-1], 1)
    h = 1e-6
    fd = (basis.collocation(x[1:-1] + h) - basis.collocation(x[1:-1] - h)) / (2 * h)
    checks["derivative identity"] = np.max(np.abs(D - exact)) <= 1e-11 * np.abs(exact).max()
    checks["derivative vs finite differences"] = np.max(np.abs(fd - exact)) <= 1e-6 * np.abs(exact).max()

    bench = setup(BenchmarkConfig(benchmark="hole", degree=2, n_el=4, cut_depth=5))
    K = assemble("row_global", bench.problem).matrix
    asym = abs(K - K.T).max() / abs(K).max()
    ext = build_extraction(bench.basis, bench.problem.element_classes, [[], [], []])
    Ks = apply_extraction(K, ext.matrices).toarray()
    ev = np.linalg.eigvalsh(0.5 * (Ks + Ks.T))
    checks["stiffness symmetry"] = asym <= 1e-10
    checks["stiffness PSD"] = ev.min() >= -1e-9 * ev.max()
    n = ext.sizes[0]
    kernel = 0.0
    for k in range(3):
        t = np.zeros(3 * n)
        t[k * n : (k + 1) * n] = 1.0
        kernel = max(kernel, np.linalg.norm(Ks @ t) / (np.linalg.norm(Ks) * np.linalg.norm(t)))
    checks["rigid-body kernel"] = kernel <= 1e-9

    axis = UnivariateBasis(open_uniform(10, 2, 0.0, 4.0))
    plane = TensorBasis([axis, axis])
    ls = SphereLevelSet((0.0, 0.0), 1.0)
    C = build_extraction(plane, classify_elements(ls, plane), [[]]).matrices[0]
    pts = rng.uniform(0, 4, (600, 2))
    pts = pts[ls(pts) < 0]
    B = np.einsum("ip,jp->pji", *[ax.collocation(pts[:, d]) for d, ax in enumerate(plane.axes)]).reshape(len(pts), -1)
    A = B @ C.T.toarray()
    repro = 0.0
    for i, j in itertools.product(range(3), repeat=2):
        f = pts[:, 0] ** i * pts[:, 1] ** j
        coef, *_ = np.linalg.lstsq(A, f, rcond=None)
        repro = max(repro, np.max(np.abs(A @ coef - f)))
    checks["extraction polynomial reproduction"] = repro <= 1e-9

    failed = [k for k, v in checks.items() if not v]
    verdict(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} invariants hold"
                           + (f"; failing: {', '.join(failed)}" if failed else ""))
