import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from immersed_wq.dwq import (
    FunctionClass,
    InvalidDiscontinuityError,
    build_axis_rules,
    build_dwq0,
    build_dwq1,
    box_point_bound,
    box_point_count,
    candidate_shifts,
    classify_functions,
    classify_functions_global,
    diagnostics_json,
    global_box_partition,
    individual_placement,
    partition_with_shift,
    support_ranges,
)
from immersed_wq.immersion import ElementClass, SphereLevelSet, classify_elements
from immersed_wq.quadrature import element_gauss, solve_wq_weights, wq_point_layout, wq_rules
from immersed_wq.splines import TensorBasis, UnivariateBasis, open_uniform

I, C, X = ElementClass.INTERIOR, ElementClass.CUT, ElementClass.EXTERIOR


def gauss_pairings(basis, lo, hi, da, db):
    """Element-wise Gauss oracle for int_[lo, hi] B_i^(da) B_j^(db)."""
    x, w = element_gauss(basis.kv, basis.degree + 2)
    keep = (x > lo) & (x < hi)
    x, w = x[keep], w[keep]
    return (basis.collocation(x, da) * w) @ basis.collocation(x, db).T


def quarter_circle_toy():
    axis = UnivariateBasis(open_uniform(9, 2, 0.0, 2.25))
    basis = TensorBasis([axis, axis])
    classes = classify_elements(SphereLevelSet((0.0, 0.0), 1.0), basis)
    return basis, classes


class TestDwqRules:
    @pytest.mark.parametrize("purpose", ["mass", "stiffness"])
    def test_no_gamma_is_plain_wq(self, purpose):
        basis = UnivariateBasis(open_uniform(10, 3))
        layout = wq_point_layout(basis, purpose)
        plain = wq_rules(basis, layout)
        r0 = build_dwq0(basis, [], layout)
        np.testing.assert_array_equal(r0.points, plain[0].points)
        np.testing.assert_array_equal(r0.weights, plain[0].weights)
        if purpose == "stiffness":
            r1 = build_dwq1(basis, [], layout)
            np.testing.assert_array_equal(r1.weights, plain[1].weights)

    def test_regular_side_weight_sums(self):
        basis = UnivariateBasis(open_uniform(10, 3))
        gamma = basis.breakpoints[6]
        rules = build_axis_rules(basis, [gamma], "stiffness")
        W0 = rules.restricted(0, [0])
        x, w = element_gauss(basis.kv, 5)
        keep = x < gamma
        ref = basis.collocation(x[keep]) @ w[keep]
        np.testing.assert_allclose(W0.sum(axis=1), ref, atol=1e-11)
        W1 = rules.restricted(1, [0])
        left = basis.collocation([gamma - 1e-14])[:, 0] - basis.collocation([0.0])[:, 0]
        np.testing.assert_allclose(W1.sum(axis=1), left, atol=1e-10)

    def test_nested_points_next_to_gamma(self):
        basis = UnivariateBasis(open_uniform(10, 3))
        gamma = basis.breakpoints[6]
        rules = build_axis_rules(basis, [gamma], "stiffness")
        h = 0.1
        for lo in (gamma - h, gamma):
            n = np.count_nonzero((rules.points > lo) & (rules.points < lo + h))
            assert n == 4

    def test_stiffness_pairings_regular_side(self):
        basis = UnivariateBasis(open_uniform(10, 3))
        gamma = basis.breakpoints[6]
        rules = build_axis_rules(basis, [gamma], "stiffness")
        K = rules.restricted(1, [0]) @ basis.collocation(rules.points, 1).T
        ref = gauss_pairings(basis, 0.0, gamma, 1, 1)
        np.testing.assert_allclose(K, ref, atol=1e-11 * np.abs(ref).max())

    def test_points_contain_layout(self):
        basis = UnivariateBasis(open_uniform(8, 2))
        rules = build_axis_rules(basis, [basis.breakpoints[3], basis.breakpoints[5]], "stiffness")
        assert np.all(np.isin(wq_point_layout(basis).points, rules.points))
        assert rules.n_regions == 3
        assert set(rules.region) == {0, 1, 2}

    def test_invalid_gamma(self):
        basis = UnivariateBasis(open_uniform(8, 2))
        with pytest.raises(InvalidDiscontinuityError):
            build_axis_rules(basis, [0.33])
        with pytest.raises(InvalidDiscontinuityError):
            build_axis_rules(basis, [0.0])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 12), st.data())
    def test_every_region_is_exact(self, p, n_el, data):
        basis = UnivariateBasis(open_uniform(n_el, p))
        bps = basis.breakpoints[1:-1]
        gammas = data.draw(st.lists(st.sampled_from(list(bps)), min_size=1, max_size=3, unique=True))
        rules = build_axis_rules(basis, gammas, "stiffness")
        for r in range(rules.n_regions):
            lo, hi = rules.region_bounds(r)
            for da, db in [(0, 0), (0, 1), (1, 0), (1, 1)]:
                Q = rules.restricted(da, [r]) @ basis.collocation(rules.points, db).T
                ref = gauss_pairings(basis, lo, hi, da, db)
                assert np.max(np.abs(Q - ref)) <= 1e-10 * max(1.0, np.abs(ref).max())


def brute_force_regular_count(classes_sub):
    """Largest all-interior element count over all (at most one per axis) cuts."""
    L = classes_sub.shape
    best = 0
    for cuts in itertools.product(*[[None, *range(1, n)] for n in L]):
        pieces = [[(0, n)] if c is None else [(0, c), (c, n)] for n, c in zip(L, cuts)]
        total = 0
        for combo in itertools.product(*pieces):
            block = classes_sub[tuple(slice(a, b) for a, b in combo)]
            if np.all(block == I):
                total += block.size
        best = max(best, total)
    return best


class TestIndividualPlacement:
    def test_last_column_cut(self):
        axis = UnivariateBasis(open_uniform(6, 2))
        basis = TensorBasis([axis, axis])
        classes = np.full((6, 6), I, dtype=np.int8)
        classes[4, :] = C
        # function 4 spans elements 2..4 along x; only its last column is cut
        ranges = support_ranges(basis)
        assert ranges[0][0][4] == 2 and ranges[0][1][4] == 5
        plan = individual_placement(basis, classes, (4, 2))
        assert plan.gammas[0] == (4,) and plan.gammas[1] == ()
        assert len(plan.gauss_elements) == 0
        assert plan.wq_boxes == [(0, 0)]

    def test_fully_cut_support(self):
        axis = UnivariateBasis(open_uniform(4, 2))
        basis = TensorBasis([axis, axis])
        classes = np.full((4, 4), C, dtype=np.int8)
        plan = individual_placement(basis, classes, (1, 1))
        assert plan.wq_boxes == [] and plan.gammas == ((), ())

    def test_gauss_elements_are_remaining_interior(self):
        basis, classes = quarter_circle_toy()
        fcls = classify_functions(basis, classes)
        ranges = support_ranges(basis)
        for idx in map(tuple, np.argwhere(fcls == FunctionClass.CUT)):
            plan = individual_placement(basis, classes, idx)
            lo = [ranges[d][0][i] for d, i in enumerate(idx)]
            hi = [ranges[d][1][i] for d, i in enumerate(idx)]
            sub = classes[lo[0] : hi[0], lo[1] : hi[1]]
            n_gauss = len(plan.gauss_elements)
            best = brute_force_regular_count(sub)
            assert np.count_nonzero(sub == I) - n_gauss == best

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.data())
    def test_optimal_on_random_masks(self, p, data):
        n = data.draw(st.integers(p + 1, 7))
        axis = UnivariateBasis(open_uniform(n, p))
        basis = TensorBasis([axis, axis])
        flags = data.draw(st.lists(st.sampled_from([I, I, C, X]), min_size=n * n, max_size=n * n))
        classes = np.array(flags, dtype=np.int8).reshape(n, n)
        idx = (data.draw(st.integers(0, axis.n - 1)), data.draw(st.integers(0, axis.n - 1)))
        plan = individual_placement(basis, classes, idx)
        ranges = support_ranges(basis)
        sub = classes[ranges[0][0][idx[0]] : ranges[0][1][idx[0]], ranges[1][0][idx[1]] : ranges[1][1][idx[1]]]
        assert np.count_nonzero(sub == I) - len(plan.gauss_elements) == brute_force_regular_count(sub)
        assert all(len(g) <= 1 for g in plan.gammas)


def brute_gauss_count(classes, h_b, shift):
    n = classes.shape
    count = 0
    for e in np.ndindex(*n):
        if classes[e] != I:
            continue
        box = []
        for d in range(len(n)):
            lo = e[d] - ((e[d] - shift[d]) % h_b)
            box.append((max(lo, 0), min(lo + h_b, n[d])))
        block = classes[tuple(slice(a, b) for a, b in box)]
        if np.any(block != I):
            count += 1
    return count


class TestGlobalPartition:
    def test_shift_count(self):
        assert len(candidate_shifts(3, 3)) == 8
        assert len(candidate_shifts(2, 4)) == 9

    def test_quarter_circle_brute_force(self):
        _, classes = quarter_circle_toy()
        part = global_box_partition(classes, 3)
        counts = {s: brute_gauss_count(classes, 3, s) for s in candidate_shifts(2, 3)}
        assert part.n_gauss == min(counts.values())
        assert part.shift == min(s for s, c in counts.items() if c == part.n_gauss)
        for s, c in counts.items():
            assert partition_with_shift(classes, 3, s).n_gauss == c

    def test_no_cut_elements(self):
        classes = np.full((7, 7), I, dtype=np.int8)
        part = global_box_partition(classes, 3)
        assert part.n_gauss == 0 and part.admissible.all()
        F = part.facet_masks()
        assert F[0][0].all() and F[0][-1].all() and not F[0][1:-1].any()

    def test_admissible_boxes_are_interior(self):
        _, classes = quarter_circle_toy()
        part = global_box_partition(classes, 3)
        assert np.all(classes[part.wq_mask] == I)

    def test_rejects_small_boxes(self):
        with pytest.raises(ValueError):
            global_box_partition(np.zeros((3, 3), dtype=np.int8), 1)

    def test_function_classes(self):
        basis, classes = quarter_circle_toy()
        part = global_box_partition(classes, 3)
        cls, plans = classify_functions_global(basis, part, classes)
        ranges = support_ranges(basis)
        for idx in np.ndindex(*basis.shape):
            sl = tuple(slice(ranges[d][0][i], ranges[d][1][i]) for d, i in enumerate(idx))
            wq = part.wq_mask[sl]
            valid = classes[sl] != X
            if not valid.any():
                assert cls[idx] == FunctionClass.EXTERIOR
            elif wq.all():
                assert cls[idx] == FunctionClass.INTERIOR
            elif not wq.any():
                assert cls[idx] == FunctionClass.GAUSS
            else:
                assert cls[idx] == FunctionClass.CUT and idx in plans
        assert any(sum(len(g) > 0 for g in p.gammas) == 2 for p in plans.values())

    def test_regions_disjoint_from_gauss_elements(self):
        basis, classes = quarter_circle_toy()
        part = global_box_partition(classes, 3)
        cls, plans = classify_functions_global(basis, part, classes)
        ranges = support_ranges(basis)
        for idx, plan in plans.items():
            lo = [ranges[d][0][i] for d, i in enumerate(idx)]
            hi = [ranges[d][1][i] for d, i in enumerate(idx)]
            edges = [[lo[d], *plan.gammas[d], hi[d]] for d in range(2)]
            for box in plan.wq_boxes:
                sl = tuple(slice(edges[d][r], edges[d][r + 1]) for d, r in enumerate(box))
                assert not part.gauss_mask[sl].any()

    def test_diagnostics(self):
        basis, classes = quarter_circle_toy()
        part = global_box_partition(classes, 3)
        cls, _ = classify_functions_global(basis, part, classes)
        doc = json.loads(diagnostics_json(basis, part, cls, {"N_WQ": 1}))
        assert set(doc) == {"boxes", "admissible", "gamma_facets", "function_classes", "counts"}
        assert sum(doc["function_classes"]["counts"].values()) == basis.size


class TestBoxPointBound:
    def test_2d(self):
        assert box_point_bound(3, 3, 3, 2) == 41

    def test_3d(self):
        assert box_point_bound(2, 3, 3, 3) == 81

    def test_hb2(self):
        assert box_point_bound([2, 3], 3, 2, 2) == 2 * 12

    def test_box_count_covers_actual_points(self):
        p, h_b = 3, 3
        axis = UnivariateBasis(open_uniform(9, p))
        rules = build_axis_rules(axis, [axis.breakpoints[3], axis.breakpoints[6]], "stiffness")
        per_axis = np.count_nonzero((rules.points > axis.breakpoints[3]) & (rules.points < axis.breakpoints[6]))
        assert per_axis <= 2 * (p + 1) + 3 * (h_b - 2)
        assert per_axis**2 <= box_point_count(p, 3, h_b, 2)


def test_plain_rules_match_solver():
    basis = UnivariateBasis(open_uniform(6, 2))
    layout = wq_point_layout(basis, "mass")
    rules = build_axis_rules(basis, [], "mass")
    np.testing.assert_array_equal(rules.weights[0], solve_wq_weights(basis, layout).weights)
