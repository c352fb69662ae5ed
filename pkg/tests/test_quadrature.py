import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from immersed_wq.quadrature import (
    LayoutInfeasibleError,
    RuleSet,
    element_gauss,
    exactness_report,
    gauss_legendre,
    rules_from_json,
    rules_to_json,
    solve_wq_weights,
    target_space,
    wq_derivative_rule,
    wq_point_layout,
    wq_rules,
)
from immersed_wq.splines import KnotVector, UnivariateBasis, open_uniform


def dense_gauss_matrix(basis, da, db):
    """Element-wise Gauss oracle for int B_i^(da) B_j^(db)."""
    x, w = element_gauss(basis.kv, basis.degree + 2)
    x, w = x.ravel(), w.ravel()
    return (basis.collocation(x, da) * w) @ basis.collocation(x, db).T


def wq_matrix(basis, rules, da, db):
    """sum_k w^(da)_{k,i} B_j^(db)(x_k)."""
    return rules[da].weights @ basis.collocation(rules[da].points, db).T


class TestGaussLegendre:
    def test_one_point(self):
        r = gauss_legendre(1)
        assert r.points[0] == 0.0 and r.weights[0] == 2.0

    def test_two_points(self):
        r = gauss_legendre(2)
        np.testing.assert_allclose(r.points, [-1 / np.sqrt(3), 1 / np.sqrt(3)], atol=1e-15)
        np.testing.assert_allclose(r.weights, [1, 1], atol=1e-15)

    @pytest.mark.parametrize("n", range(1, 17))
    def test_monomial_exactness(self, n):
        r = gauss_legendre(n)
        for k in range(2 * n):
            exact = 0.0 if k % 2 else 2.0 / (k + 1)
            assert abs(np.sum(r.weights * r.points**k) - exact) <= 1e-13
        assert np.all(r.weights > 0)
        np.testing.assert_array_equal(r.points, -r.points[::-1])

    def test_odd_moment_vanishes_exactly(self):
        for n in range(1, 9):
            r = gauss_legendre(n)
            assert np.sum(r.weights * r.points ** (2 * n - 1)) == pytest.approx(0.0, abs=1e-16)

    @pytest.mark.parametrize("n", [0, 33])
    def test_range(self, n):
        with pytest.raises(ValueError):
            gauss_legendre(n)


class TestLayout:
    def test_counts_p4(self):
        basis = UnivariateBasis(open_uniform(10, 4))
        stiff = wq_point_layout(basis, "stiffness").counts
        mass = wq_point_layout(basis, "mass").counts
        assert stiff[0] == stiff[-1] == 5 and mass[0] == mass[-1] == 5
        assert np.all(stiff[1:-1] == 3) and np.all(mass[1:-1] == 2)

    def test_points_are_gauss_points(self):
        basis = UnivariateBasis(KnotVector([0, 0, 0, 0.2, 0.5, 0.5, 0.5, 0.7, 1, 1, 1], 2))
        gp, _ = element_gauss(basis.kv, 3)
        for purpose in ("mass", "stiffness"):
            lay = wq_point_layout(basis, purpose)
            np.testing.assert_array_equal(lay.points, gp[lay.element, lay.local])
            bounds = lay.element_bounds[lay.element]
            assert np.all((lay.points > bounds[:, 0]) & (lay.points < bounds[:, 1]))

    def test_discontinuity_neighbours_get_full_rule(self):
        basis = UnivariateBasis(KnotVector([0] * 4 + [0.25] + [0.5] * 4 + [0.75] + [1] * 4, 3))
        counts = wq_point_layout(basis, "stiffness").counts
        np.testing.assert_array_equal(counts, [4, 4, 4, 4])

    def test_mass_and_stiffness_share_outer_points(self):
        basis = UnivariateBasis(open_uniform(6, 3))
        m = set(wq_point_layout(basis, "mass").points)
        s = set(wq_point_layout(basis, "stiffness").points)
        assert m <= s


class TestWeights:
    @pytest.mark.parametrize("p", [2, 4, 6, 8])
    @pytest.mark.parametrize("purpose", ["mass", "stiffness"])
    def test_exactness_20_elements(self, p, purpose):
        basis = UnivariateBasis(open_uniform(20, p))
        rules = wq_rules(basis, wq_point_layout(basis, purpose))
        for r in rules.values():
            assert exactness_report(r) <= 1e-11

    def test_weight_sums(self):
        basis = UnivariateBasis(open_uniform(8, 3))
        rules = wq_rules(basis, wq_point_layout(basis, "stiffness"))
        integrals = (basis.knots[4:] - basis.knots[:-4]) / 4
        np.testing.assert_allclose(rules[0].weights.sum(axis=1), integrals, atol=1e-14)
        s1 = rules[1].weights.sum(axis=1)
        assert s1[0] == pytest.approx(-1.0, abs=1e-12)
        assert s1[-1] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(s1[1:-1], 0.0, atol=1e-12)

    def test_mass_matrix_matches_gauss(self):
        basis = UnivariateBasis(open_uniform(8, 3))
        rules = wq_rules(basis, wq_point_layout(basis, "mass"))
        M = wq_matrix(basis, rules, 0, 0)
        ref = dense_gauss_matrix(basis, 0, 0)
        assert np.linalg.norm(M - ref) / np.linalg.norm(ref) <= 1e-11

    def test_stiffness_matrix_matches_gauss(self):
        basis = UnivariateBasis(open_uniform(8, 3))
        rules = wq_rules(basis, wq_point_layout(basis, "stiffness"))
        for da, db in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            K = wq_matrix(basis, rules, da, db)
            ref = dense_gauss_matrix(basis, da, db)
            assert np.linalg.norm(K - ref) / np.linalg.norm(ref) <= 1e-11

    def test_derivative_rule_matches_direct_solve(self):
        basis = UnivariateBasis(open_uniform(9, 4))
        layout = wq_point_layout(basis, "stiffness")
        rules = wq_rules(basis, layout)
        target = rules[0].target
        exact = rules[1].weights @ target.collocation(rules[1].points).T
        # the same exactness conditions written directly for alpha = 1
        x, w = element_gauss(basis.kv, basis.degree + 2)
        ref = (basis.collocation(x.ravel(), 1) * w.ravel()) @ target.collocation(x.ravel()).T
        np.testing.assert_allclose(exact, ref, atol=1e-11)

    def test_derivative_rule_needs_lower_rules(self):
        basis = UnivariateBasis(open_uniform(5, 2))
        rules = wq_rules(basis, wq_point_layout(basis, "stiffness"))
        with pytest.raises(ValueError):
            wq_derivative_rule(basis, rules[0])

    def test_infeasible_layout(self):
        basis = UnivariateBasis(open_uniform(6, 3))
        with pytest.raises(LayoutInfeasibleError) as info:
            solve_wq_weights(basis, np.array([0.05, 0.5, 0.95]))
        assert info.value.test_index == 0

    def test_perturbation_detected(self):
        basis = UnivariateBasis(open_uniform(10, 3))
        rules = wq_rules(basis, wq_point_layout(basis, "stiffness"))[0]
        W = rules.weights.copy()
        k = np.nonzero(W[4])[0][0]
        W[4, k] += 1e-3
        bad = RuleSet(rules.test_basis, 0, rules.points, W, rules.target)
        assert exactness_report(bad) >= 1e-5

    def test_empty_report(self):
        basis = UnivariateBasis(open_uniform(3, 1))
        empty = RuleSet(basis, 0, np.zeros(0), np.zeros((0, 0)), basis)
        assert exactness_report(empty) == 0.0

    def test_target_space_stiffness(self):
        basis = UnivariateBasis(open_uniform(4, 3))
        t = target_space(basis, "stiffness")
        assert t.n == basis.n + 3
        assert target_space(basis, "mass") == basis

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 12), st.sampled_from(["mass", "stiffness"]))
    def test_exactness_property(self, p, n_el, purpose):
        basis = UnivariateBasis(open_uniform(n_el, p))
        for r in wq_rules(basis, wq_point_layout(basis, purpose)).values():
            assert exactness_report(r) <= 1e-11
            # every weight lives inside the support of its test function
            for i in range(basis.n):
                lo, hi = basis.support(i)
                outside = (r.points <= lo) | (r.points >= hi)
                assert np.all(r.weights[i, outside] == 0)


class TestSerialization:
    def test_round_trip_is_bitwise(self):
        basis = UnivariateBasis(open_uniform(7, 3, 0.0, 2.0))
        rules = wq_rules(basis, wq_point_layout(basis, "stiffness"))
        text = rules_to_json([rules[0], rules[1]])
        back = rules_from_json(text)
        assert len(back) == 2
        for a, b in zip([rules[0], rules[1]], back):
            np.testing.assert_array_equal(a.points, b.points)
            np.testing.assert_array_equal(a.weights, b.weights)
            assert a.alpha == b.alpha
