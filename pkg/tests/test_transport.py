import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgans.errors import ContractError, EvaluationError, ShapeError
from kgans.transport import (
    DiscreteMeasure,
    EmpiricalMeasure,
    NearestLabelLabeler,
    OTConvergenceWarning,
    c_transform,
    cell_mass,
    dual_gradient,
    dual_objective,
    feature_cost,
    laguerre_assign,
    lp_cost,
    ot_exact_small,
    semi_supervised_cost,
    solve_dual,
)
from oracles import brute_dual, enumerate_assignments


def random_instance(rng, n, k):
    X = rng.uniform(-1, 1, size=(n, 2))
    Y = rng.uniform(-1, 1, size=(k, 2))
    w = rng.uniform(0.1, 1.0, size=k)
    return EmpiricalMeasure(X), DiscreteMeasure(Y, w / w.sum())


class TestCost:
    def test_squared_euclidean(self):
        assert lp_cost(2)([0, 0], [3, 4]) == 25.0

    def test_l1(self):
        assert lp_cost(1)([1, 1], [0, 0]) == 2.0

    def test_fractional_p(self):
        assert lp_cost(0.5)([0, 0], [4, 9]) == pytest.approx(5.0)

    def test_semi_supervised_same_label(self):
        c = semi_supervised_cost(lp_cost(2), lambda x: "A")
        assert c([0, 0], [3, 4]) == pytest.approx(2.5)

    def test_semi_supervised_thetas(self):
        labels = {(0.0, 0.0): "A", (3.0, 4.0): "B", (1.0, 0.0): None}
        c = semi_supervised_cost(lp_cost(2), lambda x: labels[tuple(x)])
        assert c([0, 0], [3, 4]) == pytest.approx(250.0)
        assert c([1, 0], [3, 4]) == pytest.approx(20.0)

    def test_feature_cost(self):
        c = feature_cost(lambda X: 2.0 * np.asarray(X), p=2)
        assert c([0, 0], [1, 1]) == pytest.approx(8.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            lp_cost(2)([0, 0], [1, 1, 1])

    def test_non_finite_rejected(self):
        with pytest.raises(EvaluationError):
            lp_cost(2)([np.inf, 0], [0, 0])

    def test_invalid_p(self):
        with pytest.raises(ContractError):
            lp_cost(0)

    @pytest.mark.parametrize("c", [lp_cost(2), lp_cost(3), lp_cost(1.5), feature_cost(np.tanh, 2)])
    def test_grad_y_matches_finite_differences(self, c):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(9, 2))
        y = rng.normal(size=2)
        g = c.grad_y(X, y)
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (c.pairwise(X, y + e).mean() - c.pairwise(X, y - e).mean()) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_l1_kink_subgradient_is_zero(self):
        assert lp_cost(1).grad_y([[1.0, 2.0]], np.array([1.0, 2.0])).tolist() == [0.0, 0.0]


def test_nearest_label_labeler():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    lab = NearestLabelLabeler(pts, ["a", None, "b"])
    assert lab(pts[1]) is None
    assert lab([4.0, 4.0]) == "b"
    assert lab([0.9, 0.0]) == "a"


class TestCTransform:
    def test_zero_duals_is_nearest_cost(self):
        mu = DiscreteMeasure([[0, 0], [2, 0]], [0.5, 0.5])
        assert c_transform(np.zeros(2), [1.5, 0], mu, lp_cost(2)) == pytest.approx(0.25)

    def test_single_atom(self):
        mu = DiscreteMeasure([[1, 1]], [1.0])
        assert c_transform([0.3], [0, 0], mu, lp_cost(2)) == pytest.approx(2.0 - 0.3)

    def test_two_atoms_hand_enumerated(self):
        mu = DiscreteMeasure([[-0.5, 0], [0.5, 0]], [0.5, 0.5])
        terms = [lp_cost(2)([0, 0], y) - g for y, g in zip(mu.atoms, [0.0, 0.5])]
        assert terms == [0.25, -0.25]
        assert c_transform([0.0, 0.5], [0, 0], mu, lp_cost(2)) == -0.25

    def test_empty_atoms_rejected(self):
        with pytest.raises(ContractError):
            DiscreteMeasure(np.zeros((0, 2)), [])


class TestLaguerre:
    def test_equal_duals_is_voronoi(self):
        mu = DiscreteMeasure([[0, 0], [1, 0], [0, 1]], [0.2, 0.3, 0.5], [0.7, 0.7, 0.7])
        assert laguerre_assign([0.8, 0.1], mu, lp_cost(2)) == 1

    def test_dual_weight_breaks_tie(self):
        mu = DiscreteMeasure([[-1, 0], [1, 0]], [0.5, 0.5], [1e-9, 0.0])
        assert laguerre_assign([0, 0], mu, lp_cost(2)) == 0
        mu = DiscreteMeasure([[-1, 0], [1, 0]], [0.5, 0.5], [0.0, 1e-9])
        assert laguerre_assign([0, 0], mu, lp_cost(2)) == 1

    def test_exact_tie_goes_to_lowest_index(self):
        mu = DiscreteMeasure([[-1, 0], [1, 0]], [0.5, 0.5])
        assert laguerre_assign([0, 0], mu, lp_cost(2)) == 0

    def test_random_points_match_exhaustive_scan(self):
        rng = np.random.default_rng(7)
        Y = rng.normal(size=(5, 3))
        mu = DiscreteMeasure(Y, np.full(5, 0.2))
        c = lp_cost(2)
        for x in rng.normal(size=(200, 3)):
            best, best_j = np.inf, -1
            for j, y in enumerate(Y):
                v = float(np.sum((x - y) ** 2))
                if v < best:
                    best, best_j = v, j
            assert laguerre_assign(x, mu, c) == best_j


class TestDual:
    def test_zero_duals_is_mean_nearest_cost(self):
        rng = np.random.default_rng(0)
        nu, mu = random_instance(rng, 20, 3)
        C = lp_cost(2).pairwise(nu.points, mu.atoms)
        assert dual_objective(np.zeros(3), nu, mu, lp_cost(2)) == pytest.approx(C.min(axis=1).mean())

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        nu, mu = random_instance(rng, 3, 2)
        g = rng.normal(size=2)
        assert dual_objective(g, nu, mu, lp_cost(2)) == pytest.approx(
            brute_dual(g, nu.points, mu.atoms, mu.weights, lp_cost(2)), abs=1e-14
        )

    @given(st.integers(0, 10_000), st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, seed, delta):
        rng = np.random.default_rng(seed)
        nu, mu = random_instance(rng, 15, 4)
        g = rng.normal(size=4)
        assert dual_objective(g + delta, nu, mu, lp_cost(2)) == pytest.approx(
            dual_objective(g, nu, mu, lp_cost(2)), abs=1e-9
        )

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_concave_along_random_lines(self, seed):
        rng = np.random.default_rng(seed)
        nu, mu = random_instance(rng, 12, 3)
        g, d = rng.normal(size=3), rng.normal(size=3)
        t = float(rng.uniform(0.01, 1.0))
        f = lambda s: dual_objective(g + s * d, nu, mu, lp_cost(2))
        assert f(t) + f(-t) - 2 * f(0.0) <= 1e-9

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_gradient_sums_to_zero(self, seed):
        rng = np.random.default_rng(seed)
        nu, mu = random_instance(rng, 17, 4)
        assert abs(dual_gradient(rng.normal(size=4), nu, mu, lp_cost(2)).sum()) <= 1e-12

    def test_single_atom_gradient_zero(self):
        rng = np.random.default_rng(2)
        nu = EmpiricalMeasure(rng.normal(size=(10, 2)))
        mu = DiscreteMeasure([[0, 0]], [1.0])
        assert dual_gradient([3.0], nu, mu, lp_cost(2)).tolist() == [0.0]

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        nu, mu = random_instance(rng, 40, 3)
        c = lp_cost(2)
        g = rng.normal(scale=0.1, size=3)
        C = c.pairwise(nu.points, mu.atoms) - g
        srt = np.sort(C, axis=1)
        assert np.min(srt[:, 1] - srt[:, 0]) > 1e-4
        h = 1e-7
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd = (dual_objective(g + e, nu, mu, c) - dual_objective(g - e, nu, mu, c)) / (2 * h)
            assert dual_gradient(g, nu, mu, c)[j] == pytest.approx(fd, abs=1e-6)


class TestSolveDual:
    def test_voronoi_masses_give_zero_duals(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 2))
        Y = np.array([[-1.0, 0.0], [1.0, 0.0]])
        masses = cell_mass(np.zeros(2), EmpiricalMeasure(X), DiscreteMeasure(Y, [0.5, 0.5]), lp_cost(2))
        sol = solve_dual(EmpiricalMeasure(X), DiscreteMeasure(Y, masses), lp_cost(2))
        assert sol.converged and sol.iterations == 1
        np.testing.assert_array_equal(sol.dual_weights, 0.0)

    def test_unreachable_split_warns(self):
        nu = EmpiricalMeasure([[0.0], [10.0]])
        mu = DiscreteMeasure([[0.0], [10.0]], [0.9, 0.1])
        with pytest.warns(OTConvergenceWarning):
            sol = solve_dual(nu, mu, lp_cost(1), max_iters=2000)
        # each point carries 1/2, so the best split is (1/2, 1/2) or (1, 0)
        assert not sol.converged
        assert sol.residual == pytest.approx(0.1)
        assert sorted(sol.cell_masses.tolist()) in ([0.0, 1.0], [0.5, 0.5])

    def test_masses_match_targets(self):
        rng = np.random.default_rng(9)
        nu, mu = random_instance(rng, 200, 3)
        sol = solve_dual(nu, mu, lp_cost(2))
        assert sol.converged and sol.dual_weights[0] == 0.0
        counts = np.zeros(3)
        for x in nu.points:
            counts[np.argmin([np.sum((x - y) ** 2) - g for y, g in zip(mu.atoms, sol.dual_weights)])] += 1
        assert np.max(np.abs(counts / 200 - mu.weights)) <= 0.02

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(ContractError):
            solve_dual(EmpiricalMeasure([[0.0]]), DiscreteMeasure([[0.0], [1.0]], [1.0, 0.0]), lp_cost(2))


class TestExactSmall:
    def test_perfect_matching(self):
        nu = EmpiricalMeasure([[0.0], [1.0]])
        mu = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
        assert ot_exact_small(nu, mu, lp_cost(2)) == 0.0

    def test_single_atom(self):
        nu = EmpiricalMeasure([[0.0], [1.0], [2.0]])
        assert ot_exact_small(nu, DiscreteMeasure([[1.0]], [1.0]), lp_cost(1)) == pytest.approx(2 / 3)

    def test_two_points(self):
        nu = EmpiricalMeasure([[0.0], [10.0]])
        assert ot_exact_small(nu, DiscreteMeasure([[0.0], [10.0]], [0.5, 0.5]), lp_cost(1)) == 0.0
        assert ot_exact_small(nu, DiscreteMeasure([[0.0], [10.0]], [1.0, 0.0]), lp_cost(1)) == 5.0

    def test_matches_itertools_enumeration(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            n, k = int(rng.integers(2, 7)), int(rng.integers(1, 4))
            counts = np.bincount(rng.integers(k, size=n), minlength=k)
            X, Y = rng.normal(size=(n, 2)), rng.normal(size=(k, 2))
            got = ot_exact_small(EmpiricalMeasure(X), DiscreteMeasure(Y, counts / n), lp_cost(2))
            assert got == pytest.approx(enumerate_assignments(X, Y, counts, lp_cost(2)), abs=1e-12)

    def test_weights_must_be_multiples_of_1_over_n(self):
        nu = EmpiricalMeasure([[0.0], [1.0], [2.0]])
        with pytest.raises(ContractError, match="multiples"):
            ot_exact_small(nu, DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5]), lp_cost(2))

    def test_primal_dual_agreement(self):
        rng = np.random.default_rng(21)
        X, Y = rng.normal(size=(6, 2)), rng.normal(size=(2, 2))
        nu, mu = EmpiricalMeasure(X), DiscreteMeasure(Y, [0.5, 0.5])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            sol = solve_dual(nu, mu, lp_cost(2))
        assert sol.value == pytest.approx(ot_exact_small(nu, mu, lp_cost(2)), abs=1e-4)
