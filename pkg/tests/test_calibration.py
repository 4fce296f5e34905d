import math
from fractions import Fraction

import numpy as np
import pytest

from lcp.calibration import (CalibrationModel, LocalizedProblem, NoFeasibleLevel,
                             default_alpha_grid, eval_G1, eval_G2, grid_search_alpha,
                             randomized_alpha, randomized_level, search_alpha)
from lcp.core import INF
from lcp.localizers import LocalizerSpec
from oracles import (box, exponential, first_feasible, frac, g1_sum, g2_parts, kernel_rows,
                     knn_kernel_rows, lower_quantile)


def oracle_rows(spec, points):
    if spec.kind == "constant":
        return kernel_rows(points, lambda d: 1.0)
    if spec.kind == "distance_box":
        return kernel_rows(points, box(spec.h))
    if spec.kind == "exponential":
        return kernel_rows(points, exponential(spec.h))
    if spec.kind == "knn":
        return knn_kernel_rows(points, spec.h)
    raise AssertionError(spec.kind)


SPECS = [LocalizerSpec(), LocalizerSpec("box", 0.5), LocalizerSpec("box", 1.5),
         LocalizerSpec("exp", 0.7), LocalizerSpec("knn", 3)]


def random_instance(rng, n_max=8, weighted=False):
    n = int(rng.integers(3, n_max + 1))
    x = np.round(rng.normal(size=n + 1), 1)
    V = rng.choice([0.0, 0.5, 1.0, 1.5, 2.0, 3.0], size=n) if rng.random() < 0.5 \
        else np.round(rng.exponential(size=n), 3)
    w = rng.integers(1, 4, size=n + 1).astype(float) if weighted else None
    return x, V, w


class TestDefaultGrid:
    def test_contents(self):
        g = default_alpha_grid(0.9)
        assert g.size == 200 and g[0] == 0.005 and g[-1] == 1.0
        assert 0.9 in g

    def test_alpha_off_grid_is_added(self):
        g = default_alpha_grid(0.9123)
        assert g.size == 201 and 0.9123 in g
        assert (np.diff(g) > 0).all()


class TestCalibrationModel:
    @pytest.mark.parametrize("kwargs", [
        dict(scores=[1.0, -1.0]),
        dict(scores=[1.0]),
        dict(alpha=1.0),
        dict(alpha=0.0),
        dict(alpha_grid=[0.5, 0.4]),
        dict(alpha_grid=[0.0, 0.5]),
        dict(alpha_grid=[0.5, 1.2]),
        dict(weights=[1.0, 0.0]),
        dict(weights=[1.0]),
    ])
    def test_rejects(self, kwargs):
        base = dict(X=[0.0, 1.0], scores=[1.0, 2.0])
        base.update(kwargs)
        with pytest.raises(ValueError):
            CalibrationModel(**base)

    def test_frozen_arrays(self):
        m = CalibrationModel([0.0, 1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            m.scores[0] = 3.0

    def test_weighted_needs_test_weight(self):
        m = CalibrationModel([0.0, 1.0], [1.0, 2.0], weights=[1.0, 2.0])
        with pytest.raises(ValueError):
            LocalizedProblem(m, 0.5)
        assert LocalizedProblem(m, 0.5, w_new=3.0).W == 6.0

    def test_dimension_mismatch(self):
        m = CalibrationModel(np.zeros((3, 2)), [1.0, 2.0, 3.0])
        with pytest.raises(ValueError, match="dimension"):
            eval_G1(0.5, m, [0.0], 1.0)


class TestEvalG1:
    def test_full_level_always_achieves_one(self, rng):
        for spec in SPECS:
            x, V, _ = random_instance(rng)
            m = CalibrationModel(x[:-1], V, spec, 0.8)
            a, ok = eval_G1(1.0, m, x[-1:], 1.7)
            assert a == 1.0 and ok

    def test_constant_at_alpha_with_max_score(self, rng):
        V = rng.permutation(np.arange(1.0, 10.0))
        m = CalibrationModel(rng.normal(size=9), V, LocalizerSpec(), 0.8)
        a, ok = eval_G1(0.8, m, [0.0], V.max())
        assert ok
        assert Fraction(a).limit_denominator(10) == g1_sum(
            oracle_rows(LocalizerSpec(), [0.0] * 10), list(V) + [V.max()], 0.8)

    def test_zero_level_misses(self):
        m = CalibrationModel([0.0, 1.0, 2.0], [1.0, 2.0, 3.0], LocalizerSpec(), 0.5)
        a, ok = eval_G1(0.0, m, [0.5], 4.0)
        assert a < 1 and not ok

    def test_matches_oracle(self, rng):
        for _ in range(300):
            spec = SPECS[rng.integers(len(SPECS))]
            x, V, w = random_instance(rng, weighted=rng.random() < 0.4)
            v_new = float(rng.choice([0.0, 1.0, INF, rng.exponential()]))
            level = float(rng.choice([0.3, 0.5, 0.8, 0.9, rng.random()]))
            m = CalibrationModel(x[:-1], V, spec, 0.8, weights=None if w is None else w[:-1])
            a, ok = eval_G1(level, m, x[-1:], v_new, None if w is None else w[-1])
            want = g1_sum(oracle_rows(spec, list(x)), list(V) + [v_new], level,
                          None if w is None else list(w))
            assert a == pytest.approx(float(want), abs=1e-12)
            assert ok == (want >= frac(0.8))

    def test_monotone_in_level(self, rng):
        for _ in range(50):
            spec = SPECS[rng.integers(len(SPECS))]
            x, V, _ = random_instance(rng, 15)
            prob = LocalizedProblem(CalibrationModel(x[:-1], V, spec), x[-1:])
            a = prob.g1_achieved(np.linspace(0.01, 1, 100), float(rng.exponential()))
            assert (np.diff(a) >= 0).all()

    def test_unit_weights_bit_exact(self, rng):
        for _ in range(50):
            spec = SPECS[rng.integers(len(SPECS))]
            x, V, _ = random_instance(rng, 20)
            grid = np.linspace(0.05, 1, 20)
            p0 = LocalizedProblem(CalibrationModel(x[:-1], V, spec), x[-1:])
            p1 = LocalizedProblem(CalibrationModel(x[:-1], V, spec, weights=np.ones(len(V))),
                                  x[-1:], 1.0)
            np.testing.assert_array_equal(p0.g1_achieved(grid, 1.0), p1.g1_achieved(grid, 1.0))
            for a, b in zip(p0.g2_sums(grid), p1.g2_sums(grid)):
                np.testing.assert_array_equal(a, b)


class TestEvalG2:
    def test_matches_oracle(self, rng):
        for _ in range(300):
            spec = SPECS[rng.integers(len(SPECS))]
            x, V, w = random_instance(rng, weighted=rng.random() < 0.4)
            level = float(rng.choice([0.2, 0.5, 0.8, 0.95, rng.random()]))
            m = CalibrationModel(x[:-1], V, spec, 0.8, weights=None if w is None else w[:-1])
            wit = eval_G2(level, m, x[-1:], None if w is None else w[-1])
            rows = oracle_rows(spec, list(x))
            s1, s2, vbar = g2_parts(rows, list(V), level, None if w is None else list(w))
            assert wit.bar_v_star == vbar
            assert wit.s1 == pytest.approx(float(s1), abs=1e-12)
            assert wit.s2 == pytest.approx(float(s2), abs=1e-12)
            assert wit.satisfied == (s1 >= frac(0.8) and s2 >= frac(0.8))
            assert wit.quantile_is_infinite == (vbar == INF)
            for i in range(len(V)):
                assert wit.v_star_1[i] == lower_quantile(level, list(V) + [vbar], rows[i])
                assert wit.v_star_2[i] == lower_quantile(level, list(V) + [0.0], rows[i])

    def test_constant_at_alpha_feasible(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 40))
            m = CalibrationModel(rng.normal(size=n), rng.exponential(size=n), alpha=0.9)
            wit = eval_G2(0.9, m, [0.0])
            assert wit.satisfied or wit.quantile_is_infinite

    def test_infinite_at_full_level(self):
        m = CalibrationModel([0.0, 1.0], [1.0, 2.0], alpha=0.5)
        assert eval_G2(1.0, m, [0.0]).quantile_is_infinite

    def test_hand_built_box_sweep(self):
        x = [0.0, 0.3, 0.6, 1.4, 2.0]
        V = [0.2, 1.0, 0.4, 2.5, 0.9]
        spec = LocalizerSpec("box", 0.5)
        grid = default_alpha_grid(0.8)
        m = CalibrationModel(x, V, spec, 0.8)
        for x_new in (0.1, 0.5, 1.2, 3.0):
            want, _ = first_feasible(oracle_rows(spec, x + [x_new]), V, 0.8, list(grid))
            assert grid_search_alpha(m, [x_new]) == want


class TestGridSearch:
    def test_fixed_seed_n20_matches_scan(self):
        rng = np.random.default_rng(2020)
        x = np.round(rng.normal(size=21), 2)
        V = np.round(np.abs(rng.normal(size=20)) * (1 + np.abs(x[:-1])), 2)
        for spec in (LocalizerSpec("box", 0.8), LocalizerSpec("knn", 6), LocalizerSpec("exp", 0.5)):
            m = CalibrationModel(x[:-1], V, spec, 0.9)
            want = first_feasible(oracle_rows(spec, list(x)), list(V), 0.9, list(m.alpha_grid))
            assert search_alpha(LocalizedProblem(m, x[-1:])) == want

    def test_constant_returns_at_most_alpha(self, rng):
        for alpha in (0.5, 0.8, 0.9, 0.95, 0.37):
            n = int(rng.integers(1, 60))
            m = CalibrationModel(rng.normal(size=n), rng.exponential(size=n), alpha=alpha)
            assert grid_search_alpha(m, [0.0]) <= alpha

    def test_point_mass_localizer(self, rng):
        x = np.arange(10.0) * 10
        m = CalibrationModel(x, rng.exponential(size=10), LocalizerSpec("box", 0.1), 0.9)
        at, q = search_alpha(LocalizedProblem(m, [55.0]))
        assert at == m.alpha_grid[0] and q == INF

    def test_no_feasible_level(self):
        m = CalibrationModel(np.arange(5.0), np.arange(1.0, 6.0), alpha=0.9,
                             alpha_grid=[0.1, 0.2, 0.3])
        with pytest.raises(NoFeasibleLevel) as exc:
            grid_search_alpha(m, [0.0])
        assert exc.value.best_alpha in (0.1, 0.2, 0.3)
        assert 0 < exc.value.achieved < 0.9


class TestRandomized:
    def _prob(self, rng, spec=LocalizerSpec(), n=30, alpha=0.8):
        x = rng.normal(size=n + 1)
        V = rng.exponential(size=n + 1)
        return LocalizedProblem(CalibrationModel(x[:-1], V[:-1], spec, alpha), x[-1:]), V[-1]

    def test_brackets_crossing(self, rng):
        prob, v = self._prob(rng)
        grid = np.arange(1, 2001) / 2000
        ach = prob.g1_achieved(grid, v)
        lo = randomized_level(prob, v, 0.999999)
        hi = randomized_level(prob, v, 0.0)
        j = int(np.argmax(ach >= 0.8))
        assert hi == grid[j]
        assert lo in (grid[j], grid[j - 1])

    def test_exact_hit_is_deterministic(self):
        # unit masses with n + 1 = 10: the achieved sum hits 0.8 exactly
        x = np.zeros(10)
        V = np.arange(1.0, 11.0)
        prob = LocalizedProblem(CalibrationModel(x[:-1], V[:-1], alpha=0.8), x[-1:])
        levels = {randomized_level(prob, V[-1], u) for u in np.linspace(0, 0.999, 50)}
        assert len(levels) == 1

    def test_rng_reproducible(self, rng):
        prob, v = self._prob(rng)
        m = prob.model
        a = randomized_alpha(m, [0.1], v, np.random.default_rng(3))
        b = randomized_alpha(m, [0.1], v, np.random.default_rng(3))
        assert a == b

    def test_exact_coverage_small_monte_carlo(self):
        rng = np.random.default_rng(11)
        hits, R = 0, 4000
        for _ in range(R):
            x = rng.normal(size=51)
            V = np.abs(rng.normal(size=51))
            prob = LocalizedProblem(CalibrationModel(x[:-1], V[:-1], alpha=0.8), x[-1:])
            level = randomized_level(prob, V[-1], rng.random())
            hits += prob.test_covered(level, V[-1])
        # 4 binomial sds at R = 4000
        assert abs(hits / R - 0.8) < 4 * math.sqrt(0.16 / R)
