import math

import numpy as np
import pytest

from lcp.learners import constant, least_squares, ridge
from lcp.simbench import (CoverageTable, ExperimentConfig, Method, counterexample2_probs,
                          cv_scores, example1_noise_sd, gen_counterexample2,
                          gen_covariate_shift, gen_example1, gen_highdim, run_coverage_experiment,
                          shift_weight)


class TestGenerators:
    def test_example1_noise_sd(self):
        assert example1_noise_sd("a", 3.0) == 1.0
        assert example1_noise_sd("b", 0.0) == 1.0
        assert example1_noise_sd("c", 0.0) == 0.0
        assert example1_noise_sd("c", 1.0) == 0.5
        with pytest.raises(ValueError):
            example1_noise_sd("d", 0.0)

    def test_example1_shapes_and_noise(self, rng):
        s = gen_example1(20000, "a", rng)
        assert s.X.shape == (20000, 1) and len(s) == 20000
        assert np.std(s.Y - s.X[:, 0]) == pytest.approx(1.0, abs=0.03)

    def test_example1_c_zero_at_origin(self):
        # sd |x|/(|x|+1) vanishes at x = 0
        assert example1_noise_sd("c", np.array([0.0]))[0] == 0.0

    def test_counterexample2_weights(self):
        np.testing.assert_allclose(counterexample2_probs(0.8), [1 / 6, 2 / 3, 1 / 6])

    def test_counterexample2_frequencies(self, rng):
        N = 100_000
        s = gen_counterexample2(N, 0.8, rng)
        p = counterexample2_probs(0.8)
        for v, pv in zip((-1.0, 0.0, 1.0), p):
            k = np.sum(s.X[:, 0] == v)
            assert abs(k / N - pv) < 3 * math.sqrt(pv * (1 - pv) / N)

    def test_counterexample2_zero_is_exact(self, rng):
        s = gen_counterexample2(1000, 0.8, rng)
        zero = s.X[:, 0] == 0
        assert (s.Y[zero] == 0).all()
        assert (np.abs(s.Y - s.X[:, 0]) <= 2 * np.abs(s.X[:, 0])).all()

    def test_shift_weight(self):
        assert shift_weight(1.5)[()] == pytest.approx(1.0)
        assert shift_weight(0.0)[()] == pytest.approx(math.exp(-4.5))

    def test_shift_weight_mean_one(self, rng):
        train, draw_test, w = gen_covariate_shift(100_000, rng)
        assert abs(w(train.X).mean() - 1) < 0.05
        t = draw_test(rng, 5000)
        assert t.X.mean() == pytest.approx(3.0, abs=0.1)

    def test_highdim(self, rng):
        s = gen_highdim(2000, 5, "b", rng)
        assert s.X.shape == (2000, 5) and np.abs(s.X).max() <= 3
        eps = s.Y - s.X[:, :3].sum(1)
        inner = np.abs(s.X[:, -1]) <= 1
        assert np.std(eps[inner]) == pytest.approx(0.5, abs=0.06)
        assert np.std(eps[~inner]) == pytest.approx(2.0, abs=0.15)
        a = gen_highdim(20000, 3, "a", rng)
        assert np.std(a.Y - a.X.sum(1)) == pytest.approx(1.0, abs=0.03)
        with pytest.raises(ValueError):
            gen_highdim(10, 3, "z", rng)


class TestMethod:
    @pytest.mark.parametrize("text,family,kind,h,axis", [
        ("cb", "cb", None, None, None),
        ("wcb", "wcb", None, None, None),
        ("lcb-box:1", "lcb", "distance_box", 1.0, None),
        ("naive-exp:0.001", "naive", "exponential", 0.001, None),
        ("lcb-knn:auto", "lcb", "knn", None, None),
        ("wlcb-gauss:0.3@1", "wlcb", "gaussian", 0.3, 1),
        ("lcb-box:auto@mi", "lcb", "distance_box", None, "mi"),
        ("lcb-const", "lcb", "constant", 1.0, None),
    ])
    def test_parse(self, text, family, kind, h, axis):
        m = Method.parse(text)
        assert (m.family, m.kind, m.h, m.axis) == (family, kind, h, axis)

    @pytest.mark.parametrize("text", ["foo", "lcb-", "lcb-box", "xx-box:1", "lcb-nope:1"])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            Method.parse(text)


class TestExperiment:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig("nope")
        with pytest.raises(ValueError):
            ExperimentConfig("example1a", repetitions=0)
        with pytest.raises(ValueError):
            ExperimentConfig("example1a", alphas=(1.0,))

    def test_single_rep(self):
        t = run_coverage_experiment(ExperimentConfig("example1a", 50, 1, (0.9,),
                                                     ("cb", "lcb-box:1"), seed=3))
        assert len(t.rows) == 2
        assert all(r.coverage in (0.0, 1.0) for r in t.rows)

    def test_deterministic(self):
        cfg = ExperimentConfig("example1b", 60, 15, (0.8, 0.9), ("cb", "lcb-knn:10"), seed=9)
        assert run_coverage_experiment(cfg).to_csv() == run_coverage_experiment(cfg).to_csv()

    def test_seed_changes_draws(self):
        a = run_coverage_experiment(ExperimentConfig("example1b", 60, 15, seed=1))
        b = run_coverage_experiment(ExperimentConfig("example1b", 60, 15, seed=2))
        assert a.to_csv() != b.to_csv()

    def test_tiny_n_high_alpha_infinite(self):
        t = run_coverage_experiment(ExperimentConfig("example1a", 5, 20, (0.999,),
                                                     ("cb", "lcb-box:1", "lcb-knn:2"), seed=0))
        for r in t.rows:
            assert r.coverage == 1.0 and r.inf_frac == 1.0
            assert r.mean_width == math.inf

    def test_failures_recorded_not_fatal(self):
        t = run_coverage_experiment(ExperimentConfig("example1a", 30, 4, (0.9,), ("cb", "wcb"),
                                                     seed=0))
        assert t.row("wcb", 0.9).failures == 4
        assert math.isnan(t.row("wcb", 0.9).coverage)
        assert t.row("cb", 0.9).failures == 0

    def test_csv_layout(self):
        t = run_coverage_experiment(ExperimentConfig("example1a", 5, 3, (0.999,),
                                                     ("cb", "lcb-box:1"), seed=0))
        lines = t.to_csv().splitlines()
        assert lines[0] == ",".join(CoverageTable.COLUMNS)
        assert lines[1].split(",")[3] == ""
        assert lines[2].split(",")[3] == "1"
        assert lines[1].split(",")[6] == "inf"

    def test_all_methods_share_draw(self):
        t = run_coverage_experiment(ExperimentConfig("covshift", 80, 5, (0.9,),
                                                     ("wcb", "lcb-shiftknn:60", "wlcb-box:1"),
                                                     seed=4))
        ys = {tuple(r.y) for r in t.records.values()}
        assert len(ys) == 1

    def test_auto_bandwidth(self):
        t = run_coverage_experiment(ExperimentConfig("example1a", 100, 3, (0.9,),
                                                     ("lcb-box:auto",), seed=0))
        assert t.rows[0].h in (0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0)

    def test_highdim_with_axis(self):
        t = run_coverage_experiment(ExperimentConfig(
            "highdimb", 100, 3, (0.9,), ("cb", "lcb-box:1@mi"), seed=0, gen_params={"p": 4}))
        assert t.row("lcb-box:1@mi", 0.9).failures == 0

    def test_shift_knn_needs_covshift(self):
        with pytest.raises(ValueError):
            run_coverage_experiment(ExperimentConfig("example1a", 20, 1, (0.9,),
                                                     ("lcb-shiftknn:5",)))

    def test_parallel_matches_serial(self):
        pytest.importorskip("joblib")
        base = dict(generator="example1c", n=40, repetitions=6, alphas=(0.9,),
                    methods=("cb", "lcb-box:0.5"), seed=2)
        a = run_coverage_experiment(ExperimentConfig(**base)).to_csv()
        b = run_coverage_experiment(ExperimentConfig(**base, n_jobs=2)).to_csv()
        assert a == b


class TestCvScores:
    def test_zero_learner(self, rng):
        X = rng.normal(size=(30, 2))
        Y = rng.normal(size=30)
        np.testing.assert_array_equal(cv_scores(X, Y, 5, constant(0.0)), np.abs(Y))

    def test_noiseless_linear(self, rng):
        X = rng.normal(size=(200, 3))
        Y = X @ [1.0, -2.0, 0.5] + 3.0
        assert cv_scores(X, Y, 5, least_squares, rng).max() < 1e-8

    def test_hand_rolled_oracle(self):
        rng = np.random.default_rng(50)
        X = rng.normal(size=(50, 2))
        Y = X[:, 0] + rng.normal(size=50)
        perm_rng = np.random.default_rng(8)
        got = cv_scores(X, Y, 5, ridge(0.5), np.random.default_rng(8))
        idx = perm_rng.permutation(50)
        want = np.empty(50)
        for k in range(5):
            test = idx[k * 10:(k + 1) * 10]
            train = np.array([i for i in range(50) if i not in set(test)])
            # closed-form ridge with centered data
            xm, ym = X[train].mean(0), Y[train].mean()
            Xc = X[train] - xm
            beta = np.linalg.solve(Xc.T @ Xc + 0.5 * np.eye(2), Xc.T @ (Y[train] - ym))
            want[test] = np.abs(Y[test] - (ym + (X[test] - xm) @ beta))
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_learner_failure(self, rng):
        def bad(X, Y):
            raise np.linalg.LinAlgError("singular")
        with pytest.raises(RuntimeError, match="fold 0"):
            cv_scores(rng.normal(size=(10, 1)), rng.normal(size=10), 2, bad)

    def test_fold_count(self, rng):
        with pytest.raises(ValueError):
            cv_scores(rng.normal(size=(10, 1)), rng.normal(size=10), 1, least_squares)

    def test_learner_by_name(self, rng):
        X = rng.normal(size=(20, 1))
        Y = rng.normal(size=20)
        np.testing.assert_array_equal(cv_scores(X, Y, 4, "zero"), np.abs(Y))
