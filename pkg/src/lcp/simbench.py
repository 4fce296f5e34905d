"""Synthetic generators and the Monte Carlo coverage harness.

Each repetition draws a fresh calibration set and a single test point from a
stream seeded by ``(seed, repetition)``; every method sees the same draw.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .calibration import (CalibrationModel, LocalizedProblem, NoFeasibleLevel,
                          default_alpha_grid, search_alpha)
from .core import INF
from .intervals import (AbsResidual, invert_abs_residual,
                        split_conformal_threshold, weighted_conformal_threshold)
from .learners import get_learner, ridge
from .localizers import LocalizerSpec, as_features, select_projection_axis
from .tuning import fmt, tune_bandwidth


@dataclass(frozen=True)
class Sample:
    X: np.ndarray
    Y: np.ndarray

    def __len__(self) -> int:
        return len(self.Y)


# -- generators ---------------------------------------------------------------

def example1_noise_sd(noise: str, x) -> np.ndarray:
    """Conditional standard deviation of the Example 1 noise at `x`."""
    ax = np.abs(np.asarray(x, dtype=float))
    if noise == "a":
        return np.ones_like(ax)
    if noise == "b":
        return 1.0 / (2.0 * ax + 1.0)
    if noise == "c":
        return ax / (ax + 1.0)
    raise ValueError(f"noise must be one of a, b, c; got {noise!r}")


def gen_example1(n: int, noise: str, rng: np.random.Generator) -> Sample:
    """``X ~ N(0, 1)``, ``Y = X + sd(X) * N(0, 1)`` with sd set by `noise` (a, b or c)."""
    x = rng.standard_normal(n)
    y = x + example1_noise_sd(noise, x) * rng.standard_normal(n)
    return Sample(x.reshape(-1, 1), y)


def counterexample2_probs(alpha: float) -> np.ndarray:
    """Probabilities of X = -1, 0, 1."""
    side = (1 - alpha) / (2 - alpha)
    return np.array([side, 1 - 2 * side, side])


def gen_counterexample2(n: int, alpha: float, rng: np.random.Generator) -> Sample:
    """Three-point X on {-1, 0, 1}; ``Y = X + Uniform(-2|X|, 2|X|)``."""
    x = rng.choice([-1.0, 0.0, 1.0], size=n, p=counterexample2_probs(alpha))
    y = x + rng.uniform(-1.0, 1.0, size=n) * 2.0 * np.abs(x)
    return Sample(x.reshape(-1, 1), y)


def shift_weight(x) -> np.ndarray:
    """Density ratio of N(3, 1) to N(0, 1): ``exp(3x - 4.5)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, 0]
    return np.exp(3.0 * x - 4.5)


def gen_covariate_shift(n: int, rng: np.random.Generator):
    """Training ``X ~ N(0, 1)``, test ``X ~ N(3, 1)``, ``Y = X + N(0, 1)``.

    Returns
    -------
    train : Sample
    draw_test : callable ``(rng, size) -> Sample``
    w : callable, the density ratio
    """
    x = rng.standard_normal(n)
    train = Sample(x.reshape(-1, 1), x + rng.standard_normal(n))

    def draw_test(rng: np.random.Generator, size: int = 1) -> Sample:
        xt = 3.0 + rng.standard_normal(size)
        return Sample(xt.reshape(-1, 1), xt + rng.standard_normal(size))

    return train, draw_test, shift_weight


def highdim_beta(p: int) -> np.ndarray:
    beta = np.zeros(p)
    beta[: min(3, p)] = 1.0
    return beta


def gen_highdim(n: int, p: int, case: str, rng: np.random.Generator) -> Sample:
    """``X ~ Unif[-3, 3]^p``, ``Y = X @ (1, 1, 1, 0, ...) + eps``.

    Case ``a``: unit-variance noise. Case ``b``: sd 0.5 where ``|X_p| <= 1``,
    sd 2 elsewhere.
    """
    if case not in ("a", "b"):
        raise ValueError(f"case must be 'a' or 'b', got {case!r}")
    X = rng.uniform(-3.0, 3.0, size=(n, p))
    sd = np.ones(n) if case == "a" else np.where(np.abs(X[:, -1]) <= 1.0, 0.5, 2.0)
    return Sample(X, X @ highdim_beta(p) + sd * rng.standard_normal(n))


GENERATORS = ("example1a", "example1b", "example1c", "counterexample2", "covshift",
              "highdima", "highdimb")


# -- experiment configuration ---------------------------------------------------

@dataclass(frozen=True)
class Method:
    """Parsed method string.

    ``cb`` split conformal, ``wcb`` importance-weighted conformal,
    ``lcb-<loc>`` localized with the level search, ``wlcb-<loc>`` the same with
    importance weights, ``naive-<loc>`` localized at ``alpha_tilde = alpha``.
    ``<loc>`` is a localizer string such as ``box:1`` or ``knn:auto``.
    """

    name: str
    family: str
    kind: str | None = None
    h: float | None = None
    axis: int | str | None = None

    @property
    def auto(self) -> bool:
        return self.family not in ("cb", "wcb") and self.h is None and self.kind != "constant"

    @classmethod
    def parse(cls, text: str) -> "Method":
        text = text.strip()
        if text in ("cb", "wcb"):
            return cls(text, text)
        family, sep, loc = text.partition("-")
        if not sep or family not in ("lcb", "wlcb", "naive"):
            raise ValueError(f"unknown method {text!r}")
        axis = None
        if "@" in loc:
            loc, ax = loc.split("@", 1)
            axis = ax if ax == "mi" else int(ax)
        kind, _, h = loc.partition(":")
        spec_kind = LocalizerSpec(kind, 1.0).kind
        if spec_kind == "constant":
            return cls(text, family, spec_kind, 1.0, axis)
        if not h:
            raise ValueError(f"method {text!r} needs a bandwidth or 'auto'")
        return cls(text, family, spec_kind, None if h == "auto" else float(h), axis)


@dataclass(frozen=True)
class ExperimentConfig:
    generator: str
    n: int = 500
    repetitions: int = 1000
    alphas: tuple[float, ...] = (0.95,)
    methods: tuple[str, ...] = ("cb",)
    seed: int = 0
    gen_params: dict = field(default_factory=dict)
    grid_size: int = 200
    n_jobs: int = 1

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        for a in self.alphas:
            if not 0 < a < 1:
                raise ValueError(f"alpha must lie in (0, 1), got {a}")
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "methods", tuple(self.methods))
        for m in self.methods:
            Method.parse(m)


@dataclass
class Draw:
    cal: Sample
    test: Sample
    score: AbsResidual
    weight_fn: Callable | None = None


def _fixed_score():
    return AbsResidual(lambda X: X[:, 0])


def draw_instance(cfg: ExperimentConfig, rng: np.random.Generator) -> Draw:
    """One calibration set plus one test point for `cfg.generator`."""
    g, n = cfg.generator, cfg.n
    if g.startswith("example1"):
        s = gen_example1(n + 1, g[-1], rng)
        return Draw(Sample(s.X[:n], s.Y[:n]), Sample(s.X[n:], s.Y[n:]), _fixed_score())
    if g == "counterexample2":
        s = gen_counterexample2(n + 1, cfg.gen_params.get("alpha", 0.8), rng)
        return Draw(Sample(s.X[:n], s.Y[:n]), Sample(s.X[n:], s.Y[n:]), _fixed_score())
    if g == "covshift":
        train, draw_test, w = gen_covariate_shift(n, rng)
        return Draw(train, draw_test(rng, 1), _fixed_score(), w)
    p = int(cfg.gen_params.get("p", 3))
    case = g[-1]
    fit = gen_highdim(n, p, case, rng)
    s = gen_highdim(n + 1, p, case, rng)
    mu = ridge(float(cfg.gen_params.get("ridge", 1.0)))(fit.X, fit.Y)
    return Draw(Sample(s.X[:n], s.Y[:n]), Sample(s.X[n:], s.Y[n:]), AbsResidual(mu))


# -- results ------------------------------------------------------------------

@dataclass
class RepRecords:
    """Per-repetition outcomes for one (method, alpha)."""

    x: np.ndarray
    y: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    alpha_tilde: np.ndarray
    failed: np.ndarray

    @property
    def covered(self) -> np.ndarray:
        return (self.lo <= self.y) & (self.y <= self.hi)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass
class CoverageRow:
    method: str
    alpha: float
    generator: str
    h: float | None
    coverage: float
    se: float
    mean_width: float
    inf_frac: float
    failures: int = 0


@dataclass
class CoverageTable:
    rows: list[CoverageRow]
    records: dict[tuple[str, float], RepRecords] = field(default_factory=dict, repr=False)

    COLUMNS = ("method", "alpha", "generator", "h", "coverage", "se", "mean_width", "inf_frac")

    def row(self, method: str, alpha: float) -> CoverageRow:
        for r in self.rows:
            if r.method == method and r.alpha == alpha:
                return r
        raise KeyError((method, alpha))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.method, fmt(r.alpha), r.generator, "" if r.h is None else fmt(r.h),
                        fmt(r.coverage), fmt(r.se), fmt(r.mean_width), fmt(r.inf_frac)])
        return buf.getvalue()


def summarize(records: RepRecords) -> tuple[float, float, float, float, int]:
    """(coverage, binomial se, mean finite width, infinite fraction, failures)."""
    ok = ~records.failed
    k = int(ok.sum())
    if k == 0:
        return math.nan, math.nan, math.nan, math.nan, len(ok)
    cov = float(records.covered[ok].mean())
    se = math.sqrt(cov * (1 - cov) / k)
    w = records.width[ok]
    fin = np.isfinite(w)
    mean_w = float(w[fin].mean()) if fin.any() else INF
    return cov, se, mean_w, float(1 - fin.mean()), len(ok) - k


# -- the harness --------------------------------------------------------------

DEFAULT_H_GRIDS = {
    "distance_box": (0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0),
    "gaussian": (0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0),
    "exponential": (0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0),
    "knn": (20, 40, 80, 160, 320, 500),
}


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0, rep]))


def tuning_rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, key]))


def _resolve(cfg: ExperimentConfig, method: Method, alpha: float, key: int) -> LocalizerSpec | None:
    """Localizer for one method, tuning bandwidth and axis on an independent draw if asked."""
    if method.family in ("cb", "wcb"):
        return None
    h, axis = method.h, method.axis
    weight_fn = None
    if method.kind == "shift_knn":
        if cfg.generator != "covshift":
            raise ValueError("shift_knn needs the covshift generator")
        weight_fn = shift_weight
    if method.auto or axis == "mi":
        rng = tuning_rng(cfg.seed, key)
        d0 = draw_instance(cfg, rng).cal
        v0 = _tuning_scores(cfg, d0, rng)
        if axis == "mi":
            axis = select_projection_axis(d0.X, v0)
        if method.auto:
            grid = [g for g in DEFAULT_H_GRIDS[method.kind] if method.kind != "knn" or g < cfg.n]
            if method.kind == "knn":
                grid.append(cfg.n)
            h = tune_bandwidth(d0.X, v0, grid, alpha, method.kind, rng=rng, axis=axis).selected_h
    return LocalizerSpec(method.kind, h, axis, weight_fn)


def _tuning_scores(cfg: ExperimentConfig, d0: Sample, rng) -> np.ndarray:
    if cfg.generator.startswith("highdim"):
        return cv_scores(d0.X, d0.Y, 5, ridge(float(cfg.gen_params.get("ridge", 1.0))), rng)
    return np.abs(d0.Y - d0.X[:, 0])


def _run_rep(cfg: ExperimentConfig, methods: list[Method], specs: dict, rep: int) -> dict:
    d = draw_instance(cfg, rep_rng(cfg.seed, rep))
    x_new = d.test.X[0]
    y_new = float(d.test.Y[0])
    V = d.score(d.cal.X, d.cal.Y)
    w_cal = w_new = None
    if d.weight_fn is not None:
        w_cal = d.weight_fn(d.cal.X)
        w_new = float(d.weight_fn(d.test.X)[0])
    problems: dict = {}

    def problem(m: Method, spec: LocalizerSpec, a: float) -> LocalizedProblem:
        weighted = m.family == "wlcb" or m.kind == "shift_knn"
        key = (spec, weighted)
        if key not in problems:
            if weighted and w_cal is None:
                raise ValueError(f"{m.name} needs a generator with importance weights")
            model = CalibrationModel(d.cal.X, V, spec, a, weights=w_cal if weighted else None)
            problems[key] = LocalizedProblem(model, x_new, w_new if weighted else None)
        return problems[key]

    out = {}
    for m in methods:
        for a in cfg.alphas:
            at = a
            try:
                if m.family == "cb":
                    q = split_conformal_threshold(V, a)
                elif m.family == "wcb":
                    if w_cal is None:
                        raise ValueError("wcb needs a generator with importance weights")
                    q = weighted_conformal_threshold(V, np.append(w_cal, w_new), a)
                else:
                    prob = problem(m, specs[(m.name, a)], a)
                    if m.family == "naive":
                        q = float(prob.vbar([a])[0])
                    else:
                        at, q = search_alpha_at(prob, a, cfg.grid_size)
                iv = invert_abs_residual(d.score, x_new, q, at)
                out[(m.name, a)] = (iv.lo, iv.hi, at, False)
            except (NoFeasibleLevel, ValueError, ArithmeticError):
                out[(m.name, a)] = (math.nan, math.nan, math.nan, True)
    return {"x": float(x_new[0]), "y": y_new, "res": out}


def search_alpha_at(prob: LocalizedProblem, alpha: float, grid_size: int = 200):
    """Level search for `alpha` on the default grid, reusing the kernel in `prob`."""
    model = prob.model
    grid = default_alpha_grid(alpha, grid_size)
    if model.alpha != alpha or not np.array_equal(model.alpha_grid, grid):
        prob.model = CalibrationModel(model.X, model.scores, model.localizer, alpha, grid,
                                      model.weights, model.weight_fn)
    try:
        return search_alpha(prob)
    finally:
        prob.model = model


def run_coverage_experiment(cfg: ExperimentConfig) -> CoverageTable:
    """Coverage, width and infinite-interval statistics for every (method, alpha).

    Failures (e.g. no feasible level) are recorded per repetition and excluded
    from the coverage estimate.
    """
    methods = [Method.parse(m) for m in cfg.methods]
    specs = {}
    for k, m in enumerate(methods):
        for j, a in enumerate(cfg.alphas):
            specs[(m.name, a)] = _resolve(cfg, m, a, k * 1000 + j)
    reps = range(cfg.repetitions)
    if cfg.n_jobs == 1:
        results = [_run_rep(cfg, methods, specs, r) for r in reps]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_run_rep)(cfg, methods, specs, r) for r in reps)
    x = np.array([r["x"] for r in results])
    y = np.array([r["y"] for r in results])
    table = CoverageTable([])
    for m in methods:
        for a in cfg.alphas:
            res = np.array([r["res"][(m.name, a)] for r in results], dtype=float)
            rec = RepRecords(x, y, res[:, 0], res[:, 1], res[:, 2], res[:, 3].astype(bool))
            table.records[(m.name, a)] = rec
            cov, se, mw, inf_frac, fails = summarize(rec)
            spec = specs[(m.name, a)]
            h = None if spec is None or spec.kind == "constant" else spec.h
            table.rows.append(CoverageRow(m.name, a, cfg.generator, h, cov, se, mw,
                                          inf_frac, fails))
    return table


# -- cross-validated scores -----------------------------------------------------

def cv_scores(X, Y, folds: int, learner, rng: np.random.Generator | None = None) -> np.ndarray:
    """``|Y_i - mu^{-fold(i)}(X_i)|`` with `learner` refit on the other folds.

    Folds are contiguous blocks of a random permutation (identity order when
    `rng` is None).
    """
    X = as_features(X)
    Y = np.asarray(Y, dtype=float).ravel()
    m = len(Y)
    if folds < 2 or folds > m:
        raise ValueError(f"need 2 <= folds <= {m}, got {folds}")
    if isinstance(learner, str):
        learner = get_learner(learner)
    idx = np.arange(m) if rng is None else rng.permutation(m)
    out = np.empty(m)
    for k, test in enumerate(np.array_split(idx, folds)):
        train = np.setdiff1d(idx, test)
        try:
            mu = learner(X[train], Y[train])
            out[test] = np.abs(Y[test] - np.asarray(mu(X[test]), dtype=float))
        except Exception as exc:
            raise RuntimeError(f"learner failed on fold {k} ({len(test)} held-out rows): {exc}") from exc
    return out
