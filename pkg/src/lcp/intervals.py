"""Prediction sets from localized thresholds, plus the conformal baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .calibration import (CalibrationModel, LocalizedProblem, NoFeasibleLevel,  # noqa: F401
                          search_alpha)
from .core import INF, augmented, weighted_quantile
from .localizers import LocalizerSpec, as_features


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]``; either end may be infinite."""

    lo: float
    hi: float
    threshold: float = math.nan
    alpha_tilde: float = math.nan

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"interval needs lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.lo) or math.isinf(self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, y) -> bool | np.ndarray:
        return (self.lo <= y) & (y <= self.hi)


@dataclass(frozen=True)
class GridSet:
    """Membership of a prediction set on a y-grid."""

    grid: np.ndarray
    member: np.ndarray
    undecided: np.ndarray | None = None

    def __post_init__(self):
        if np.shape(self.grid) != np.shape(self.member):
            raise ValueError("grid and membership vectors must have equal length")

    def contains(self, y: float) -> bool:
        hit = np.flatnonzero(self.grid == y)
        if hit.size == 0:
            raise KeyError(f"{y!r} is not a grid point")
        return bool(self.member[hit[0]])


PredictionSet = Union[Interval, GridSet]


@dataclass(frozen=True)
class AbsResidual:
    """``V(x, y) = |y - mu(x)|`` for a fixed predictor ``mu``."""

    mu: Callable[[np.ndarray], np.ndarray]

    def predict(self, x) -> np.ndarray:
        return np.asarray(self.mu(as_features(x)), dtype=float).reshape(-1)

    def __call__(self, x, y):
        mu = self.predict(x)
        return np.abs(np.asarray(y, dtype=float) - (mu[0] if mu.size == 1 else mu))


@dataclass(frozen=True)
class CustomScore:
    """Arbitrary score ``fn(x, y) -> nonnegative``; evaluated on (1, p) x and a y-array."""

    fn: Callable = field(compare=False)

    def __call__(self, x, y):
        return np.asarray(self.fn(as_features(x), np.asarray(y, dtype=float)), dtype=float)


ScoreFunction = Union[AbsResidual, CustomScore]


def identity_predictor(axis: int = 0) -> AbsResidual:
    """Score ``|y - x[axis]|``."""
    return AbsResidual(lambda X: X[:, axis])


def invert_abs_residual(score: ScoreFunction, x_new, q: float, alpha_tilde=math.nan) -> Interval:
    if not isinstance(score, AbsResidual):
        raise TypeError("closed-form inversion needs an AbsResidual score; use lcp_set_generic")
    if math.isinf(q):
        return Interval(-INF, INF, q, alpha_tilde)
    mu = float(score.predict(np.asarray(x_new, dtype=float).reshape(1, -1))[0])
    return Interval(mu - q, mu + q, q, alpha_tilde)


def lcp_threshold(model: CalibrationModel, x_new, w_new: float | None = None) -> tuple[float, float]:
    """(alpha_tilde, Q(alpha_tilde; F_hat)) from the grid search."""
    return search_alpha(LocalizedProblem(model, x_new, w_new))


def lcp_interval(model: CalibrationModel, x_new, score: ScoreFunction,
                 w_new: float | None = None) -> Interval:
    """Localized conformal interval for an absolute-residual score.

    Raises
    ------
    NoFeasibleLevel
        Propagated from the level search.
    """
    at, q = lcp_threshold(model, x_new, w_new)
    return invert_abs_residual(score, x_new, q, at)


def lcp_set_generic(model: CalibrationModel, x_new, score: ScoreFunction, y_grid,
                    w_new: float | None = None) -> GridSet:
    """Grid membership ``V(x_new, y) <= Q(alpha_tilde; F_hat)`` for any score."""
    y_grid = np.asarray(y_grid, dtype=float).ravel()
    if y_grid.size == 0:
        raise ValueError("y_grid is empty")
    if (np.diff(y_grid) < 0).any():
        raise ValueError("y_grid must be sorted")
    at, q = lcp_threshold(model, x_new, w_new)
    v = np.asarray(score(np.asarray(x_new, dtype=float).reshape(1, -1), y_grid), dtype=float)
    return GridSet(y_grid, v <= q)


def local_coverage_interval(model: CalibrationModel, x_new, score: ScoreFunction) -> Interval:
    """Interval at ``alpha_tilde = alpha`` for a data-independent localizer.

    Covers a draw from the kernel-tilted feature distribution around `x_new`
    with probability at least alpha. The smoothness conditions behind the
    shrinking-bandwidth limit are not checked.
    """
    if model.localizer.data_dependent:
        raise ValueError(
            f"local coverage needs a data-independent localizer, got {model.localizer.kind}")
    prob = LocalizedProblem(model, x_new)
    q = float(prob.vbar([model.alpha])[0])
    return invert_abs_residual(score, x_new, q, model.alpha)


def naive_interval(model: CalibrationModel, x_new, score: ScoreFunction,
                   w_new: float | None = None) -> Interval:
    """Localized interval with ``alpha_tilde = alpha`` and no calibration (any localizer)."""
    prob = LocalizedProblem(model, x_new, w_new)
    return invert_abs_residual(score, x_new, float(prob.vbar([model.alpha])[0]), model.alpha)


def split_conformal_threshold(scores: Sequence[float], alpha: float) -> float:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("need at least one calibration score")
    return weighted_quantile(alpha, augmented(scores))


def split_conformal_interval(scores, alpha: float, x_new, score: ScoreFunction) -> Interval:
    """``Q(alpha; V_1..V_n, inf)`` inverted around ``mu(x_new)``."""
    return invert_abs_residual(score, x_new, split_conformal_threshold(scores, alpha), alpha)


def weighted_conformal_threshold(scores, weights, alpha: float) -> float:
    scores = np.asarray(scores, dtype=float)
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != scores.size + 1:
        raise ValueError("need n + 1 importance weights (calibration points, then test point)")
    if not np.isfinite(w).all() or (w <= 0).any():
        raise ValueError("importance weights must be positive and finite")
    return weighted_quantile(alpha, augmented(scores, w))


def weighted_conformal_interval(scores, weights, alpha: float, x_new,
                                score: ScoreFunction) -> Interval:
    """Covariate-shift conformal interval; `weights` are ``w(X_1..X_n), w(x_new)``."""
    return invert_abs_residual(
        score, x_new, weighted_conformal_threshold(scores, weights, alpha), alpha)


def exact_lcp_set_datadep(trainer: Callable, X, Y, x_new, y_grid, alpha: float,
                          localizer: LocalizerSpec | None = None,
                          alpha_grid=None, weights=None, w_new: float | None = None) -> GridSet:
    """Full-refit localized conformal set on a y-grid (desk scale only).

    For each candidate ``y`` the score is retrained on the augmented data,
    ``alpha_tilde(y)`` is the smallest grid level whose G1 sum reaches alpha,
    and ``y`` is kept when its score is at most ``Q(alpha_tilde(y); F_hat)``.

    Parameters
    ----------
    trainer : callable
        ``trainer(X, Y) -> score`` where ``score(X, Y)`` returns one score per
        row. Must not depend on the row order.
    """
    X = as_features(X)
    Y = np.asarray(Y, dtype=float).ravel()
    y_grid = np.asarray(y_grid, dtype=float).ravel()
    x_new = np.asarray(x_new, dtype=float).reshape(1, -1)
    n = len(Y)
    model = CalibrationModel(X, np.zeros(n), localizer or LocalizerSpec(), alpha,
                             alpha_grid, weights)
    prob = LocalizedProblem(model, x_new, w_new)
    grid = model.alpha_grid
    Xa = np.vstack([X, x_new])
    member = np.zeros(y_grid.size, dtype=bool)
    undecided = np.zeros(y_grid.size, dtype=bool)
    for k, y in enumerate(y_grid):
        try:
            score = trainer(Xa, np.append(Y, y))
            V = np.asarray(score(Xa, np.append(Y, y)), dtype=float).ravel()
            if V.size != n + 1 or np.isnan(V).any() or (V < 0).any():
                raise ValueError("trainer produced invalid scores")
        except Exception:
            undecided[k] = True
            continue
        prob.set_scores(V[:n])
        ok = prob.g1_achieved(grid, V[n]) >= alpha
        if not ok.any():
            undecided[k] = True
            continue
        at = grid[int(ok.argmax())]
        member[k] = V[n] <= prob.vbar([at])[0]
    return GridSet(y_grid, member, undecided)


__all__ = [
    "AbsResidual", "CustomScore", "GridSet", "Interval", "NoFeasibleLevel", "PredictionSet",
    "ScoreFunction", "exact_lcp_set_datadep", "identity_predictor", "invert_abs_residual",
    "lcp_interval", "lcp_set_generic", "lcp_threshold", "local_coverage_interval",
    "naive_interval", "split_conformal_interval", "split_conformal_threshold",
    "weighted_conformal_interval", "weighted_conformal_threshold",
]
