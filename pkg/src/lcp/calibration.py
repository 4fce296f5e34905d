"""Choosing the effective level ``alpha_tilde`` for localized conformal prediction.

Every calibration point ``i`` (and the test point, index ``n``) gets its own
localized score distribution ``F_i = sum_j p[i, j] delta(V_j)``. The checks
below only ever ask whether ``V_i <= Q(alpha_tilde; F_i)``, and for a lower
quantile that holds exactly when the probability strictly below ``V_i`` is
``< alpha_tilde``. Prefix sums of each kernel row over the sorted scores give
those probabilities for a whole grid of levels at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import INF
from .localizers import (LocalizerSpec, as_features, kernel_from_distances,
                         pairwise_distances, _project)


def default_alpha_grid(alpha: float, size: int = 200) -> np.ndarray:
    """``size`` evenly spaced levels on (0, 1] plus `alpha`, sorted and deduplicated."""
    if size < 1:
        raise ValueError("grid size must be at least 1")
    return np.unique(np.append(np.arange(1, size + 1) / size, float(alpha)))


class NoFeasibleLevel(RuntimeError):
    """No grid level satisfies the coverage condition.

    Attributes
    ----------
    best_alpha : float
        Grid level with the largest achieved worst-case coverage sum.
    achieved : float
        That sum.
    """

    def __init__(self, best_alpha: float, achieved: float):
        super().__init__(
            f"no feasible level on the grid (best alpha_tilde={best_alpha:g}, "
            f"achieved {achieved:.4f})")
        self.best_alpha = best_alpha
        self.achieved = achieved


@dataclass(frozen=True)
class CalibrationModel:
    """Calibration features and scores plus everything needed to localize them.

    Parameters
    ----------
    X : array-like (n, p)
    scores : array-like (n,)
        Nonnegative calibration scores ``V_1..V_n``.
    localizer : LocalizerSpec
    alpha : float
        Target coverage level in (0, 1).
    alpha_grid : array-like, optional
        Strictly increasing candidate levels in (0, 1]. Defaults to
        :func:`default_alpha_grid`.
    weights : array-like (n,), optional
        Importance weights ``w(X_i)`` of the calibration points (covariate
        shift). All ones when omitted.
    weight_fn : callable, optional
        ``w(x)`` for test points; used when a query does not pass ``w_new``.
    """

    X: np.ndarray
    scores: np.ndarray
    localizer: LocalizerSpec = field(default_factory=LocalizerSpec)
    alpha: float = 0.9
    alpha_grid: np.ndarray | None = None
    weights: np.ndarray | None = None
    weight_fn: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        X = as_features(self.X)
        V = np.asarray(self.scores, dtype=float).ravel()
        if V.size < 1 or V.size != X.shape[0]:
            raise ValueError(f"need n >= 1 scores matching {X.shape[0]} feature rows, got {V.size}")
        if np.isnan(V).any() or (V < 0).any():
            raise ValueError("scores must be nonnegative")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        grid = (default_alpha_grid(self.alpha) if self.alpha_grid is None
                else np.asarray(self.alpha_grid, dtype=float).ravel())
        if grid.size == 0 or (grid <= 0).any() or (grid > 1).any():
            raise ValueError("alpha grid must be nonempty with values in (0, 1]")
        if (np.diff(grid) <= 0).any():
            raise ValueError("alpha grid must be strictly increasing")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.size != V.size or not np.isfinite(w).all() or (w <= 0).any():
                raise ValueError("importance weights must be positive, one per calibration point")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
        for a in (X, V, grid):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "scores", V)
        object.__setattr__(self, "alpha_grid", grid)

    @property
    def n(self) -> int:
        return self.scores.size

    @property
    def weighted(self) -> bool:
        return self.weights is not None or self.weight_fn is not None

    def test_weight(self, x_new, w_new: float | None = None) -> float:
        if w_new is not None:
            w_new = float(w_new)
        elif self.weight_fn is not None:
            w_new = float(np.asarray(self.weight_fn(as_features(x_new).reshape(1, -1))).ravel()[0])
        elif self.weights is None:
            return 1.0
        else:
            raise ValueError("model has importance weights; pass w_new or set weight_fn")
        if not (w_new > 0 and math.isfinite(w_new)):
            raise ValueError(f"test importance weight must be positive, got {w_new}")
        return w_new

    def with_scores(self, scores) -> "CalibrationModel":
        return CalibrationModel(self.X, scores, self.localizer, self.alpha,
                                self.alpha_grid, self.weights, self.weight_fn)


class LocalizedProblem:
    """Kernel rows for one test point, reusable across score vectors and levels.

    Row ``i < n`` is centered at calibration point ``i``; row ``n`` at the test
    point. Column ``n`` is the test atom.
    """

    def __init__(self, model: CalibrationModel, x_new, w_new: float | None = None):
        x_new = np.asarray(x_new, dtype=float).reshape(1, -1)
        if x_new.shape[1] != model.X.shape[1]:
            raise ValueError(
                f"test point has dimension {x_new.shape[1]}, model has {model.X.shape[1]}")
        if not np.isfinite(x_new).all():
            raise ValueError("test point must be finite")
        self.model = model
        self.n = n = model.n
        Xall = np.vstack([model.X, x_new])
        w_test = model.test_weight(x_new, w_new)
        w_cal = model.weights if model.weights is not None else np.ones(n)
        wall = np.append(w_cal, w_test)
        spec = model.localizer
        Z = _project(spec, Xall)
        D = pairwise_distances(Z, Z)
        H = kernel_from_distances(spec, D, np.eye(n + 1, dtype=bool), wall, wall)
        self.H = H
        self.h_test = H[:, n].copy()
        # raw weights and one final division: unit weights give exact k / (n + 1)
        self.w = wall
        self.W = wall.sum()
        self.set_scores(model.scores)

    def set_scores(self, scores) -> None:
        V = np.asarray(scores, dtype=float)
        n = self.n
        order = np.argsort(V, kind="stable")
        self.V = V
        self.sorted_V = V[order]
        C = np.zeros((n + 1, n + 1))
        np.cumsum(self.H[:, order], axis=1, out=C[:, 1:])
        self.C = C
        self.total = C[:, n] + self.h_test
        # number of calibration scores strictly below each calibration score
        self.rank = np.searchsorted(self.sorted_V, V, side="left")
        rows = np.arange(n)
        self.below0 = C[rows, self.rank] / self.total[:n]
        self.below1 = (C[rows, self.rank] + self.h_test[:n]) / self.total[:n]

    def vbar(self, levels) -> np.ndarray:
        """``Q(level; F_hat)`` with the test atom at +inf, per level."""
        levels = np.atleast_1d(np.asarray(levels, dtype=float))
        cum = self.C[self.n, 1:] / self.total[self.n]
        k = np.searchsorted(cum, levels, side="left")
        out = np.full(levels.shape, INF)
        fin = k < self.n
        out[fin] = self.sorted_V[k[fin]]
        return out

    def g2_sums(self, levels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(s1, s2, vbar) for each level."""
        levels = np.atleast_1d(np.asarray(levels, dtype=float))
        vb = self.vbar(levels)
        V = self.V[:, None]
        w = self.w[: self.n]
        p1 = np.where(vb[None, :] < V, self.below1[:, None], self.below0[:, None])
        s1 = (w @ (p1 < levels[None, :])) / self.W
        p2 = np.where(V > 0.0, self.below1[:, None], self.below0[:, None])
        s2 = (w @ (p2 < levels[None, :]) + self.w[self.n]) / self.W
        return s1, s2, vb

    def g1_achieved(self, levels, v_new: float) -> np.ndarray:
        """``sum_i w_i 1{V_i <= v*_i}`` with the test atom at `v_new`, per level."""
        levels = np.atleast_1d(np.asarray(levels, dtype=float))
        n = self.n
        rows = np.arange(n)
        v_new = float(v_new)
        below = np.empty(n + 1)
        below[:n] = (self.C[rows, self.rank]
                     + np.where(v_new < self.V, self.h_test[:n], 0.0)) / self.total[:n]
        r_new = np.searchsorted(self.sorted_V, v_new, side="left")
        below[n] = self.C[n, r_new] / self.total[n]
        return (self.w @ (below[:, None] < levels[None, :])) / self.W

    def test_covered(self, level: float, v_new: float) -> bool:
        """``v_new <= Q(level; F_{n+1})`` with the test atom at `v_new` itself."""
        r_new = np.searchsorted(self.sorted_V, float(v_new), side="left")
        return bool(self.C[self.n, r_new] / self.total[self.n] < level)

    def row_quantiles(self, level: float, v_test: float) -> np.ndarray:
        """``Q(level; sum_j p[i,j] delta(V_j) + p[i,n] delta(v_test))`` for rows i < n."""
        n = self.n
        C = self.C[:n]
        ht = self.h_test[:n, None]
        tot = self.total[:n, None]
        s = self.sorted_V[None, :]
        # cumulative probability at each calibration atom, test atom included when <= it
        cum = (C[:, 1:] + np.where(v_test <= s, ht, 0.0)) / tot
        ok = cum >= level
        first = np.where(ok.any(1), ok.argmax(1), n)
        out = np.where(first < n, self.sorted_V[np.minimum(first, n - 1)], INF)
        if math.isfinite(v_test):
            at_test = (C[:, np.searchsorted(self.sorted_V, v_test, side="right")][:, None]
                       + ht) / tot
            out = np.where(at_test[:, 0] >= level, np.minimum(out, v_test), out)
        return out


def _check_level(alpha_tilde: float) -> float:
    alpha_tilde = float(alpha_tilde)
    if not 0.0 <= alpha_tilde <= 1.0:
        raise ValueError(f"alpha_tilde must lie in [0, 1], got {alpha_tilde}")
    return alpha_tilde


def eval_G1(alpha_tilde: float, model: CalibrationModel, x_new, v_new: float,
            w_new: float | None = None) -> tuple[float, bool]:
    """Weighted share of points whose score lies below their own localized quantile.

    Returns ``(achieved, achieved >= model.alpha)`` with the test score set to
    `v_new` (may be ``inf``).
    """
    prob = LocalizedProblem(model, x_new, w_new)
    a = float(prob.g1_achieved([_check_level(alpha_tilde)], v_new)[0])
    return a, a >= model.alpha


@dataclass(frozen=True)
class G2Witness:
    alpha_tilde: float
    bar_v_star: float
    v_star_1: np.ndarray
    v_star_2: np.ndarray
    s1: float
    s2: float
    satisfied: bool
    quantile_is_infinite: bool


def eval_G2(alpha_tilde: float, model: CalibrationModel, x_new,
            w_new: float | None = None) -> G2Witness:
    """Score-free feasibility check at one level.

    ``v_star_1`` and ``v_star_2`` are the per-point thresholds with the test
    atom at ``bar_v_star`` and at 0.
    """
    at = _check_level(alpha_tilde)
    prob = LocalizedProblem(model, x_new, w_new)
    s1, s2, vb = prob.g2_sums([at])
    vb = float(vb[0])
    return G2Witness(
        alpha_tilde=at,
        bar_v_star=vb,
        v_star_1=prob.row_quantiles(at, vb),
        v_star_2=prob.row_quantiles(at, 0.0),
        s1=float(s1[0]),
        s2=float(s2[0]),
        satisfied=bool(s1[0] >= model.alpha and s2[0] >= model.alpha),
        quantile_is_infinite=math.isinf(vb),
    )


def search_alpha(prob: LocalizedProblem) -> tuple[float, float]:
    """(alpha_tilde, threshold) from an ascending scan of the model grid."""
    model = prob.model
    grid = model.alpha_grid
    s1, s2, vb = prob.g2_sums(grid)
    ok = np.isinf(vb) | ((s1 >= model.alpha) & (s2 >= model.alpha))
    if not ok.any():
        worst = np.minimum(s1, s2)
        j = int(np.argmax(worst))
        raise NoFeasibleLevel(float(grid[j]), float(worst[j]))
    j = int(ok.argmax())
    return float(grid[j]), float(vb[j])


def grid_search_alpha(model: CalibrationModel, x_new, w_new: float | None = None) -> float:
    """Smallest grid level at which G2 holds or the localized quantile is infinite.

    Raises
    ------
    NoFeasibleLevel
        When no grid level qualifies.
    """
    return search_alpha(LocalizedProblem(model, x_new, w_new))[0]


def randomized_level(prob: LocalizedProblem, v_new: float, u: float,
                     grid_size: int = 2000) -> float:
    """Randomized level from a uniform draw `u`; see :func:`randomized_alpha`."""
    alpha = prob.model.alpha
    grid = np.arange(1, grid_size + 1) / grid_size
    achieved = prob.g1_achieved(grid, v_new)
    j1 = int(np.argmax(achieved >= alpha))
    if achieved[j1] < alpha:
        raise NoFeasibleLevel(float(grid[-1]), float(achieved[-1]))
    if j1 == 0:
        return float(grid[0])
    a1, a2 = achieved[j1], achieved[j1 - 1]
    if a1 == a2:
        return float(grid[j1])
    return float(grid[j1]) if u < (alpha - a2) / (a1 - a2) else float(grid[j1 - 1])


def randomized_alpha(model: CalibrationModel, x_new, v_new: float, rng: np.random.Generator,
                     w_new: float | None = None, grid_size: int = 2000) -> float:
    """Level that makes ``P{V_new <= Q(level; F_hat)}`` exactly ``model.alpha``.

    On a grid of `grid_size` levels, let ``a1`` be the first level whose G1 sum
    reaches alpha and ``a2`` the level before it. Returns ``a1`` with
    probability ``(alpha - s(a2)) / (s(a1) - s(a2))``, else ``a2``.
    """
    prob = LocalizedProblem(model, x_new, w_new)
    return randomized_level(prob, v_new, rng.random(), grid_size)
