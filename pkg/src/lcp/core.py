"""Weighted empirical distributions over nonconformity scores.

Scores are nonnegative floats; the point mass standing in for an unknown
test score is an ordinary ``math.inf`` atom. Quantiles are exact lower
quantiles, ``Q(alpha; F) = inf{t : F(t) >= alpha}``, never interpolated.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

INF = math.inf

WEIGHT_SUM_TOL = 1e-9


class WeightedAtomSet:
    """Finite distribution ``sum_k w_k * delta(v_k)`` with ``v_k`` in [0, inf].

    Weights are stored as given (nonnegative masses) and normalized lazily:
    cumulative probabilities are computed as ``cumsum(masses) / total`` so that
    integer masses (indicator kernels, equal weights) give correctly rounded
    fractions ``k / N``.

    Parameters
    ----------
    values : sequence of float
        Atom locations. ``math.inf`` is allowed; NaN and negatives are not.
    weights : sequence of float, optional
        Nonnegative masses with positive total. Equal masses when omitted.
    """

    __slots__ = ("_values", "_masses", "_order", "_cum")

    def __init__(self, values: Sequence[float], weights: Sequence[float] | None = None):
        v = np.array(values, dtype=float).ravel()
        if v.size == 0:
            raise ValueError("atom list is empty")
        if np.isnan(v).any():
            raise ValueError("atom values must not be NaN")
        if (v < 0).any():
            raise ValueError("atom values must be nonnegative")
        if weights is None:
            m = np.ones_like(v)
        else:
            m = np.array(weights, dtype=float).ravel()
            if m.shape != v.shape:
                raise ValueError(
                    f"got {v.size} values but {m.size} weights")
            if not np.isfinite(m).all() or (m < 0).any():
                raise ValueError("weights must be finite and nonnegative")
        v.setflags(write=False)
        m.setflags(write=False)
        self._values = v
        self._masses = m
        self._order = np.argsort(v, kind="stable")
        cum = np.cumsum(m[self._order])
        if not cum[-1] > 0:
            raise ValueError("weights sum to zero")
        self._cum = cum

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def masses(self) -> np.ndarray:
        return self._masses

    @property
    def weights(self) -> np.ndarray:
        """Normalized weights (sum to 1 up to rounding)."""
        return self._masses / self._cum[-1]

    def __len__(self) -> int:
        return self._values.size

    def __repr__(self) -> str:
        pairs = ", ".join(f"({v:g}, {w:.4g})" for v, w in zip(self._values, self.weights))
        return f"WeightedAtomSet([{pairs}])"

    def sorted_cumulative(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (sorted values, cumulative probabilities) over all atoms."""
        return self._values[self._order], self._cum / self._cum[-1]


def weighted_quantile(alpha: float, dist: WeightedAtomSet) -> float:
    """Lower ``alpha`` quantile of `dist`.

    Returns the smallest atom value ``t`` whose cumulative probability reaches
    `alpha`. For ``alpha == 0`` this is the smallest positive-mass atom.
    Returns ``inf`` when only the infinite atom closes the gap.
    """
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    vals, cum = dist.sorted_cumulative()
    if alpha == 0.0:
        masses = dist.masses[dist._order]
        return float(vals[np.flatnonzero(masses > 0)[0]])
    k = int(np.searchsorted(cum, alpha, side="left"))
    # cum[-1] == 1.0 exactly, so k < len for every alpha <= 1
    return float(vals[k])


def cdf_at(dist: WeightedAtomSet, t: float) -> float:
    """Total probability of atoms with value ``<= t``."""
    if math.isnan(t):
        raise ValueError("t must not be NaN")
    vals, cum = dist.sorted_cumulative()
    k = int(np.searchsorted(vals, t, side="right"))
    return 0.0 if k == 0 else float(cum[k - 1])


def substitute_atom(dist: WeightedAtomSet, index: int, new_value: float) -> WeightedAtomSet:
    """Copy of `dist` with the value of atom `index` replaced; masses kept."""
    n = len(dist)
    if not -n <= index < n:
        raise IndexError(f"atom index {index} out of range for {n} atoms")
    v = dist.values.copy()
    v[index] = new_value
    return WeightedAtomSet(v, dist.masses)


def augmented(scores: Sequence[float], weights: Sequence[float] | None = None,
              last_weight: float | None = None) -> WeightedAtomSet:
    """``sum_i w_i delta(V_i) + w_{n+1} delta(inf)``.

    With no weights this is the equal-weight set ``V_{1:n} U {inf}``.
    """
    s = np.asarray(scores, dtype=float).ravel()
    vals = np.append(s, INF)
    if weights is None:
        return WeightedAtomSet(vals)
    if last_weight is None:
        w = np.asarray(weights, dtype=float).ravel()
        if w.size != s.size + 1:
            raise ValueError("need n + 1 weights when last_weight is omitted")
        return WeightedAtomSet(vals, w)
    return WeightedAtomSet(vals, np.append(np.asarray(weights, dtype=float), last_weight))
