"""Bandwidth selection on an independent tuning set.

For each candidate bandwidth every tuning sample plays the test point once
(leave-one-out, ``alpha_tilde = alpha``). Candidates producing too many
infinite thresholds are screened out; the rest are scored by average
threshold plus bootstrap spread, inflated by any empirical under-coverage.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import INF
from .localizers import (LocalizerSpec, as_features, kernel_from_distances,
                         pairwise_distances, _project)


class TuningError(RuntimeError):
    pass


def thresholds_from_kernel(K: np.ndarray, self_col: np.ndarray, scores: np.ndarray,
                           alpha: float) -> np.ndarray:
    """Per row, ``Q(alpha; sum_{j != self} p_j delta(V_j) + p_self delta(inf))``.

    `K` is (a, N) kernel rows, `self_col` the column of each row's own point,
    `scores` the N point scores (the self entries are ignored).
    """
    a, N = K.shape
    order = np.argsort(scores, kind="stable")
    Ks = K[:, order].copy()
    pos = np.argsort(order)[self_col]
    rows = np.arange(a)
    own = Ks[rows, pos].copy()
    Ks[rows, pos] = 0.0
    cum = np.cumsum(Ks, axis=1)
    total = cum[:, -1] + own
    ok = cum / total[:, None] >= alpha
    first = ok.argmax(1)
    hit = ok[rows, first]
    return np.where(hit, scores[order][first], INF)


def loo_thresholds(X0, V0, h: float, kind: str = "distance_box", alpha: float = 0.9,
                   axis: int | None = None) -> np.ndarray:
    """Leave-one-out thresholds ``vbar*_i`` at ``alpha_tilde = alpha`` for one bandwidth."""
    spec = LocalizerSpec(kind, h, axis)
    return _loo(spec, as_features(X0), np.asarray(V0, dtype=float).ravel(), alpha)


def _loo(spec: LocalizerSpec, X0: np.ndarray, V0: np.ndarray, alpha: float,
         D: np.ndarray | None = None) -> np.ndarray:
    m = len(V0)
    if m < 2:
        raise ValueError("need at least two tuning samples")
    if spec.kind == "shift_knn":
        raise ValueError("bandwidth tuning does not support shift_knn")
    if D is None:
        Z = _project(spec, X0)
        D = pairwise_distances(Z, Z)
    K = kernel_from_distances(spec, D, np.eye(m, dtype=bool))
    return thresholds_from_kernel(K, np.arange(m), V0, alpha)


def _bootstrap(spec: LocalizerSpec, Z: np.ndarray, V0: np.ndarray, alpha: float,
               draws: np.ndarray) -> np.ndarray:
    """(m, B) thresholds with each sample tested against bootstrap training sets."""
    m = len(V0)
    out = np.empty((m, len(draws)))
    mask = np.zeros((m, m), dtype=bool)
    mask[:, 0] = True
    for b, idx in enumerate(draws):
        D = np.empty((m, m))
        D[:, 0] = 0.0
        D[:, 1:] = pairwise_distances(Z, Z[idx])
        K = kernel_from_distances(spec, D, mask)
        scores = np.append(INF, V0[idx])
        out[:, b] = thresholds_from_kernel(K, np.zeros(m, dtype=int), scores, alpha)
    return out


@dataclass
class CandidateStats:
    h: float
    kind: str
    infinite_fraction: float
    s: float = math.nan
    gamma: float = math.nan
    sigma: float = math.nan
    objective: float = math.nan
    eligible: bool = False
    selected: bool = False


@dataclass
class TuningReport:
    """Per-candidate statistics and the chosen bandwidth.

    ``core_size`` is the number of tuning samples with a finite threshold under
    every eligible candidate.
    """

    kind: str
    alpha: float
    omega: float
    B: int
    candidates: list[CandidateStats] = field(default_factory=list)
    selected_h: float = math.nan
    core_size: int = 0

    COLUMNS = ("h", "kind", "infinite_fraction", "s", "gamma", "sigma",
               "objective", "eligible", "selected")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for c in self.candidates:
            w.writerow([fmt(c.h), c.kind, fmt(c.infinite_fraction), fmt(c.s), fmt(c.gamma),
                        fmt(c.sigma), fmt(c.objective), str(c.eligible).lower(),
                        str(c.selected).lower()])
        return buf.getvalue()


def fmt(x) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def tune_bandwidth(X0, V0, h_grid: Sequence[float], alpha: float,
                   kind: str = "distance_box", omega: float = 0.9, B: int = 20,
                   rng: np.random.Generator | int | None = None,
                   axis: int | None = None) -> TuningReport:
    """Pick the bandwidth minimizing ``gamma * (s + sigma)`` among screened candidates.

    Parameters
    ----------
    X0, V0 : tuning features (m, p) and their scores (cross-validated if the
        score was fitted on the same data).
    h_grid : ascending candidate bandwidths.
    omega : a candidate is eligible when fewer than ``1 - omega`` of its
        thresholds are infinite.
    B : bootstrap replicates for the spread term.

    Raises
    ------
    TuningError
        When no candidate passes screening ("widen bandwidth grid").
    """
    X0 = as_features(X0)
    V0 = np.asarray(V0, dtype=float).ravel()
    m = len(V0)
    if X0.shape[0] != m:
        raise ValueError("X0 and V0 disagree on the number of samples")
    h_grid = [float(h) for h in h_grid]
    if not h_grid:
        raise ValueError("bandwidth grid is empty")
    if any(b <= a for a, b in zip(h_grid, h_grid[1:])):
        raise ValueError("bandwidth grid must be strictly ascending")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if B < 1:
        raise ValueError("B must be at least 1")
    rng = np.random.default_rng(rng)
    specs = [LocalizerSpec(kind, h, axis) for h in h_grid]
    Z = _project(specs[0], X0)
    D = pairwise_distances(Z, Z)
    loo = np.array([_loo(s, X0, V0, alpha, D) for s in specs])
    inf_frac = np.isinf(loo).mean(1)
    report = TuningReport(specs[0].kind, alpha, omega, B)
    eligible = inf_frac < 1 - omega
    for s, f, e in zip(specs, inf_frac, eligible):
        report.candidates.append(CandidateStats(s.h, s.kind, float(f), eligible=bool(e)))
    if not eligible.any():
        raise TuningError(
            f"no bandwidth has fewer than {100 * (1 - omega):.0f}% infinite thresholds; "
            "widen bandwidth grid")
    core = np.isfinite(loo[eligible]).all(0)
    report.core_size = int(core.sum())
    if not core.any():
        raise TuningError("no tuning sample is finite under every eligible bandwidth; "
                          "widen bandwidth grid")
    # one set of bootstrap training draws shared by every sample and candidate
    draws = rng.integers(0, m, size=(B, m - 1))
    for l, c in enumerate(report.candidates):
        if not c.eligible:
            continue
        v = loo[l]
        c.s = float(v[core].mean())
        miss = int((V0[core] > v[core]).sum())
        c.gamma = float(max(miss / ((1 - alpha) * core.sum()), 1.0))
        boot = _bootstrap(specs[l], Z, V0, alpha, draws)
        fin = np.isfinite(boot)
        enough = fin.sum(1) >= 2
        if enough.any():
            sds = [np.std(row[f], ddof=1) for row, f in zip(boot[enough], fin[enough])]
            c.sigma = float(np.mean(sds))
        else:
            c.sigma = 0.0
        c.objective = float(c.gamma * (c.s + c.sigma))
    obj = np.array([c.objective if c.eligible else INF for c in report.candidates])
    best = np.flatnonzero(obj == obj.min())[-1]
    report.candidates[best].selected = True
    report.selected_h = report.candidates[best].h
    return report
