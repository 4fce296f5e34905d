"""Localizer kernels ``H(x1, x2, X)`` and the row-stochastic weights built from them.

A localizer is described by a :class:`LocalizerSpec`. Kernel values are
computed in bulk from a distance matrix whose rows are centers and whose
columns are the points of the set each center is localized against. The
nearest-neighbor kinds use the whole set to place their radius, so they are
data dependent and not symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.spatial.distance import cdist

from .core import WeightedAtomSet, weighted_quantile

KINDS = ("constant", "distance_box", "knn", "gaussian", "exponential", "shift_knn")

_ALIASES = {
    "const": "constant",
    "constant": "constant",
    "box": "distance_box",
    "distance": "distance_box",
    "distance_box": "distance_box",
    "knn": "knn",
    "nn": "knn",
    "gauss": "gaussian",
    "gaussian": "gaussian",
    "exp": "exponential",
    "exponential": "exponential",
    "shiftknn": "shift_knn",
    "shift_knn": "shift_knn",
}

_SHORT = {
    "constant": "const",
    "distance_box": "box",
    "knn": "knn",
    "gaussian": "gauss",
    "exponential": "exp",
    "shift_knn": "shiftknn",
}


@dataclass(frozen=True)
class LocalizerSpec:
    """Kernel family plus bandwidth.

    Parameters
    ----------
    kind : str
        One of ``KINDS`` (short aliases such as ``"box"`` are accepted).
    h : float
        Radius (``distance_box``), scale (``gaussian``, ``exponential``) or
        neighbor count (``knn``, ``shift_knn``). Ignored for ``constant``.
    axis : int, optional
        Restrict distances to this feature column.
    weight_fn : callable, optional
        Importance-weight function ``w(x)`` used by ``shift_knn``. When absent,
        per-point weights must be passed to the kernel builders.
    """

    kind: str = "constant"
    h: float = 1.0
    axis: int | None = None
    weight_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ValueError(f"unknown localizer kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        h = float(self.h)
        if not (h > 0 and math.isfinite(h)):
            raise ValueError(f"bandwidth must be positive and finite, got {self.h!r}")
        if kind in ("knn", "shift_knn"):
            if h != int(h):
                raise ValueError(f"{kind} bandwidth is a neighbor count, got {self.h!r}")
        object.__setattr__(self, "h", h)
        if self.axis is not None:
            if int(self.axis) != self.axis or self.axis < 0:
                raise ValueError(f"axis must be a nonnegative integer, got {self.axis!r}")
            object.__setattr__(self, "axis", int(self.axis))

    @property
    def data_dependent(self) -> bool:
        return self.kind in ("knn", "shift_knn")

    @classmethod
    def parse(cls, text: str, weight_fn=None) -> "LocalizerSpec":
        """Parse ``"kind[:h][@axis]"``, e.g. ``"box:1"``, ``"knn:40@2"``."""
        text = text.strip()
        axis = None
        if "@" in text:
            text, ax = text.split("@", 1)
            axis = int(ax)
        if ":" in text:
            kind, h = text.split(":", 1)
            return cls(kind, float(h), axis, weight_fn)
        if _ALIASES.get(text.lower()) != "constant":
            raise ValueError(f"localizer {text!r} needs a bandwidth, e.g. {text}:1")
        return cls("constant", 1.0, axis, weight_fn)

    def label(self) -> str:
        if self.kind == "constant":
            s = "const"
        else:
            s = f"{_SHORT[self.kind]}:{self.h:g}"
        return s if self.axis is None else f"{s}@{self.axis}"

    def to_config(self) -> dict[str, str]:
        cfg = {"kind": self.kind, "h": repr(self.h)}
        if self.axis is not None:
            cfg["axis"] = str(self.axis)
        return cfg

    @classmethod
    def from_config(cls, cfg: Mapping[str, str], weight_fn=None) -> "LocalizerSpec":
        axis = cfg.get("axis")
        return cls(cfg.get("kind", "constant"), float(cfg.get("h", 1.0)),
                   None if axis in (None, "") else int(axis), weight_fn)


def as_features(X) -> np.ndarray:
    """Coerce to a 2-D float array of shape (n, p)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1)
    elif X.ndim != 2:
        raise ValueError(f"features must be at most 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    return X


def _project(spec: LocalizerSpec, X: np.ndarray) -> np.ndarray:
    if spec.axis is None:
        return X
    if spec.axis >= X.shape[1]:
        raise ValueError(f"axis {spec.axis} out of range for {X.shape[1]} features")
    return X[:, [spec.axis]]


def pairwise_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of A and rows of B."""
    if A.shape[1] == 1:
        return np.abs(A[:, 0][:, None] - B[:, 0][None, :])
    # per-pair differences, so a pair gets the same distance whatever the call shape
    return cdist(A, B)


def neighbor_rank(level: float, size: int) -> int:
    """0-based order statistic of the lower ``level`` quantile of ``size`` equal atoms."""
    cum = np.arange(1, size + 1) / size
    return int(np.searchsorted(cum, min(level, 1.0), side="left"))


def _knn_count(spec: LocalizerSpec, size: int) -> int:
    if spec.h > size:
        raise ValueError(f"{spec.kind} bandwidth h={spec.h:g} exceeds the set size {size}")
    n = size - 1 if spec.kind == "knn" else size
    level = spec.h / n if n > 0 else 1.0
    return neighbor_rank(level, size)


def kernel_from_distances(spec: LocalizerSpec, D: np.ndarray, self_mask: np.ndarray,
                          wc: np.ndarray | None = None, wp: np.ndarray | None = None) -> np.ndarray:
    """Kernel values for every (center, point) pair.

    Parameters
    ----------
    D : ndarray (a, N)
        Distances from each of ``a`` centers to every point of its set; the
        center itself is one of the N points (flagged by `self_mask`).
    self_mask : ndarray of bool (a, N)
        True where the column is the center itself.
    wc, wp : ndarray, optional
        Importance weights at the centers (a,) and at the points (a, N) or
        (N,); required for ``shift_knn``.
    """
    kind = spec.kind
    if kind == "constant":
        H = np.ones_like(D)
    elif kind == "distance_box":
        H = (D <= spec.h).astype(float)
    elif kind == "gaussian":
        H = np.exp(-(D / spec.h) ** 2)
    elif kind == "exponential":
        H = np.exp(-D / spec.h)
    elif kind == "knn":
        k = _knn_count(spec, D.shape[1])
        radius = np.partition(D, k, axis=1)[:, k]
        H = (D <= radius[:, None]).astype(float)
    else:
        if wc is None or wp is None:
            raise ValueError("shift_knn needs importance weights at every point")
        wp = np.broadcast_to(wp, D.shape)
        Dw = np.abs(wp - np.asarray(wc, dtype=float)[:, None])
        k = _knn_count(spec, D.shape[1])
        radius = np.partition(Dw, k, axis=1)[:, k]
        # raw importance weight, diagonal included (|w - w| = 0 is always inside)
        with np.errstate(invalid="ignore"):
            H = wp * (Dw <= radius[:, None])
    if kind != "shift_knn":
        H = np.where(self_mask, 1.0, H)
    if not np.isfinite(H).all():
        raise ValueError("localizer produced non-finite kernel values")
    return H


def _point_weights(spec: LocalizerSpec, X: np.ndarray, point_weights) -> np.ndarray | None:
    if spec.kind != "shift_knn":
        return None
    if point_weights is not None:
        w = np.asarray(point_weights, dtype=float).ravel()
        if w.size != X.shape[0]:
            raise ValueError("need one importance weight per point")
        return w
    if spec.weight_fn is None:
        raise ValueError("shift_knn needs weight_fn or explicit point weights")
    return np.asarray(spec.weight_fn(X), dtype=float).reshape(-1)


def localizer_matrix(spec: LocalizerSpec, X, point_weights=None) -> np.ndarray:
    """Kernel matrix ``H[i, j] = H(X_i, X_j, X)`` over the full set X (N x N)."""
    X = as_features(X)
    Z = _project(spec, X)
    D = pairwise_distances(Z, Z)
    w = _point_weights(spec, X, point_weights)
    return kernel_from_distances(spec, D, np.eye(len(X), dtype=bool), w, w)


def eval_localizer(spec: LocalizerSpec, x1, x2, X, point_weights=None,
                   w1: float | None = None, w2: float | None = None) -> float:
    """Kernel value ``H(x1, x2, X)``.

    For the nearest-neighbor kinds `X` must hold every point of the set
    (calibration plus test); the radius is the lower ``h/n`` quantile of the
    distances from `x1` to the points of `X`. ``shift_knn`` returns the raw
    importance weight ``w(x2)`` inside its radius, so values may exceed 1 and
    ``H(x, x) = w(x)`` rather than 1.
    """
    X = as_features(X)
    p = X.shape[1]
    x1 = np.asarray(x1, dtype=float).reshape(1, -1)
    x2 = np.asarray(x2, dtype=float).reshape(1, -1)
    if x1.shape[1] != p or x2.shape[1] != p:
        raise ValueError("x1 and x2 must match the feature dimension of X")
    if np.array_equal(x1, x2) and spec.kind != "shift_knn":
        return 1.0
    Z = _project(spec, X)
    z1, z2 = _project(spec, x1), _project(spec, x2)
    d12 = float(pairwise_distances(z1, z2)[0, 0])
    kind = spec.kind
    if kind == "constant":
        return 1.0
    if kind == "distance_box":
        return 1.0 if d12 <= spec.h else 0.0
    if kind == "gaussian":
        return math.exp(-(d12 / spec.h) ** 2)
    if kind == "exponential":
        return math.exp(-d12 / spec.h)
    if kind == "knn":
        d = pairwise_distances(z1, Z)[0]
        n = len(d) - 1
        if spec.h > len(d):
            raise ValueError(f"knn bandwidth h={spec.h:g} exceeds the set size {len(d)}")
        radius = weighted_quantile(min(spec.h / max(n, 1), 1.0), WeightedAtomSet(d))
        return 1.0 if d12 <= radius else 0.0
    wX = _point_weights(spec, X, point_weights)
    if w1 is None:
        w1 = float(spec.weight_fn(x1)[0]) if spec.weight_fn is not None else None
    if w2 is None:
        w2 = float(spec.weight_fn(x2)[0]) if spec.weight_fn is not None else None
    if w1 is None or w2 is None:
        raise ValueError("shift_knn needs w(x1) and w(x2)")
    if spec.h > len(wX):
        raise ValueError(f"shift_knn bandwidth h={spec.h:g} exceeds the set size {len(wX)}")
    radius = weighted_quantile(min(spec.h / len(wX), 1.0), WeightedAtomSet(np.abs(wX - w1)))
    return w2 if abs(w2 - w1) <= radius else 0.0


@dataclass(frozen=True)
class LocalWeightRow:
    center_index: int
    weights: np.ndarray


def build_local_weights(spec: LocalizerSpec, center: int, X, point_weights=None) -> LocalWeightRow:
    """Row ``p[center, j] = H(X_center, X_j, X) / sum_k H(X_center, X_k, X)``."""
    X = as_features(X)
    N = len(X)
    if not -N <= center < N:
        raise IndexError(f"center {center} out of range for {N} points")
    center %= N
    Z = _project(spec, X)
    D = pairwise_distances(Z[[center]], Z)
    mask = np.zeros((1, N), dtype=bool)
    mask[0, center] = True
    w = _point_weights(spec, X, point_weights)
    H = kernel_from_distances(spec, D, mask,
                              None if w is None else w[[center]], w)[0]
    return LocalWeightRow(center, H / H.sum())


def _binned(col: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(col, np.linspace(0, 1, bins + 1))
    return np.searchsorted(edges[1:-1], col, side="right")


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 10) -> float:
    """Plug-in mutual information (nats) after equal-frequency binning."""
    ia, ib = _binned(np.asarray(a, float), bins), _binned(np.asarray(b, float), bins)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1), joint.sum(0)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())


def select_projection_axis(X0, V0, bins: int = 10) -> int:
    """Feature column with the largest binned mutual information with the scores.

    Ties (within 1e-12) go to the smallest index. Constant columns score 0.
    """
    X0 = as_features(X0)
    V0 = np.asarray(V0, dtype=float).ravel()
    m, p = X0.shape
    if V0.size != m:
        raise ValueError("X0 and V0 disagree on the number of samples")
    if m < 2 * bins:
        raise ValueError(f"need at least {2 * bins} samples for {bins} bins, got {m}")
    mi = np.array([
        0.0 if np.ptp(X0[:, j]) == 0 else mutual_information(X0[:, j], V0, bins)
        for j in range(p)
    ])
    return int(np.flatnonzero(mi >= mi.max() - 1e-12)[0])
