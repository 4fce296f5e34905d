"""Small built-in regression learners.

A learner is a callable ``fit(X, Y) -> predict`` where ``predict(X)`` returns
one prediction per row. All of them are symmetric in the order of the
training rows.
"""

from __future__ import annotations

import numpy as np

from .localizers import as_features


def constant(value: float = 0.0):
    """Learner that ignores the data and always predicts `value`."""
    def fit(X, Y):
        return lambda Xt: np.full(as_features(Xt).shape[0], float(value))
    return fit


def constant_mean(X, Y):
    mu = float(np.mean(Y))
    return lambda Xt: np.full(as_features(Xt).shape[0], mu)


def least_squares(X, Y):
    """Ordinary least squares with an intercept (minimum-norm when rank deficient)."""
    X = as_features(X)
    A = np.column_stack([np.ones(len(X)), X])
    coef, *_ = np.linalg.lstsq(A, np.asarray(Y, dtype=float), rcond=None)
    return lambda Xt: coef[0] + as_features(Xt) @ coef[1:]


def ridge(lam: float = 1.0):
    """Ridge regression with an unpenalized intercept and fixed penalty `lam`."""
    if lam < 0:
        raise ValueError("ridge penalty must be nonnegative")

    def fit(X, Y):
        X = as_features(X)
        Y = np.asarray(Y, dtype=float)
        xm, ym = X.mean(0), Y.mean()
        Xc = X - xm
        p = X.shape[1]
        if p <= len(X):
            beta = np.linalg.solve(Xc.T @ Xc + lam * np.eye(p), Xc.T @ (Y - ym))
        else:
            # dual form is cheaper when p > n
            a = np.linalg.solve(Xc @ Xc.T + lam * np.eye(len(X)), Y - ym)
            beta = Xc.T @ a
        b0 = ym - xm @ beta
        return lambda Xt: b0 + as_features(Xt) @ beta
    return fit


LEARNERS = {
    "zero": constant(0.0),
    "mean": constant_mean,
    "ls": least_squares,
    "ridge": ridge(1.0),
}


def get_learner(name: str):
    """Look up ``zero``, ``mean``, ``ls``, ``ridge`` or ``ridge:<lambda>``."""
    if name.startswith("ridge:"):
        return ridge(float(name.split(":", 1)[1]))
    try:
        return LEARNERS[name]
    except KeyError:
        raise ValueError(f"unknown learner {name!r}; expected one of {sorted(LEARNERS)} "
                         "or ridge:<lambda>") from None
