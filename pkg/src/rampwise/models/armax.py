"""ARMAX(1,1) by conditional least squares.

    y_t = c + phi1 y_{t-1} + theta1 eps_{t-1} + beta' X_t + eps_t

Residuals start from eps_0 = 0. The fit alternates a linear regression on
(1, y_{t-1}, eps_{t-1}, X_t) with a residual recursion until the parameters
settle, then polishes the conditional sum of squares directly.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

log = logging.getLogger(__name__)

PHI_BOUND = 0.999


class NonStationaryFit(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ArmaxModel:
    c: float
    phi1: float
    theta1: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma2: float = 0.0
    n_iter: int = 0
    converged: bool = True

    def to_json(self) -> str:
        return json.dumps({"version": 1, "c": self.c, "phi1": self.phi1, "theta1": self.theta1,
                           "beta": np.asarray(self.beta).tolist(), "sigma2": self.sigma2,
                           "n_iter": self.n_iter, "converged": self.converged})

    @classmethod
    def from_json(cls, text: str) -> "ArmaxModel":
        d = json.loads(text)
        return cls(d["c"], d["phi1"], d["theta1"], np.asarray(d["beta"], dtype=float),
                   d["sigma2"], d["n_iter"], d["converged"])


def _exog(exog, n):
    if exog is None:
        return np.zeros((n, 0))
    X = np.asarray(exog, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) != n:
        raise ValueError("exogenous rows must match the series length")
    return X


def residuals(y, exog, c, phi1, theta1, beta) -> np.ndarray:
    """eps_t for t >= 1 with eps_0 = 0 (eps has the length of y)."""
    y = np.asarray(y, dtype=float)
    X = _exog(exog, len(y))
    drive = np.zeros(len(y))
    drive[1:] = y[1:] - c - phi1 * y[:-1] - X[1:] @ np.asarray(beta, dtype=float)
    # eps_t = drive_t - theta1 eps_{t-1}
    return lfilter([1.0], [1.0, theta1], drive)


def _drop_cancelling_roots(y, X, params, tol: float) -> np.ndarray:
    # phi1 = -theta1 is a flat ridge of the CSS surface (the AR and MA factors
    # cancel), so near it the (1,1) parameters are unidentified. Fall back to
    # the identifiable ARX(1) sub-model fitted by ordinary least squares.
    if abs(params[1] + params[2]) >= tol:
        return params
    A = np.column_stack([np.ones(len(y) - 1), y[:-1], X[1:]])
    sub, *_ = np.linalg.lstsq(A, y[1:], rcond=None)
    return np.r_[sub[0], sub[1], 0.0, sub[2:]]


def fit_armax(series, exog=None, max_iter: int = 200, tol: float = 1e-8,
              polish: bool = True, cancel_tol: float = 0.1) -> ArmaxModel:
    """Fit by conditional least squares.

    When |phi1 + theta1| < ``cancel_tol`` the AR and MA roots nearly cancel
    and the model is refitted with theta1 = 0 (``cancel_tol=0`` disables).
    """
    y = np.asarray(series, dtype=float)
    n = len(y)
    if n < 50:
        raise ValueError(f"need at least 50 samples to fit, got {n}")
    X = _exog(exog, n)
    k = X.shape[1]
    eps = np.zeros(n)
    params = np.zeros(3 + k)
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        A = np.column_stack([np.ones(n - 1), y[:-1], eps[:-1], X[1:]])
        new, *_ = np.linalg.lstsq(A, y[1:], rcond=None)
        new[2] = np.clip(new[2], -PHI_BOUND, PHI_BOUND)
        eps = residuals(y, X, new[0], new[1], new[2], new[3:])
        if not np.all(np.isfinite(eps)):
            break
        delta = np.max(np.abs(new - params))
        params = new
        if delta < tol:
            converged = True
            break

    if polish:
        def resid(p):
            return residuals(y, X, p[0], p[1], p[2], p[3:])[1:]

        lo = np.r_[-np.inf, -PHI_BOUND, -PHI_BOUND, np.full(k, -np.inf)]
        hi = np.r_[np.inf, PHI_BOUND, PHI_BOUND, np.full(k, np.inf)]
        start = np.clip(params, lo + 1e-9, hi - 1e-9)
        sol = least_squares(resid, start, bounds=(lo, hi), xtol=1e-12, ftol=1e-12, gtol=1e-12)
        params = sol.x

    if cancel_tol > 0:
        params = _drop_cancelling_roots(y, X, params, cancel_tol)
    c, phi, theta, beta = float(params[0]), float(params[1]), float(params[2]), params[3:]
    if abs(phi) >= PHI_BOUND - 1e-6:  # the bounded polish stops on, not past, the edge
        warnings.warn(f"AR coefficient {phi:.4f} projected into (-{PHI_BOUND}, {PHI_BOUND})",
                      NonStationaryFit, stacklevel=2)
        phi = float(np.clip(phi, -PHI_BOUND + 1e-12, PHI_BOUND - 1e-12))
    eps = residuals(y, X, c, phi, theta, beta)
    return ArmaxModel(c, phi, theta, np.asarray(beta, dtype=float), float(np.mean(eps[1:] ** 2)),
                      it, converged)


def forecast(model: ArmaxModel, history, exog_future=None, steps: int = 1,
             exog_history=None) -> np.ndarray:
    """Recursive multi-step forecast from the end of ``history`` with E[eps] = 0."""
    y = np.asarray(history, dtype=float)
    if len(y) < 1:
        raise ValueError("history is empty")
    k = len(model.beta)
    if k and exog_future is None:
        raise ValueError("model has exogenous terms; exog_future is required")
    Xf = _exog(exog_future, steps) if k else np.zeros((steps, 0))
    last_eps = 0.0
    if len(y) > 1:
        Xh = _exog(exog_history, len(y)) if k else np.zeros((len(y), 0))
        last_eps = residuals(y, Xh, model.c, model.phi1, model.theta1, model.beta)[-1]
    out = np.empty(steps)
    prev, e = y[-1], last_eps
    for h in range(steps):
        out[h] = model.c + model.phi1 * prev + model.theta1 * e + Xf[h] @ model.beta
        prev, e = out[h], 0.0
    return out


def one_step_predictions(model: ArmaxModel, series, exog=None, start: int = 1) -> np.ndarray:
    """Rolling one-step-ahead forecasts yhat_t for t = start .. n-1, each
    conditioned on observations up to t - 1."""
    y = np.asarray(series, dtype=float)
    X = _exog(exog, len(y)) if len(model.beta) else np.zeros((len(y), 0))
    eps = residuals(y, X, model.c, model.phi1, model.theta1, model.beta)
    t = np.arange(max(start, 1), len(y))
    return model.c + model.phi1 * y[t - 1] + model.theta1 * eps[t - 1] + X[t] @ model.beta


def simulate_armax(n: int, c: float, phi1: float, theta1: float, sigma: float = 1.0,
                   beta=None, exog=None, seed: int = 0, burn: int = 500) -> np.ndarray:
    rng = np.random.default_rng(seed)
    e = rng.normal(0.0, sigma, n + burn)
    drive = c + e
    drive[1:] += theta1 * e[:-1]
    if beta is not None:
        X = _exog(exog, n)
        drive[burn:] += X @ np.asarray(beta, dtype=float)
    y = lfilter([1.0], [1.0, -phi1], drive)
    return y[burn:]
