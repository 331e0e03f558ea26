"""Windowed hard-check smoothing and monotone soft-score calibration.

Hard checks arrive as booleans and are summarised by a sliding-window pass
count shrunk toward a Beta prior. Soft scores are mapped through a monotone
affine-sigmoid. Both produce values strictly inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

PROB_CLAMP = 1e-9
PARAM_CLAMP = 20.0


@dataclass(frozen=True)
class HardSignalState:
    W: int
    alpha0: float = 1.0
    beta0: float = 1.0
    window: tuple[bool, ...] = ()
    count: int = 0

    def __post_init__(self):
        if self.W < 1:
            raise ValueError(f"window length must be >= 1, got {self.W}")
        if self.alpha0 < 0 or self.beta0 < 0:
            raise ValueError("pseudocounts must be nonnegative")

    def to_dict(self):
        return {"alpha0": self.alpha0, "beta0": self.beta0}


def push_hard(state: HardSignalState, realization: bool) -> HardSignalState:
    window = state.window + (bool(realization),)
    count = state.count + int(bool(realization))
    if len(window) > state.W:
        count -= int(window[0])
        window = window[1:]
    return HardSignalState(state.W, state.alpha0, state.beta0, window, count)


def calibrate_hard(state: HardSignalState, W: Optional[int] = None) -> float:
    """Beta-Bernoulli smoothed pass rate.

    With ``W`` omitted the denominator uses the current window length, so a
    window that has not filled yet is not biased toward the prior.
    """
    n = len(state.window) if W is None else W
    denom = state.alpha0 + state.beta0 + n
    if denom <= 0:
        raise ValueError("nonpositive denominator in hard-signal calibration")
    return (state.alpha0 + state.count) / denom


def windowed_hard_values(h: np.ndarray, W: int, alpha0, beta0) -> np.ndarray:
    """Vectorised ``calibrate_hard`` over a time axis.

    ``h`` has shape (..., T, k_h); returns the calibrated value after each push.
    """
    h = np.asarray(h, dtype=float)
    T = h.shape[-2]
    csum = np.cumsum(h, axis=-2)
    lagged = np.zeros_like(csum)
    if T > W:
        lagged[..., W:, :] = csum[..., :-W, :]
    counts = csum - lagged
    n = np.minimum(np.arange(1, T + 1), W).astype(float)[:, None]
    a0 = np.asarray(alpha0, dtype=float)
    b0 = np.asarray(beta0, dtype=float)
    return (a0 + counts) / (a0 + b0 + n)


@dataclass(frozen=True)
class SoftCalibration:
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.a < 0:
            raise ValueError(f"calibration slope must be nonnegative, got {self.a}")

    def to_dict(self):
        return {"a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["a"]), float(d["b"]))


def calibrate_soft(raw, cal: SoftCalibration):
    z = expit(cal.a * np.asarray(raw, dtype=float) + cal.b)
    z = np.clip(z, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(z) if np.ndim(z) == 0 else z


def _logistic_nll(params, X, y):
    eta = X @ params[:-1] + params[-1]
    # -log p(y) = -[y log s(eta) + (1-y) log s(-eta)]
    nll = -np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta))
    r = expit(eta) - y
    grad = np.concatenate([X.T @ r, [r.sum()]])
    return nll, grad


def fit_logistic(X, y, slope_bounds=(-PARAM_CLAMP, PARAM_CLAMP)):
    """Bounded maximum-likelihood logistic regression; returns (weights, bias).

    Bounds are applied to every coefficient, the intercept always gets
    ``[-20, 20]``. Raises on single-class labels.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("feature/label length mismatch")
    if y.size < 2 or np.all(y == y[0]):
        raise ValueError("degenerate calibration split")
    d = X.shape[1]
    rate = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    x0 = np.zeros(d + 1)
    x0[-1] = np.clip(np.log(rate / (1 - rate)), -PARAM_CLAMP, PARAM_CLAMP)
    bounds = [slope_bounds] * d + [(-PARAM_CLAMP, PARAM_CLAMP)]
    res = minimize(_logistic_nll, x0, args=(X, y), jac=True, method="L-BFGS-B",
                   bounds=bounds, options={"maxiter": 1000, "gtol": 1e-10, "ftol": 1e-15})
    return res.x[:-1].copy(), float(res.x[-1])


def fit_soft_calibration(raw, labels) -> SoftCalibration:
    """Monotone Platt fit: logistic MLE of correctness on raw score, slope >= 0."""
    raw = np.asarray(raw, dtype=float).reshape(-1, 1)
    w, b = fit_logistic(raw, labels, slope_bounds=(0.0, PARAM_CLAMP))
    return SoftCalibration(float(w[0]), b)


def build_observation_vector(hard: Sequence[float], soft: Sequence[float],
                             k_h: int = 4, k_g: int = 2) -> np.ndarray:
    hard = np.asarray(hard, dtype=float).ravel()
    soft = np.asarray(soft, dtype=float).ravel()
    if hard.size != k_h or soft.size != k_g:
        raise ValueError(f"expected {k_h} hard and {k_g} soft values, "
                         f"got {hard.size} and {soft.size}")
    return np.concatenate([hard, soft])


@dataclass
class CalibrationState:
    """Per-episode signal state: one window per hard check, one map per soft score."""

    hard: list[HardSignalState]
    soft: list[SoftCalibration] = field(default_factory=list)

    @classmethod
    def create(cls, W: int, k_h: int = 4, k_g: int = 2, hard_priors=None, soft_cal=None):
        priors = hard_priors or [{"alpha0": 1.0, "beta0": 1.0}] * k_h
        cals = soft_cal or [{"a": 1.0, "b": 0.0}] * k_g
        if len(priors) != k_h or len(cals) != k_g:
            raise ValueError("calibration parameter counts do not match k_h/k_g")
        hard = [HardSignalState(W, float(p["alpha0"]), float(p["beta0"])) for p in priors]
        return cls(hard, [SoftCalibration.from_dict(c) for c in cals])

    @property
    def k_h(self):
        return len(self.hard)

    @property
    def k_g(self):
        return len(self.soft)

    def observe(self, hard_raw, soft_raw) -> np.ndarray:
        """Push this step's realizations and return the calibrated vector z_t."""
        if len(hard_raw) != self.k_h or len(soft_raw) != self.k_g:
            raise ValueError("raw signal counts do not match the calibration state")
        self.hard = [push_hard(st, h) for st, h in zip(self.hard, hard_raw)]
        zh = [calibrate_hard(st) for st in self.hard]
        zg = [calibrate_soft(g, c) for g, c in zip(soft_raw, self.soft)]
        return build_observation_vector(zh, zg, self.k_h, self.k_g)

    def counts(self) -> list[int]:
        return [st.count for st in self.hard]


def observation_arrays(hard_raw, soft_raw, W, hard_priors=None, soft_cal=None):
    """Batch version of :meth:`CalibrationState.observe` over episodes.

    ``hard_raw``: (..., T, k_h) booleans, ``soft_raw``: (..., T, k_g).
    Returns (z_h, z_g).
    """
    hard_raw = np.asarray(hard_raw, dtype=float)
    soft_raw = np.asarray(soft_raw, dtype=float)
    k_h, k_g = hard_raw.shape[-1], soft_raw.shape[-1]
    priors = hard_priors or [{"alpha0": 1.0, "beta0": 1.0}] * k_h
    cals = soft_cal or [{"a": 1.0, "b": 0.0}] * k_g
    a0 = np.array([p["alpha0"] for p in priors], dtype=float)
    b0 = np.array([p["beta0"] for p in priors], dtype=float)
    zh = windowed_hard_values(hard_raw, W, a0, b0)
    sa = np.array([c["a"] for c in cals], dtype=float)
    sb = np.array([c["b"] for c in cals], dtype=float)
    zg = np.clip(expit(sa * soft_raw + sb), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return zh, zg
