"""State-conditioned observation scores and their offline fit.

The unnormalised observation log-likelihood for state ``s`` is

    ell(s) = ell_y(s; f) + ell_h(s; z_h) + sum_i ell_g_i(s; z_g_i)

with a linear response score, a linear hard-evidence score and one affine
score per soft signal. Only the state-0 minus state-1 difference reaches the
posterior, which is what :func:`fit_encoder` optimises.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from .belief import BELIEF_FLOOR, TransitionKernel

LOGODDS_CAP = float(np.log((1.0 - BELIEF_FLOOR) / BELIEF_FLOOR))


@dataclass(frozen=True)
class StepObservation:
    """What the encoder sees at one step: response features and calibrated z."""

    response_features: np.ndarray
    z_h: np.ndarray
    z_g: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.z_h, self.z_g])


@dataclass(frozen=True)
class EncoderParams:
    wy: np.ndarray          # (2, d_r)
    by: np.ndarray          # (2,)
    wh: np.ndarray          # (2, k_h)
    bh: np.ndarray          # (2,)
    soft_slope: np.ndarray  # (2, k_g)
    soft_bias: np.ndarray   # (2, k_g)

    def __post_init__(self):
        for name in ("wy", "by", "wh", "bh", "soft_slope", "soft_bias"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape[0] != 2:
                raise ValueError(f"{name} needs one row per latent state")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if self.soft_slope.shape != self.soft_bias.shape:
            raise ValueError("soft slope/bias shapes differ")

    @property
    def d_r(self):
        return self.wy.shape[1]

    @property
    def k_h(self):
        return self.wh.shape[1]

    @property
    def k_g(self):
        return self.soft_slope.shape[1]

    @classmethod
    def zeros(cls, d_r: int, k_h: int = 4, k_g: int = 2) -> "EncoderParams":
        return cls(np.zeros((2, d_r)), np.zeros(2), np.zeros((2, k_h)), np.zeros(2),
                   np.zeros((2, k_g)), np.zeros((2, k_g)))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("wy", "by", "wh", "bh", "soft_slope", "soft_bias")}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        return cls(**{k: np.asarray(d[k], dtype=float)
                      for k in ("wy", "by", "wh", "bh", "soft_slope", "soft_bias")})


def _check_state(s):
    if s not in (0, 1):
        raise ValueError(f"latent state must be 0 or 1, got {s}")


def score_response(s: int, f, params: EncoderParams) -> float:
    _check_state(s)
    f = np.asarray(f, dtype=float)
    if f.shape != (params.d_r,):
        raise ValueError(f"response features must have length {params.d_r}, got {f.shape}")
    return float(params.wy[s] @ f + params.by[s])


def score_hard_evidence(s: int, z_h, params: EncoderParams) -> float:
    _check_state(s)
    z_h = np.asarray(z_h, dtype=float)
    if z_h.shape != (params.k_h,):
        raise ValueError(f"hard vector must have length {params.k_h}, got {z_h.shape}")
    return float(params.wh[s] @ z_h + params.bh[s])


def score_soft_evidence(s: int, i: int, z_g_i: float, params: EncoderParams) -> float:
    _check_state(s)
    if not 0 <= i < params.k_g:
        raise IndexError(f"soft signal index {i} out of range for k_g={params.k_g}")
    return float(params.soft_slope[s, i] * z_g_i + params.soft_bias[s, i])


def observation_loglik(s: int, obs: StepObservation, params: EncoderParams) -> float:
    zg = np.asarray(obs.z_g, dtype=float)
    if zg.shape != (params.k_g,):
        raise ValueError(f"soft vector must have length {params.k_g}, got {zg.shape}")
    return (score_response(s, obs.response_features, params)
            + score_hard_evidence(s, obs.z_h, params)
            + sum(score_soft_evidence(s, i, zg[i], params) for i in range(params.k_g)))


def loglik_arrays(params: EncoderParams, f, z_h, z_g) -> np.ndarray:
    """Batch ``observation_loglik`` for both states; returns (..., 2)."""
    f = np.asarray(f, dtype=float)
    z_h = np.asarray(z_h, dtype=float)
    z_g = np.asarray(z_g, dtype=float)
    if f.shape[-1] != params.d_r or z_h.shape[-1] != params.k_h or z_g.shape[-1] != params.k_g:
        raise ValueError("observation dimensions do not match encoder parameters")
    ly = f @ params.wy.T + params.by
    lh = z_h @ params.wh.T + params.bh
    lg = z_g @ params.soft_slope.T + params.soft_bias.sum(axis=1)
    return ly + lh + lg


# --- fitting ---------------------------------------------------------------

def _design(f, z_h, z_g):
    """Per-step regressors of the log-likelihood difference: [f, 1, z_h, z_g]."""
    ones = np.ones(f.shape[:-1] + (1,))
    return np.concatenate([f, ones, z_h, z_g], axis=-1)


def _params_from_delta(delta, d_r, k_h, k_g) -> EncoderParams:
    half = 0.5 * np.asarray(delta, dtype=float)
    wy = half[:d_r]
    by = half[d_r]
    wh = half[d_r + 1: d_r + 1 + k_h]
    sl = half[d_r + 1 + k_h:]
    return EncoderParams(np.stack([wy, -wy]), np.array([by, -by]), np.stack([wh, -wh]),
                         np.zeros(2), np.stack([sl, -sl]), np.zeros((2, k_g)))


def delta_from_params(params: EncoderParams) -> np.ndarray:
    """State-0 minus state-1 coefficients in the fit's regressor order."""
    d = lambda a: a[0] - a[1]  # noqa: E731
    bias = d(params.by) + d(params.bh) + d(params.soft_bias).sum()
    return np.concatenate([d(params.wy), [bias], d(params.wh), d(params.soft_slope)])


def _filter_loss(delta, X, e, kernel: TransitionKernel, initial, with_grad=True):
    """Mean BCE of labels against the filtered risk score, plus its gradient.

    Works on log-odds L = log b(0)/b(1); the gradient is propagated forward
    through the prediction step.
    """
    E, T, P = X.shape
    s0, s1 = kernel.stay0, kernel.stay1
    lam = s0 + s1 - 1.0
    d = X @ delta
    L_prev = None
    G = np.zeros((E, P))
    loss = 0.0
    grad = np.zeros(P)
    init_lo = np.log(initial[0]) - np.log(initial[1])
    for t in range(T):
        if t == 0:
            L_hat = np.full(E, init_lo)
            Gh = np.zeros((E, P))
        else:
            p = expit(L_prev)
            bh0 = s0 * p + (1.0 - s1) * (1.0 - p)
            L_hat = np.log(bh0) - np.log1p(-bh0)
            J = lam * p * (1.0 - p) / (bh0 * (1.0 - bh0))
            Gh = J[:, None] * G
        L_raw = L_hat + d[:, t]
        L = np.clip(L_raw, -LOGODDS_CAP, LOGODDS_CAP)
        G = Gh + X[:, t, :]
        G[np.abs(L_raw) > LOGODDS_CAP] = 0.0
        y = e[:, t]
        loss -= np.sum(y * log_expit(L) + (1 - y) * log_expit(-L))
        if with_grad:
            grad += (expit(L) - y) @ G
        L_prev = L
    n = E * T
    return loss / n, grad / n


def fit_encoder(features, z_h, z_g, labels, kernel: Optional[TransitionKernel] = None,
                initial=(0.5, 0.5), holdout: float = 0.25, max_iter: int = 200,
                seed: int = 0) -> EncoderParams:
    """Fit encoder parameters to error labels through the full filter.

    Inputs are per-episode arrays: ``features`` (E, T, d_r), ``z_h`` (E, T, k_h),
    ``z_g`` (E, T, k_g), ``labels`` (E, T) with 1 marking a low-quality default
    response. Episodes are split into fit/held-out parts; the quasi-Newton
    iterate with the best held-out loss is returned.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 3 or features.shape[0] == 0 or features.shape[1] == 0:
        raise ValueError("fit_encoder needs a nonempty (episodes, steps, features) array")
    z_h = np.asarray(z_h, dtype=float)
    z_g = np.asarray(z_g, dtype=float)
    e = np.asarray(labels, dtype=float)
    if e.shape != features.shape[:2]:
        raise ValueError("labels must have shape (episodes, steps)")
    if np.all(e == e.flat[0]):
        raise ValueError("fit_encoder needs both label classes")
    kernel = kernel or TransitionKernel()
    initial = np.asarray(initial, dtype=float)
    d_r, k_h, k_g = features.shape[-1], z_h.shape[-1], z_g.shape[-1]
    X = _design(features, z_h, z_g)

    E = X.shape[0]
    order = np.random.default_rng(seed).permutation(E)
    n_hold = int(round(holdout * E)) if E > 1 else 0
    hold, fit = order[:n_hold], order[n_hold:]
    if n_hold == 0:
        hold = fit

    best = {"loss": np.inf, "x": np.zeros(X.shape[-1])}

    def track(xk):
        hl, _ = _filter_loss(xk, X[hold], e[hold], kernel, initial, with_grad=False)
        if hl < best["loss"]:
            best["loss"], best["x"] = hl, xk.copy()

    x0 = np.zeros(X.shape[-1])
    track(x0)
    minimize(_filter_loss, x0, args=(X[fit], e[fit], kernel, initial), jac=True,
             method="L-BFGS-B", callback=track, options={"maxiter": max_iter})
    return _params_from_delta(best["x"], d_r, k_h, k_g)
