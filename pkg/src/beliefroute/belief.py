"""Prediction-filtering belief dynamics over the binary reliability state.

State index 0 is "unreliable", 1 is "reliable". Beliefs are carried either as
:class:`~beliefroute.core.Belief` values (sequential path) or as ``(..., 2)``
arrays (batch path); both go through the same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import Action, Belief, SIMPLEX_TOL

BELIEF_FLOOR = 1e-12


@dataclass(frozen=True)
class TransitionKernel:
    """Row-stochastic 2x2 kernel given by persistence probabilities.

    ``per_action`` optionally holds one ``(stay0, stay1)`` pair per action;
    when set it overrides the action-independent pair.
    """

    stay0: float = 0.9
    stay1: float = 0.9
    per_action: Optional[tuple[tuple[float, float], tuple[float, float]]] = None

    def __post_init__(self):
        pairs = [(self.stay0, self.stay1)] + list(self.per_action or ())
        for s0, s1 in pairs:
            if not (0.0 <= s0 <= 1.0 and 0.0 <= s1 <= 1.0):
                raise ValueError(f"persistence probabilities outside [0, 1]: {(s0, s1)}")
        if self.per_action is not None and len(self.per_action) != 2:
            raise ValueError("per_action needs exactly one pair per action")

    @property
    def action_dependent(self) -> bool:
        return self.per_action is not None

    def matrix(self, action: int = 0) -> np.ndarray:
        """T[i, j] = P(s_next = j | s_prev = i)."""
        s0, s1 = self.per_action[int(action)] if self.per_action else (self.stay0, self.stay1)
        return np.array([[s0, 1.0 - s0], [1.0 - s1, s1]])

    def to_dict(self):
        d = {"stay0": self.stay0, "stay1": self.stay1}
        if self.per_action is not None:
            d["per_action"] = [list(p) for p in self.per_action]
        return d

    @classmethod
    def from_dict(cls, d):
        pa = d.get("per_action")
        return cls(float(d["stay0"]), float(d["stay1"]),
                   None if pa is None else tuple(tuple(map(float, p)) for p in pa))


def predict_array(prev: np.ndarray, kernel: TransitionKernel, actions=None) -> np.ndarray:
    prev = np.asarray(prev, dtype=float)
    if not kernel.action_dependent or actions is None:
        return prev @ kernel.matrix(0)
    actions = np.asarray(actions, dtype=int)
    out = np.where(actions[..., None] == 1, prev @ kernel.matrix(1), prev @ kernel.matrix(0))
    return out


def filter_array(predictive: np.ndarray, loglik: np.ndarray) -> np.ndarray:
    """Bayes update in log space; ``loglik`` has a trailing axis of size 2."""
    predictive = np.asarray(predictive, dtype=float)
    loglik = np.asarray(loglik, dtype=float)
    if not np.all(np.isfinite(loglik)):
        raise ValueError("observation log-likelihoods must be finite")
    with np.errstate(divide="ignore"):
        joint = np.log(predictive) + loglik
    m = np.max(joint, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("predictive belief has no mass after weighting")
    w = np.exp(joint - m)
    p0 = w[..., 0] / (w[..., 0] + w[..., 1])
    p0 = np.clip(p0, BELIEF_FLOOR, 1.0 - BELIEF_FLOOR)
    return np.stack([p0, 1.0 - p0], axis=-1)


def predict(prev: Belief, kernel: TransitionKernel, action: Action = Action.ACCEPT) -> Belief:
    return Belief.from_array(predict_array(prev.as_array(), kernel, np.asarray(int(action))))


def filter(predictive: Belief, loglik0: float, loglik1: float) -> Belief:  # noqa: A001
    return Belief.from_array(filter_array(predictive.as_array(), np.array([loglik0, loglik1])))


def risk_score(b: Belief) -> float:
    return b.p_unreliable


def filter_sequence(logliks, kernel: TransitionKernel, initial=(0.5, 0.5), actions=None):
    """Run predict->filter along the time axis of ``logliks`` (..., T, 2).

    The initial belief serves as the predictive belief of the first step.
    ``actions`` (..., T) are the actions taken at each step and only matter for
    action-dependent kernels. Returns the filtered beliefs (..., T, 2).
    """
    logliks = np.asarray(logliks, dtype=float)
    T = logliks.shape[-2]
    out = np.empty_like(logliks)
    pred = np.broadcast_to(np.asarray(initial, dtype=float), logliks.shape[:-2] + (2,))
    for t in range(T):
        if t > 0:
            prev_a = None if actions is None else np.asarray(actions)[..., t - 1]
            pred = predict_array(out[..., t - 1, :], kernel, prev_a)
        out[..., t, :] = filter_array(pred, logliks[..., t, :])
    return out


# --- independent reference posteriors -------------------------------------

MAX_ENUMERATION_T = 15


def _enumerate_posterior(initial, transition, log_em):
    T = log_em.shape[0]
    seqs = (np.arange(2 ** T)[:, None] >> np.arange(T)[None, :]) & 1
    with np.errstate(divide="ignore"):
        logT = np.log(transition)
        log_init = np.log(initial)
    lj = log_init[seqs[:, 0]] + log_em[np.arange(T), seqs].sum(axis=1)
    if T > 1:
        lj = lj + logT[seqs[:, :-1], seqs[:, 1:]].sum(axis=1)
    last = seqs[:, -1]
    lp = np.array([logsumexp(lj[last == s]) for s in (0, 1)])
    return np.exp(lp - logsumexp(lp))


def _forward_posterior(initial, transition, log_em):
    alpha = np.asarray(initial, dtype=float) * np.exp(log_em[0] - log_em[0].max())
    alpha /= alpha.sum()
    for t in range(1, log_em.shape[0]):
        alpha = (transition.T @ alpha) * np.exp(log_em[t] - log_em[t].max())
        alpha /= alpha.sum()
    return alpha


def exact_posterior_oracle(initial, transition, log_emissions, method: str = "enumerate") -> Belief:
    """True posterior over the last latent state of a 2-state HMM.

    ``method="enumerate"`` sums the joint over all 2^T paths (T <= 15);
    ``method="forward"`` uses the scaled forward recursion for any T.
    """
    log_em = np.atleast_2d(np.asarray(log_emissions, dtype=float))
    initial = np.asarray(initial, dtype=float)
    transition = np.asarray(transition, dtype=float)
    if log_em.shape[0] == 0:
        return Belief.from_array(initial)
    if method == "enumerate":
        if log_em.shape[0] > MAX_ENUMERATION_T:
            raise ValueError(f"enumeration limited to T <= {MAX_ENUMERATION_T}, got {log_em.shape[0]}")
        post = _enumerate_posterior(initial, transition, log_em)
    elif method == "forward":
        post = _forward_posterior(initial, transition, log_em)
    else:
        raise ValueError(f"unknown oracle method {method!r}")
    post = post / post.sum()
    return Belief(float(post[0]), float(1.0 - post[0]))


def oracle_posterior_path(initial, transition, log_emissions, method="enumerate") -> np.ndarray:
    """Posterior P(s_t = 0 | obs_1..t) for every prefix t."""
    log_em = np.atleast_2d(np.asarray(log_emissions, dtype=float))
    return np.array([exact_posterior_oracle(initial, transition, log_em[: t + 1], method).p_unreliable
                     for t in range(log_em.shape[0])])


def is_valid_belief(p: Sequence[float]) -> bool:
    p = np.asarray(p, dtype=float)
    return bool(np.all(p >= 0) and abs(p.sum() - 1.0) <= SIMPLEX_TOL)
