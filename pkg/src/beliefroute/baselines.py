"""Comparison controllers.

Every controller exposes ``reset(seed)`` and ``decide(ctx) -> (Action, p)``
where ``ctx`` is a :class:`DecisionContext` holding only what is observable
before the routing decision. Step indices count from 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import Action, Belief, ConfigError
from .signals import PARAM_CLAMP, fit_logistic

KINDS = ("fixed", "random", "periodic", "output_trigger", "confidence_threshold", "risk_predictor")
_RATE_EPS = 1e-9


@dataclass(frozen=True)
class DecisionContext:
    t: int
    belief: Belief
    x: np.ndarray
    z_h: np.ndarray
    z_g: np.ndarray
    hard_raw: np.ndarray
    seed: int = 0


# --- decision rules ---------------------------------------------------------------

def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"rate alpha must lie in [0, 1], got {alpha}")


def decide_fixed(t: int, alpha: float) -> Action:
    """Cumulative-floor schedule: escalate when floor(t*alpha) steps up."""
    _check_alpha(alpha)
    step_up = math.floor(t * alpha + _RATE_EPS) > math.floor((t - 1) * alpha + _RATE_EPS)
    return Action(int(step_up))


def decide_random(rng: np.random.Generator, alpha: float) -> Action:
    _check_alpha(alpha)
    return Action(int(rng.random() < alpha))


def random_draw(seed: int, t: int) -> float:
    """Uniform draw that depends only on (seed, t)."""
    return float(np.random.default_rng([seed, 3, t]).random())


def decide_periodic(t: int, alpha: float) -> Action:
    _check_alpha(alpha)
    if alpha == 0:
        return Action.ACCEPT
    return Action(int(t % round(1.0 / alpha) == 0))


@dataclass(frozen=True)
class TriggerRule:
    """Escalate when hard signal ``signal`` is below ``threshold``.

    With ``raw=True`` the rule reads this step's pass/fail bit (1 or 0),
    otherwise the calibrated windowed value.
    """

    signal: int
    threshold: float = 1.0
    raw: bool = True

    def to_dict(self):
        return {"signal": self.signal, "threshold": self.threshold, "raw": self.raw}


def default_rules(k_h: int) -> list[TriggerRule]:
    return [TriggerRule(j) for j in range(k_h)]


def decide_output_trigger(z_h, rules: Sequence[TriggerRule], hard_raw=None) -> Action:
    if not rules:
        raise ConfigError("output trigger needs at least one rule")
    z_h = np.asarray(z_h, dtype=float)
    raw = z_h if hard_raw is None else np.asarray(hard_raw, dtype=float)
    for rule in rules:
        if not 0 <= rule.signal < z_h.size:
            raise ConfigError(f"trigger rule references unknown hard signal {rule.signal}")
        value = raw[rule.signal] if rule.raw else z_h[rule.signal]
        if value < rule.threshold:
            return Action.ESCALATE
    return Action.ACCEPT


def confidence_risk(z_g) -> float:
    return float(1.0 - np.mean(z_g))


def decide_confidence_threshold(score: float, tau: float) -> Action:
    return Action(int(score >= tau))


def calibrate_threshold(scores, alpha: float) -> float:
    """Smallest threshold whose escalate-if-at-least rate on ``scores`` stays <= alpha.

    When no threshold reaches a positive rate (for example all scores equal),
    the returned value sits just above the maximum and nothing escalates.
    """
    s = np.sort(np.asarray(scores, dtype=float).ravel())[::-1]
    if s.size == 0:
        raise ValueError("cannot calibrate a threshold on no scores")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    allowed = math.floor(alpha * s.size + _RATE_EPS)
    # rate at tau = s[k-1] counts every score >= s[k-1], ties included
    for k in range(allowed, 0, -1):
        tau = s[k - 1]
        if np.count_nonzero(s >= tau) <= allowed:
            return float(tau)
    return float(np.nextafter(s[0], np.inf))


@dataclass(frozen=True)
class RiskPredictor:
    weights: np.ndarray
    bias: float

    def risk(self, z) -> float:
        return float(expit(np.asarray(z, dtype=float) @ self.weights + self.bias))

    def risk_array(self, Z) -> np.ndarray:
        return expit(np.asarray(Z, dtype=float) @ self.weights + self.bias)

    def to_dict(self):
        return {"weights": np.asarray(self.weights).tolist(), "bias": self.bias}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], dtype=float), float(d["bias"]))


def fit_risk_predictor(Z, e) -> RiskPredictor:
    """Logistic regression of error labels on the calibrated signal vector."""
    Z = np.asarray(Z, dtype=float)
    e = np.asarray(e, dtype=float).ravel()
    if Z.size == 0 or e.size == 0:
        raise ValueError("risk predictor needs data")
    if np.all(e == e[0]):
        raise ValueError("risk predictor needs both label classes")
    w, b = fit_logistic(Z.reshape(e.size, -1), e, slope_bounds=(-PARAM_CLAMP, PARAM_CLAMP))
    return RiskPredictor(w, b)


# --- controllers -----------------------------------------------------------------

class Controller:
    name = "controller"

    def reset(self, seed: int) -> None:
        self.seed = seed

    def decide(self, ctx: DecisionContext) -> tuple[Action, float]:
        raise NotImplementedError


class FixedController(Controller):
    name = "fixed"

    def __init__(self, alpha):
        self.alpha = alpha

    def decide(self, ctx):
        a = decide_fixed(ctx.t, self.alpha)
        return a, float(a)


class PeriodicController(Controller):
    name = "periodic"

    def __init__(self, alpha):
        self.alpha = alpha

    def decide(self, ctx):
        a = decide_periodic(ctx.t, self.alpha)
        return a, float(a)


class RandomController(Controller):
    name = "random"

    def __init__(self, alpha):
        _check_alpha(alpha)
        self.alpha = alpha

    def decide(self, ctx):
        return Action(int(random_draw(ctx.seed, ctx.t) < self.alpha)), self.alpha


class OutputTriggerController(Controller):
    name = "output_trigger"

    def __init__(self, rules):
        if not rules:
            raise ConfigError("output trigger needs at least one rule")
        self.rules = list(rules)

    def decide(self, ctx):
        a = decide_output_trigger(ctx.z_h, self.rules, ctx.hard_raw)
        return a, float(a)


class ConfidenceThresholdController(Controller):
    name = "confidence_threshold"

    def __init__(self, tau):
        self.tau = tau

    def decide(self, ctx):
        a = decide_confidence_threshold(confidence_risk(ctx.z_g), self.tau)
        return a, float(a)


class RiskPredictorController(Controller):
    name = "risk_predictor"

    def __init__(self, predictor: RiskPredictor, tau: float):
        self.predictor = predictor
        self.tau = tau

    def decide(self, ctx):
        r = self.predictor.risk(np.concatenate([ctx.z_h, ctx.z_g]))
        a = Action(int(r >= self.tau))
        return a, float(a)


@dataclass
class BaselineConfig:
    kind: str
    alpha: float = 0.05
    tau: Optional[float] = None
    rules: list = field(default_factory=list)
    weights: Optional[list] = None
    bias: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.tau is not None and not 0.0 <= self.tau <= 1.0 + 1e-12:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.tau}")

    def build(self, k_h: int = 4) -> Controller:
        if self.kind == "fixed":
            return FixedController(self.alpha)
        if self.kind == "random":
            return RandomController(self.alpha)
        if self.kind == "periodic":
            return PeriodicController(self.alpha)
        if self.kind == "output_trigger":
            rules = [TriggerRule(**r) if isinstance(r, dict) else r for r in self.rules]
            return OutputTriggerController(rules or default_rules(k_h))
        if self.tau is None:
            raise ConfigError(f"{self.kind} needs a calibrated threshold")
        if self.kind == "confidence_threshold":
            return ConfidenceThresholdController(self.tau)
        if self.weights is None or self.bias is None:
            raise ConfigError("risk_predictor needs fitted weights")
        return RiskPredictorController(RiskPredictor(np.asarray(self.weights, float), self.bias), self.tau)

    def to_dict(self):
        d = {"kind": self.kind, "alpha": self.alpha}
        if self.tau is not None:
            d["tau"] = self.tau
        if self.rules:
            d["rules"] = [r.to_dict() if isinstance(r, TriggerRule) else dict(r) for r in self.rules]
        if self.weights is not None:
            d["weights"] = list(self.weights)
            d["bias"] = self.bias
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "alpha", "tau", "rules", "weights", "bias"}
        if unknown:
            raise ConfigError(f"unknown baseline keys: {sorted(unknown)}")
        return cls(**d)
