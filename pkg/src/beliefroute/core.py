"""Shared value types, configuration and line-delimited persistence."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

SIMPLEX_TOL = 1e-12


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


class Action(enum.IntEnum):
    ACCEPT = 0
    ESCALATE = 1

    @property
    def escalate(self) -> bool:
        return self is Action.ESCALATE


@dataclass(frozen=True)
class RequestFeatures:
    request_id: int
    features: tuple[float, ...]

    def __post_init__(self):
        if self.request_id < 1:
            raise ValueError(f"request ids start at 1, got {self.request_id}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=float)


@dataclass(frozen=True)
class ResponseOutcome:
    is_default: bool
    utility: float
    response_features: tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.utility <= 1.0:
            raise ValueError(f"utility must lie in [0, 1], got {self.utility}")


@dataclass(frozen=True)
class Belief:
    """Distribution over the latent state; index 0 is unreliable, 1 reliable."""

    p_unreliable: float
    p_reliable: float

    def __post_init__(self):
        p0, p1 = self.p_unreliable, self.p_reliable
        if not (0.0 <= p0 <= 1.0 and 0.0 <= p1 <= 1.0):
            raise ValueError(f"belief components outside [0, 1]: {(p0, p1)}")
        if abs(p0 + p1 - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"belief does not sum to 1: {(p0, p1)}")

    @classmethod
    def uniform(cls) -> "Belief":
        return cls(0.5, 0.5)

    @classmethod
    def from_array(cls, p) -> "Belief":
        p = np.asarray(p, dtype=float)
        return cls(float(p[0]), float(p[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.p_unreliable, self.p_reliable])


def _json_float(x: Optional[float]):
    if x is None:
        return None
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value cannot be persisted: {x}")
    return x


@dataclass(frozen=True)
class StepRecord:
    step: int
    z: tuple[float, ...]
    belief: Belief
    action: Action
    p_escalate: float
    cost: float
    utility: float
    reward: float
    s_true: Optional[int] = None
    e_label: Optional[int] = None

    def __post_init__(self):
        if (int(self.action) == 1) != (self.cost > 0):
            raise ValueError(f"cost {self.cost} inconsistent with action {int(self.action)}")

    def to_dict(self) -> dict:
        return {
            "step": int(self.step),
            "z": [_json_float(v) for v in self.z],
            "belief": [_json_float(self.belief.p_unreliable), _json_float(self.belief.p_reliable)],
            "action": int(self.action),
            "p_escalate": _json_float(self.p_escalate),
            "cost": _json_float(self.cost),
            "utility": _json_float(self.utility),
            "s_true": None if self.s_true is None else int(self.s_true),
            "e_label": None if self.e_label is None else int(self.e_label),
            "reward": _json_float(self.reward),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        try:
            b = d["belief"]
            return cls(
                step=int(d["step"]),
                z=tuple(float(v) for v in d["z"]),
                belief=Belief(float(b[0]), float(b[1])),
                action=Action(int(d["action"])),
                p_escalate=float(d["p_escalate"]),
                cost=float(d["cost"]),
                utility=float(d["utility"]),
                reward=float(d["reward"]),
                s_true=None if d.get("s_true") is None else int(d["s_true"]),
                e_label=None if d.get("e_label") is None else int(d["e_label"]),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"malformed step record: {d!r}") from exc

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        return cls.from_dict(json.loads(line))


@dataclass(frozen=True)
class EpisodeLog:
    seed: int
    records: tuple[StepRecord, ...]
    config_hash: str = ""

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name == "p_hat":
            return np.array([r.belief.p_unreliable for r in self.records])
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def labels(self, name: str) -> Optional[np.ndarray]:
        vals = [getattr(r, name) for r in self.records]
        if any(v is None for v in vals):
            return None
        return np.asarray(vals, dtype=int)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path, seed: int = -1, config_hash: str = "") -> "EpisodeLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        recs = tuple(StepRecord.from_json(ln) for ln in lines if ln.strip())
        return cls(seed=seed, records=recs, config_hash=config_hash)


def budget_from_alpha(alpha: float, C: float, gamma: float) -> float:
    """Discounted budget B such that B * (1 - gamma) == alpha * C."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    return alpha * C / (1.0 - gamma)


def parse_seed_range(text: str) -> list[int]:
    """Parse ``a..b`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


@dataclass
class ExperimentConfig:
    H: int = 500
    alpha: float = 0.05
    gamma: float = 0.99
    C: float = 0.20
    kappa: float = 1.0
    rho: float = 0.01
    eta: float = 0.05
    W: int = 20
    k_h: int = 4
    k_g: int = 2
    d_x: int = 4
    seeds: list = field(default_factory=lambda: list(range(1000, 1020)))
    calibration_seeds: list = field(default_factory=lambda: list(range(0, 40)))
    validation_seeds: list = field(default_factory=lambda: list(range(500, 510)))
    train_seed_base: int = 100_000
    # policy training
    iterations: int = 500
    batch_episodes: int = 64
    hidden: int = 16
    dual_step: float = 0.01
    logit_penalty: float = 1e-3
    lr_decay: float = 0.05
    dual_decay: float = 0.005
    checkpoint_every: int = 50
    risk: list = field(default_factory=lambda: [1.0, 0.0])
    # belief dynamics
    stay0: float = 0.9
    stay1: float = 0.9
    initial_belief: list = field(default_factory=lambda: [0.5, 0.5])
    # evaluation
    quality_threshold: float = 1.0
    ece_bins: int = 10
    cvar_beta: float = 0.9
    recd_run: int = 3
    recd_recovery: int = 5
    sweep_alphas: list = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.10, 0.20])
    # component documents, filled by calibration or by hand
    env: dict = field(default_factory=dict)
    hard_priors: list = field(default_factory=list)
    soft_cal: list = field(default_factory=list)
    encoder: dict = field(default_factory=dict)
    controller: dict = field(default_factory=lambda: {"kind": "policy"})
    # calibrated baseline parameters keyed by kind (tau, weights, bias, rules)
    baselines: dict = field(default_factory=dict)
    trace: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.W < 1:
            raise ConfigError(f"W must be >= 1, got {self.W}")
        if self.C <= 0:
            raise ConfigError(f"C must be positive, got {self.C}")
        if self.kappa < 0 or self.rho < 0:
            raise ConfigError("kappa and rho must be nonnegative")
        if self.H < 1:
            raise ConfigError(f"H must be >= 1, got {self.H}")
        if self.batch_episodes < 1 or self.iterations < 0:
            raise ConfigError("batch_episodes must be >= 1 and iterations >= 0")
        if min(self.logit_penalty, self.lr_decay, self.dual_decay, self.dual_step) < 0:
            raise ConfigError("step sizes, decays and the logit penalty must be nonnegative")
        if any(not 0.0 < a <= 1.0 for a in self.sweep_alphas):
            raise ConfigError(f"sweep alphas must lie in (0, 1]: {self.sweep_alphas}")

    @property
    def B(self) -> float:
        return budget_from_alpha(self.alpha, self.C, self.gamma)

    @property
    def k(self) -> int:
        return self.k_h + self.k_g

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def as_tuple(values: Iterable[float]) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


def logistic(x):
    """Numerically stable logistic function (scalar or array)."""
    from scipy.special import expit

    return expit(x)


def stack_records(logs: Sequence[EpisodeLog], name: str) -> np.ndarray:
    return np.concatenate([log.column(name) for log in logs]) if logs else np.empty(0)


def to_jsonable(obj: Any):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj
