"""Black-box service backends: synthetic simulator, trace replay, live stub.

Every simulated step consumes one fixed-size block of uniforms from the
episode's environment stream, and both service tiers are drawn on every step.
Controllers therefore cannot perturb the environment (common random numbers),
and the batch sampler reproduces the step-by-step sampler bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Protocol, Sequence

import numpy as np
from scipy import stats
from scipy.special import betaincinv, betaln, ndtri

from .belief import TransitionKernel
from .core import Action, RequestFeatures, ResponseOutcome
from .obsmodel import EncoderParams

ENV_STREAM = 0
U_CLIP = 1e-16
G_CLIP = 1e-12


def env_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), ENV_STREAM])


@dataclass(frozen=True)
class EnvModel:
    pi0: tuple = (0.5, 0.5)
    stay0: float = 0.9
    stay1: float = 0.9
    # theta[j] = (P(pass | s=0), P(pass | s=1))
    theta: tuple = ((0.3, 0.9),) * 4
    # soft_a[s][i], soft_b[s][i]: Beta parameters of soft score i in state s
    soft_a: tuple = ((2.0, 2.0), (8.0, 8.0))
    soft_b: tuple = ((8.0, 8.0), (2.0, 2.0))
    q0: tuple = (0.15, 0.95)
    q1: float = 0.9
    d_x: int = 4
    length_coupling: float = 0.5

    def __post_init__(self):
        probs = [*self.pi0, self.stay0, self.stay1, *np.ravel(self.theta), *self.q0, self.q1]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("environment probabilities must lie in [0, 1]")
        if abs(sum(self.pi0) - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")
        a, b = np.asarray(self.soft_a, float), np.asarray(self.soft_b, float)
        if a.shape != b.shape or a.shape[0] != 2:
            raise ValueError("soft Beta parameters need shape (2, k_g)")
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("Beta parameters must be positive")
        if np.asarray(self.theta).shape[-1] != 2:
            raise ValueError("theta needs one (state0, state1) pair per hard check")

    @property
    def k_h(self) -> int:
        return len(self.theta)

    @property
    def k_g(self) -> int:
        return len(self.soft_a[0])

    @property
    def d_r(self) -> int:
        return 1 + self.k_h + 2 * self.k_g

    @property
    def n_uniforms(self) -> int:
        return 1 + self.k_h + self.k_g + 2 + self.d_x + 1

    def kernel(self) -> TransitionKernel:
        return TransitionKernel(self.stay0, self.stay1)

    def to_dict(self) -> dict:
        return {"pi0": list(self.pi0), "stay0": self.stay0, "stay1": self.stay1,
                "theta": [list(t) for t in self.theta],
                "soft_a": [list(r) for r in self.soft_a], "soft_b": [list(r) for r in self.soft_b],
                "q0": list(self.q0), "q1": self.q1, "d_x": self.d_x,
                "length_coupling": self.length_coupling}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvModel":
        if not d:
            return cls()
        tup = lambda v: tuple(tuple(float(x) for x in r) for r in v)  # noqa: E731
        kw = dict(d)
        for key in ("theta", "soft_a", "soft_b"):
            if key in kw:
                kw[key] = tup(kw[key])
        for key in ("pi0", "q0"):
            if key in kw:
                kw[key] = tuple(float(x) for x in kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class EnvStep:
    """Everything the service produces for one request, both tiers included."""

    request: RequestFeatures
    hard: tuple[bool, ...]
    soft: tuple[float, ...]
    default: ResponseOutcome
    enhanced: ResponseOutcome
    s: Optional[int] = None


def _advance(model: EnvModel, prev_s, u):
    """Next latent state from one uniform; ``prev_s`` None means initial draw."""
    u = np.asarray(u, dtype=float)
    if prev_s is None:
        return np.where(u < model.pi0[0], 0, 1)
    prev_s = np.asarray(prev_s)
    stay = np.where(prev_s == 0, model.stay0, model.stay1)
    return np.where(u < stay, prev_s, 1 - prev_s)


def _emit(model: EnvModel, s, U):
    """Map latent states (...) and uniform blocks (..., n_u) to observations."""
    s = np.asarray(s)
    U = np.clip(np.asarray(U, dtype=float), U_CLIP, 1.0 - U_CLIP)
    k_h, k_g, d_x = model.k_h, model.k_g, model.d_x
    i = 1
    u_h = U[..., i:i + k_h]; i += k_h
    u_g = U[..., i:i + k_g]; i += k_g
    u_def, u_enh = U[..., i], U[..., i + 1]; i += 2
    u_x = U[..., i:i + d_x]; i += d_x
    u_len = U[..., i]

    theta = np.asarray(model.theta, dtype=float)          # (k_h, 2)
    hard = u_h < theta.T[s]
    a = np.asarray(model.soft_a, dtype=float)[s]
    b = np.asarray(model.soft_b, dtype=float)[s]
    soft = np.clip(betaincinv(a, b, u_g), G_CLIP, 1.0 - G_CLIP)
    v0 = (u_def < np.asarray(model.q0)[s]).astype(float)
    v1 = (u_enh < model.q1).astype(float)
    x = ndtri(u_x)
    c = model.length_coupling
    length = c * x[..., 0] + np.sqrt(1.0 - c * c) * ndtri(u_len)
    feats = response_features(length, hard, soft)
    return x, hard, soft, v0, v1, feats


def response_features(length, hard, soft) -> np.ndarray:
    """Surface features of a default response: [length, checks, log g, log(1-g) ...]."""
    hard = np.asarray(hard, dtype=float)
    soft = np.asarray(soft, dtype=float)
    logs = np.stack([np.log(soft), np.log1p(-soft)], axis=-1).reshape(soft.shape[:-1] + (-1,))
    return np.concatenate([np.asarray(length, dtype=float)[..., None], hard, logs], axis=-1)


def step_env(model: EnvModel, prev_s: Optional[int], rng: np.random.Generator,
             request_id: int = 1) -> EnvStep:
    """Advance the simulator by one request."""
    U = rng.random(model.n_uniforms)
    s = int(_advance(model, prev_s, U[0]))
    x, hard, soft, v0, v1, feats = _emit(model, np.asarray(s), U)
    return EnvStep(
        request=RequestFeatures(request_id, tuple(float(v) for v in x)),
        hard=tuple(bool(h) for h in hard),
        soft=tuple(float(g) for g in soft),
        default=ResponseOutcome(True, float(v0), tuple(float(v) for v in feats)),
        enhanced=ResponseOutcome(False, float(v1)),
        s=s,
    )


class SimulatedService:
    """Sequential simulator episode bound to one seed."""

    def __init__(self, model: EnvModel, seed: int):
        self.model = model
        self.seed = seed

    def steps(self, H: int) -> Iterator[EnvStep]:
        rng = env_rng(self.seed)
        s = None
        for t in range(1, H + 1):
            step = step_env(self.model, s, rng, request_id=t)
            s = step.s
            yield step


@dataclass
class EpisodeArrays:
    """Batch of simulated episodes; leading axes are (episode, step)."""

    x: np.ndarray
    s: Optional[np.ndarray]
    hard: np.ndarray
    soft: np.ndarray
    features: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    seeds: list = field(default_factory=list)

    @property
    def shape(self):
        return self.v0.shape

    def take(self, idx) -> "EpisodeArrays":
        idx = np.asarray(idx)
        return EpisodeArrays(self.x[idx], None if self.s is None else self.s[idx], self.hard[idx],
                             self.soft[idx], self.features[idx], self.v0[idx], self.v1[idx],
                             [self.seeds[i] for i in idx] if self.seeds else [])


def sample_episodes(model: EnvModel, seeds: Sequence[int], H: int) -> EpisodeArrays:
    """Vectorised equivalent of running :class:`SimulatedService` per seed."""
    seeds = list(seeds)
    U = np.stack([env_rng(sd).random((H, model.n_uniforms)) for sd in seeds])
    E = len(seeds)
    s = np.empty((E, H), dtype=int)
    prev = None
    for t in range(H):
        prev = _advance(model, prev, U[:, t, 0])
        s[:, t] = prev
    x, hard, soft, v0, v1, feats = _emit(model, s, U)
    return EpisodeArrays(x, s, hard, soft, feats, v0, v1, seeds)


# --- oracle bridge -----------------------------------------------------------

@dataclass(frozen=True)
class HMM:
    initial: np.ndarray
    transition: np.ndarray
    theta: np.ndarray
    soft_a: np.ndarray
    soft_b: np.ndarray
    q0: np.ndarray

    def log_emission(self, hard, soft, default_correct=None) -> np.ndarray:
        """Log density of one step's observables under each latent state."""
        hard = np.asarray(hard, dtype=bool)
        soft = np.asarray(soft, dtype=float)
        out = np.zeros(2)
        for s in (0, 1):
            out[s] += stats.bernoulli.logpmf(hard.astype(int), self.theta[:, s]).sum()
            out[s] += stats.beta.logpdf(soft, self.soft_a[s], self.soft_b[s]).sum()
            if default_correct is not None:
                out[s] += stats.bernoulli.logpmf(int(default_correct), self.q0[s])
        return out

    def log_emissions(self, hard, soft, default_correct=None) -> np.ndarray:
        hard = np.asarray(hard)
        T = hard.shape[0]
        dc = [None] * T if default_correct is None else list(default_correct)
        return np.array([self.log_emission(hard[t], soft[t], dc[t]) for t in range(T)])


def env_as_hmm(model: EnvModel) -> HMM:
    return HMM(initial=np.asarray(model.pi0, dtype=float),
               transition=model.kernel().matrix(0),
               theta=np.asarray(model.theta, dtype=float),
               soft_a=np.asarray(model.soft_a, dtype=float),
               soft_b=np.asarray(model.soft_b, dtype=float),
               q0=np.asarray(model.q0, dtype=float))


def matched_encoder(model: EnvModel) -> EncoderParams:
    """Encoder whose scores equal the simulator's per-step emission log-density.

    Works on the response-feature layout of :func:`response_features`; the
    hard-window and calibrated-soft blocks get zero weight.
    """
    theta = np.asarray(model.theta, dtype=float)
    if np.any(theta <= 0) or np.any(theta >= 1):
        raise ValueError("matched encoder needs check probabilities strictly inside (0, 1)")
    a = np.asarray(model.soft_a, dtype=float)
    b = np.asarray(model.soft_b, dtype=float)
    wy = np.zeros((2, model.d_r))
    by = np.zeros(2)
    for s in (0, 1):
        th = theta[:, s]
        wy[s, 1:1 + model.k_h] = np.log(th) - np.log1p(-th)
        wy[s, 1 + model.k_h::2] = a[s] - 1.0
        wy[s, 2 + model.k_h::2] = b[s] - 1.0
        by[s] = np.log1p(-th).sum() - betaln(a[s], b[s]).sum()
    enc = EncoderParams.zeros(model.d_r, model.k_h, model.k_g)
    return EncoderParams(wy, by, enc.wh, enc.bh, enc.soft_slope, enc.soft_bias)


# --- trace replay ----------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    x: tuple[float, ...]
    default_utility: float
    hard: tuple[bool, ...]
    soft: tuple[float, ...]
    features: tuple[float, ...]
    enhanced_utility: float

    @classmethod
    def from_dict(cls, d: dict) -> "TraceRecord":
        if "enhanced" not in d or not isinstance(d["enhanced"], dict) or "utility" not in d["enhanced"]:
            raise ValueError("trace record is missing the enhanced branch")
        if "default" not in d:
            raise ValueError("trace record is missing the default branch")
        dflt = d["default"]
        try:
            return cls(tuple(float(v) for v in d["x"]), float(dflt["utility"]),
                       tuple(bool(v) for v in dflt["hard"]), tuple(float(v) for v in dflt["soft"]),
                       tuple(float(v) for v in dflt["features"]), float(d["enhanced"]["utility"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed trace record: {exc}") from exc

    def to_dict(self) -> dict:
        return {"x": list(self.x),
                "default": {"utility": self.default_utility, "hard": [int(h) for h in self.hard],
                            "soft": list(self.soft), "features": list(self.features)},
                "enhanced": {"utility": self.enhanced_utility}}


@dataclass(frozen=True)
class ReplayResult:
    outcome: ResponseOutcome
    hard: tuple[bool, ...]
    soft: tuple[float, ...]


def replay_step(trace: TraceRecord, action) -> ReplayResult:
    if Action(int(action)) is Action.ESCALATE:
        out = ResponseOutcome(False, trace.enhanced_utility)
    else:
        out = ResponseOutcome(True, trace.default_utility, trace.features)
    return ReplayResult(out, trace.hard, trace.soft)


def read_trace(path) -> list[TraceRecord]:
    recs = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            recs.append(TraceRecord.from_dict(json.loads(line)))
        except (ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    return recs


def write_trace(records: Sequence[TraceRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r.to_dict(), separators=(",", ":")) + "\n" for r in records),
                    encoding="utf-8")
    return path


def trace_from_steps(steps: Sequence[EnvStep]) -> list[TraceRecord]:
    return [TraceRecord(st.request.features, st.default.utility, st.hard, st.soft,
                        st.default.response_features, st.enhanced.utility) for st in steps]


class TraceService:
    """Replays recorded requests in order; latent states are unknown."""

    def __init__(self, records: Sequence[TraceRecord], offset: int = 0):
        self.records = list(records)
        self.offset = offset

    def steps(self, H: int) -> Iterator[EnvStep]:
        if self.offset + H > len(self.records):
            raise ValueError(f"trace has {len(self.records)} records, need {self.offset + H}")
        for t in range(1, H + 1):
            r = self.records[self.offset + t - 1]
            yield EnvStep(RequestFeatures(t, r.x), r.hard, r.soft,
                          replay_step(r, Action.ACCEPT).outcome,
                          replay_step(r, Action.ESCALATE).outcome, None)


def trace_arrays(records: Sequence[TraceRecord], H: int) -> EpisodeArrays:
    """Cut a trace into consecutive H-step episodes (remainder dropped)."""
    E = len(records) // H
    if E == 0:
        raise ValueError(f"trace shorter than one episode of {H} steps")
    recs = records[: E * H]
    arr = lambda f, dt=float: np.asarray([f(r) for r in recs], dtype=dt).reshape(E, H, -1)  # noqa: E731
    return EpisodeArrays(arr(lambda r: r.x), None, arr(lambda r: r.hard, bool), arr(lambda r: r.soft),
                         arr(lambda r: r.features), arr(lambda r: [r.default_utility])[..., 0],
                         arr(lambda r: [r.enhanced_utility])[..., 0], list(range(E)))


# --- live services ----------------------------------------------------------------

class BackendAdapter(Protocol):
    def respond(self, request: RequestFeatures, tier: Action, seed: int
                ) -> tuple[ResponseOutcome, tuple[bool, ...], tuple[float, ...]]:
        ...


class LiveServiceAdapter:
    """Adapter for real model services; supply the two tier callables.

    Each callable maps ``(request, seed)`` to ``(outcome, hard, soft)``. No
    transport is bundled.
    """

    def __init__(self, default_fn: Optional[Callable] = None, enhanced_fn: Optional[Callable] = None):
        self.default_fn = default_fn
        self.enhanced_fn = enhanced_fn

    def respond(self, request, tier, seed):
        fn = self.enhanced_fn if Action(int(tier)) is Action.ESCALATE else self.default_fn
        if fn is None:
            raise NotImplementedError("no live backend configured for this tier")
        outcome, hard, soft = fn(request, seed)
        if outcome.is_default != (Action(int(tier)) is Action.ACCEPT):
            raise ValueError("backend returned an outcome from the wrong tier")
        return outcome, tuple(hard), tuple(soft)
