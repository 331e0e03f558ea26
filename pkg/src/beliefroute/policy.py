"""Budget-constrained, entropy-regularised actor-critic escalation policy.

Actor and critic are two-layer tanh networks over ``[b(0), x]``. Training is
on-policy with one-step TD advantages; the budget enters through a Lagrange
multiplier updated by projected dual ascent once per iteration.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, log_expit

from .belief import TransitionKernel, filter_array, predict_array
from .core import Action, Belief

PROB_CLAMP = 1e-9


@dataclass(frozen=True)
class RiskProfile:
    rho0: float = 1.0
    rho1: float = 0.0

    def __post_init__(self):
        if self.rho0 < 0 or self.rho1 < 0:
            raise ValueError("risk scores must be nonnegative")

    def as_array(self):
        return np.array([self.rho0, self.rho1])


class MLP:
    """``out = w2 . tanh(W1 x + b1) + b2`` with hand-written backprop."""

    names = ("W1", "b1", "w2", "b2")

    def __init__(self, W1, b1, w2, b2):
        self.W1 = np.asarray(W1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.w2 = np.asarray(w2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float).reshape(())

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator) -> "MLP":
        return cls(rng.uniform(-0.1, 0.1, (hidden, d_in)), np.zeros(hidden),
                   rng.uniform(-0.1, 0.1, hidden), 0.0)

    @property
    def params(self):
        return [self.W1, self.b1, self.w2, self.b2]

    def forward(self, X):
        h = np.tanh(X @ self.W1.T + self.b1)
        return h @ self.w2 + self.b2, h

    def __call__(self, X):
        return self.forward(X)[0]

    def backward(self, X, h, dout):
        """Gradients of ``sum(dout * out)`` w.r.t. each parameter."""
        dpre = np.outer(dout, self.w2) * (1.0 - h * h)
        return [dpre.T @ X, dpre.sum(axis=0), h.T @ dout, np.asarray(dout.sum())]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, v):
        i = 0
        for name in self.names:
            p = getattr(self, name)
            setattr(self, name, np.asarray(v[i:i + p.size], dtype=float).reshape(p.shape))
            i += p.size

    def copy(self) -> "MLP":
        return MLP(*(p.copy() for p in self.params))

    def to_dict(self):
        return {n: getattr(self, n).tolist() for n in self.names}

    @classmethod
    def from_dict(cls, d):
        return cls(*(d[n] for n in cls.names))


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, ascend=False):
        self.t += 1
        sign = 1.0 if ascend else -1.0
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out.append(p + sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out

    def to_dict(self):
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    def load(self, d):
        self.t = int(d["t"])
        self.m = [np.asarray(a, dtype=float) for a in d["m"]]
        self.v = [np.asarray(a, dtype=float) for a in d["v"]]


@dataclass
class PolicyState:
    actor: MLP
    critic: MLP
    mu_d: float = 0.0
    kappa: float = 1.0
    rho: float = 0.01
    gamma: float = 0.99
    C: float = 0.20
    B: float = 1.0
    eta: float = 0.05
    dual_step: float = 0.01
    risk: RiskProfile = field(default_factory=RiskProfile)
    # stabilisers: quadratic pull on actor logits, 1/(1 + c*k) step decay
    logit_penalty: float = 1e-3
    lr_decay: float = 0.05
    dual_decay: float = 0.005
    iteration: int = 0
    optimizer: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mu_d < 0:
            raise ValueError("dual variable must be nonnegative")

    @property
    def d_in(self) -> int:
        return self.actor.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.actor.W1.shape[0]

    def copy(self) -> "PolicyState":
        new = copy.copy(self)
        new.actor, new.critic = self.actor.copy(), self.critic.copy()
        new.optimizer = copy.deepcopy(self.optimizer)
        return new

    def to_dict(self) -> dict:
        return {"actor": self.actor.to_dict(), "critic": self.critic.to_dict(), "mu_d": self.mu_d,
                "hyperparams": {"kappa": self.kappa, "rho": self.rho, "gamma": self.gamma,
                                "C": self.C, "B": self.B, "eta": self.eta,
                                "dual_step": self.dual_step,
                                "logit_penalty": self.logit_penalty,
                                "lr_decay": self.lr_decay, "dual_decay": self.dual_decay,
                                "risk": [self.risk.rho0, self.risk.rho1]},
                "iteration": self.iteration, "optimizer": self.optimizer}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyState":
        hp = dict(d["hyperparams"])
        risk = RiskProfile(*hp.pop("risk"))
        return cls(MLP.from_dict(d["actor"]), MLP.from_dict(d["critic"]), float(d["mu_d"]),
                   risk=risk, iteration=int(d["iteration"]), optimizer=d.get("optimizer", {}), **hp)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), separators=(",", ":")), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "PolicyState":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def init_policy(d_x: int, hidden: int = 16, seed: int = 0, **hyper) -> PolicyState:
    rng = np.random.default_rng([seed, 7])
    d_in = 1 + d_x
    return PolicyState(MLP.init(d_in, hidden, rng), MLP.init(d_in, hidden, rng), **hyper)


def policy_inputs(b0, x) -> np.ndarray:
    b0 = np.asarray(b0, dtype=float)
    x = np.asarray(x, dtype=float)
    return np.concatenate([b0[..., None], x], axis=-1)


def escalation_prob(logit):
    return np.clip(expit(logit), PROB_CLAMP, 1.0 - PROB_CLAMP)


def act(b: Belief, x, policy: PolicyState, rng: Optional[np.random.Generator] = None,
        greedy: bool = False) -> tuple[Action, float]:
    """Escalation decision and its probability under the actor."""
    logit = float(policy.actor(policy_inputs(b.p_unreliable, x)[None, :])[0])
    if not math.isfinite(logit):
        raise FloatingPointError(f"actor produced a non-finite logit for belief {b}")
    p = float(escalation_prob(logit))
    if greedy:
        return (Action.ESCALATE if logit > 0 else Action.ACCEPT), p
    if rng is None:
        raise ValueError("stochastic action selection needs a random generator")
    return (Action.ESCALATE if rng.random() < p else Action.ACCEPT), p


def reward(utility: float, action, b: Belief, risk: RiskProfile, kappa: float, C: float) -> float:
    cost = C if int(action) == 1 else 0.0
    R = b.p_unreliable * risk.rho0 + b.p_reliable * risk.rho1
    return utility - cost - kappa * R


def entropy(p):
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    h = -p * np.log(p) - (1.0 - p) * np.log1p(-p)
    return float(h) if h.ndim == 0 else h


def _entropy_from_logit(logit):
    p = expit(logit)
    return -(p * log_expit(logit) + (1.0 - p) * log_expit(-logit))


def augmented_step_reward(r: float, action, policy: PolicyState, p_escalate: float = 0.5) -> float:
    cost = policy.C if int(action) == 1 else 0.0
    return (r + policy.mu_d * (policy.B * (1.0 - policy.gamma) - cost)
            + policy.rho * entropy(p_escalate))


def update_dual(mu_d: float, avg_discounted_cost: float, B: float, step: float) -> float:
    if mu_d < 0:
        raise ValueError("dual variable must be nonnegative")
    return max(0.0, mu_d + step * (avg_discounted_cost - B))


# --- objectives and their gradients ---------------------------------------------

def actor_objective(actor: MLP, inputs, actions, advantages, rho, logit_penalty: float = 0.0):
    """Mean of ``A * log pi(a) + rho * H(pi) - logit_penalty * logit^2`` and its gradients.

    The last term keeps logits away from the flat tails of the logistic,
    where the score-function gradient vanishes and the policy cannot recover.
    """
    X = inputs.reshape(-1, inputs.shape[-1])
    a = np.asarray(actions, dtype=float).ravel()
    A = np.asarray(advantages, dtype=float).ravel()
    logit, h = actor.forward(X)
    p = expit(logit)
    logp = np.where(a == 1, log_expit(logit), log_expit(-logit))
    J = np.mean(A * logp + rho * _entropy_from_logit(logit) - logit_penalty * logit * logit)
    dlogit = (A * (a - p) - rho * logit * p * (1.0 - p) - 2.0 * logit_penalty * logit) / X.shape[0]
    return J, actor.backward(X, h, dlogit)


def critic_loss(critic: MLP, inputs, targets):
    """Mean of ``0.5 * (target - V)^2`` with targets held fixed."""
    X = inputs.reshape(-1, inputs.shape[-1])
    y = np.asarray(targets, dtype=float).ravel()
    v, h = critic.forward(X)
    L = 0.5 * np.mean((y - v) ** 2)
    return L, critic.backward(X, h, (v - y) / X.shape[0])


# --- rollouts ------------------------------------------------------------------------

@dataclass
class TrainingBatch:
    """Pre-drawn episodes: request features, observation log-likelihoods, tier utilities."""

    x: np.ndarray        # (E, T, d_x)
    loglik: np.ndarray   # (E, T, 2)
    v0: np.ndarray       # (E, T)
    v1: np.ndarray       # (E, T)
    kernel: TransitionKernel = field(default_factory=TransitionKernel)
    initial: tuple = (0.5, 0.5)

    @property
    def shape(self):
        return self.v0.shape


@dataclass
class Rollout:
    inputs: np.ndarray
    beliefs: np.ndarray
    actions: np.ndarray
    probs: np.ndarray
    logits: np.ndarray
    utility: np.ndarray
    cost: np.ndarray


def rollout(batch: TrainingBatch, policy: PolicyState, rng: np.random.Generator,
            greedy: bool = False) -> Rollout:
    E, T = batch.shape
    U = rng.random((T, E))
    if not batch.kernel.action_dependent:
        from .belief import filter_sequence
        beliefs = filter_sequence(batch.loglik, batch.kernel, batch.initial)
        inputs = policy_inputs(beliefs[..., 0], batch.x)
        logits = policy.actor(inputs.reshape(E * T, -1)).reshape(E, T)
        probs = escalation_prob(logits)
        actions = (logits > 0) if greedy else (U.T < probs)
    else:
        beliefs = np.empty((E, T, 2))
        inputs = np.empty((E, T, 1 + batch.x.shape[-1]))
        logits = np.empty((E, T))
        actions = np.zeros((E, T), dtype=bool)
        pred = np.broadcast_to(np.asarray(batch.initial, float), (E, 2))
        for t in range(T):
            if t > 0:
                pred = predict_array(beliefs[:, t - 1], batch.kernel, actions[:, t - 1])
            beliefs[:, t] = filter_array(pred, batch.loglik[:, t])
            inputs[:, t] = policy_inputs(beliefs[:, t, 0], batch.x[:, t])
            logits[:, t] = policy.actor(inputs[:, t])
            p = escalation_prob(logits[:, t])
            actions[:, t] = (logits[:, t] > 0) if greedy else (U[t] < p)
        probs = escalation_prob(logits)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("actor produced non-finite logits during rollout")
    actions = actions.astype(int)
    utility = np.where(actions == 1, batch.v1, batch.v0)
    return Rollout(inputs, beliefs, actions, probs, logits, utility, policy.C * actions)


def discounted_costs(cost, gamma) -> np.ndarray:
    """Per-episode sum of gamma^t * cost_t, t from 0."""
    cost = np.asarray(cost, dtype=float)
    return cost @ (gamma ** np.arange(cost.shape[-1]))


@dataclass
class TrainResult:
    policy: PolicyState
    history: list


def train(batch_source: Callable[[int], TrainingBatch], policy: PolicyState, iterations: int,
          seed: int = 0, update_dual_variable: bool = True,
          callback: Optional[Callable[[int, PolicyState, dict], None]] = None) -> TrainResult:
    """On-policy actor-critic under the Lagrangian objective.

    ``batch_source(i)`` returns the episodes for iteration ``i``. Each
    iteration rolls out the current actor, forms one-step TD advantages of
    the augmented reward, takes one Adam step on actor and critic, then
    updates the dual variable on the batch-average discounted cost. Both
    step sizes decay as ``1 / (1 + c * k)`` in the iteration count ``k``.
    """
    pol = policy.copy()
    rng = np.random.default_rng([seed, 11])
    shapes = [p.shape for p in pol.actor.params]
    opt_a, opt_c = Adam(shapes, pol.eta), Adam(shapes, pol.eta)
    if pol.optimizer:
        opt_a.load(pol.optimizer["actor"])
        opt_c.load(pol.optimizer["critic"])
    history = []
    risk = pol.risk.as_array()
    for it in range(iterations):
        k = pol.iteration
        opt_a.lr = opt_c.lr = pol.eta / (1.0 + pol.lr_decay * k)
        batch = batch_source(k)
        ro = rollout(batch, pol, rng)
        r = ro.utility - ro.cost - pol.kappa * (ro.beliefs @ risk)
        ent = _entropy_from_logit(ro.logits)
        aug = r + pol.mu_d * (pol.B * (1.0 - pol.gamma) - ro.cost) + pol.rho * ent
        v = pol.critic(ro.inputs.reshape(-1, ro.inputs.shape[-1])).reshape(ro.cost.shape)
        # the last step bootstraps from its own value: episodes are truncated, not terminal
        v_next = np.concatenate([v[:, 1:], v[:, -1:]], axis=1)
        target = aug + pol.gamma * v_next
        adv = target - v

        J, g_a = actor_objective(pol.actor, ro.inputs, ro.actions, adv, pol.rho, pol.logit_penalty)
        Lc, g_c = critic_loss(pol.critic, ro.inputs, target)
        norms = [float(np.sqrt(sum(np.sum(g * g) for g in gs))) for gs in (g_a, g_c)]
        if not all(math.isfinite(n) for n in norms):
            raise FloatingPointError(
                f"non-finite gradient at iteration {k}: actor norm {norms[0]}, "
                f"critic norm {norms[1]}, mu_d {pol.mu_d}")
        pol.actor = MLP(*opt_a.step(pol.actor.params, g_a, ascend=True))
        pol.critic = MLP(*opt_c.step(pol.critic.params, g_c))

        dcost = discounted_costs(ro.cost, pol.gamma)
        info = {"iteration": k, "mu_d": pol.mu_d, "batch_cost": float(dcost.mean()),
                "utility": float(ro.utility.mean()), "escalation_rate": float(ro.actions.mean()),
                "actor_objective": float(J), "critic_loss": float(Lc),
                "actor_grad_norm": norms[0], "critic_grad_norm": norms[1]}
        if update_dual_variable:
            step = pol.dual_step / (1.0 + pol.dual_decay * k)
            pol.mu_d = update_dual(pol.mu_d, float(dcost.mean()), pol.B, step)
        pol.iteration += 1
        pol.optimizer = {"actor": opt_a.to_dict(), "critic": opt_c.to_dict()}
        history.append(info)
        if callback is not None:
            callback(it, pol, info)
    return TrainResult(pol, history)
