import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from beliefroute.belief import TransitionKernel
from beliefroute.core import Action, Belief
from beliefroute.policy import (MLP, PolicyState, RiskProfile, TrainingBatch, act, actor_objective,
                                augmented_step_reward, critic_loss, discounted_costs, entropy,
                                init_policy, policy_inputs, reward, rollout, train, update_dual)


def test_reward_examples():
    rp = RiskProfile(1.0, 0.0)
    assert reward(1, Action.ACCEPT, Belief(0, 1), rp, 1.0, 0.2) == 1
    assert reward(1, Action.ESCALATE, Belief(0, 1), rp, 1.0, 0.2) == pytest.approx(0.8)
    assert reward(0, Action.ACCEPT, Belief(0.5, 0.5), rp, 1.0, 0.2) == -0.5
    with pytest.raises(ValueError):
        RiskProfile(-1, 0)


def test_entropy_examples():
    assert entropy(0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert entropy(1.0) < 1e-7
    assert entropy(0.9) == pytest.approx(-0.9 * math.log(0.9) - 0.1 * math.log(0.1), abs=1e-12)
    assert entropy(0.9) == pytest.approx(0.325083, abs=1e-6)


def test_augmented_reward_examples():
    pol = init_policy(2, rho=0.0, B=1.0, gamma=0.99, C=0.2)
    assert augmented_step_reward(0.7, Action.ESCALATE, pol) == 0.7
    pol.mu_d = 1.0
    assert augmented_step_reward(0.0, Action.ACCEPT, pol) == pytest.approx(0.01, abs=1e-12)
    assert augmented_step_reward(0.0, Action.ESCALATE, pol) == pytest.approx(-0.19, abs=1e-12)


@given(st.floats(0, 1), st.sampled_from([0, 1]), st.floats(0, 1), st.floats(0, 3), st.floats(0, 3),
       st.floats(0, 5))
def test_augmented_reduces_to_reward(v, a, b0, r0, r1, kappa):
    pol = init_policy(2, rho=0.0, kappa=kappa, risk=RiskProfile(r0, r1))
    r = reward(v, a, Belief(b0, 1 - b0), pol.risk, kappa, pol.C)
    assert augmented_step_reward(r, a, pol, 0.3) == r


def test_update_dual_examples():
    assert update_dual(0.0, 0.5, 1.0, 0.01) == 0.0
    assert update_dual(0.0, 1.5, 1.0, 0.1) == pytest.approx(0.05)
    assert update_dual(0.02, 0.0, 1.0, 0.1) == 0.0
    with pytest.raises(ValueError):
        update_dual(-0.1, 1.0, 1.0, 0.1)


@given(st.lists(st.floats(0, 50), min_size=1, max_size=50), st.floats(1e-4, 1.0))
def test_dual_never_negative(costs, step):
    mu = 0.0
    for c in costs:
        mu = update_dual(mu, c, 1.0, step)
        assert mu >= 0


def test_act_examples():
    pol = init_policy(3)
    for m in (pol.actor,):
        for p in m.params:
            p[...] = 0
    rng = np.random.default_rng(0)
    for b0 in (0.0, 0.3, 1.0):
        _, p = act(Belief(b0, 1 - b0), np.ones(3), pol, rng)
        assert p == 0.5
    pol.actor.b2[...] = 2.0
    assert act(Belief(0.5, 0.5), np.zeros(3), pol, greedy=True)[0] == Action.ESCALATE
    pol.actor.b2[...] = -2.0
    assert act(Belief(0.5, 0.5), np.zeros(3), pol, greedy=True)[0] == Action.ACCEPT
    with pytest.raises(ValueError):
        act(Belief(0.5, 0.5), np.zeros(3), pol)
    pol.actor.b2[...] = np.nan
    with pytest.raises(FloatingPointError):
        act(Belief(0.5, 0.5), np.zeros(3), pol, greedy=True)


def test_act_deterministic_given_seed():
    pol = init_policy(2, seed=4)
    pol.actor.b2[...] = 0.0

    def run(seed):
        rng = np.random.default_rng(seed)
        return [int(act(Belief(0.4, 0.6), np.array([0.1, 0.2]), pol, rng)[0]) for _ in range(100)]

    assert run(9) == run(9)
    assert 20 < sum(run(9)) < 80


def _fd(f, vec, setter, eps=1e-6):
    g = np.empty_like(vec)
    for i in range(vec.size):
        v = vec.copy()
        v[i] += eps
        setter(v)
        up = f()
        v[i] -= 2 * eps
        setter(v)
        dn = f()
        g[i] = (up - dn) / (2 * eps)
    setter(vec)
    return g


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    N, d = 40, 4
    X = rng.normal(size=(N, d))
    a = rng.integers(0, 2, N)
    A = rng.normal(size=N)
    y = rng.normal(size=N)
    worst = 0.0
    for k in range(50):
        net = MLP.init(d, 8, rng)
        net.set_flat(rng.normal(scale=0.7, size=net.flat().size))
        theta = net.flat()
        rho, lam = rng.uniform(0, 0.5), rng.uniform(0, 0.05)

        _, g = actor_objective(net, X, a, A, rho, lam)
        fd = _fd(lambda: actor_objective(net, X, a, A, rho, lam)[0], theta, net.set_flat)
        ga = np.concatenate([x.ravel() for x in g])
        worst = max(worst, np.linalg.norm(ga - fd) / np.linalg.norm(fd))

        _, g = critic_loss(net, X, y)
        fd = _fd(lambda: critic_loss(net, X, y)[0], theta, net.set_flat)
        gc = np.concatenate([x.ravel() for x in g])
        worst = max(worst, np.linalg.norm(gc - fd) / np.linalg.norm(fd))
    assert worst < 1e-4


def _const_batch(E=16, T=20, v0=0.0, v1=1.0, d_x=2, seed=0):
    rng = np.random.default_rng(seed)
    ll = np.log(np.full((E, T, 2), 0.5))
    return TrainingBatch(x=rng.random((E, T, d_x)), loglik=ll, v0=np.full((E, T), v0),
                         v1=np.full((E, T), v1), kernel=TransitionKernel())


def _rate(pol, batch):
    return float(rollout(batch, pol, np.random.default_rng(99)).probs.mean())


def test_zero_learning_rate_is_noop():
    pol = init_policy(2, seed=1, eta=0.0)
    res = train(lambda k: _const_batch(), pol, 5, update_dual_variable=False)
    assert np.array_equal(res.policy.actor.flat(), pol.actor.flat())
    assert np.array_equal(res.policy.critic.flat(), pol.critic.flat())


def test_large_entropy_weight_keeps_policy_uniform():
    batch = _const_batch(v0=0.5, v1=0.5)
    pol = init_policy(2, seed=2, rho=100.0)
    pol.actor.b2[...] = 3.0
    res = train(lambda k: batch, pol, 300, update_dual_variable=False)
    p = rollout(batch, res.policy, np.random.default_rng(0)).probs
    assert np.all(np.abs(p - 0.5) < 0.05)


def test_bandit_sanity_escalates():
    batch = _const_batch(v0=0.0, v1=1.0)
    pol = init_policy(2, seed=3, kappa=0.0)
    res = train(lambda k: batch, pol, 200, update_dual_variable=False)
    assert res.policy.mu_d == 0
    assert _rate(res.policy, batch) > 0.95


def test_cost_only_pressure_suppresses_escalation():
    batch = _const_batch(v0=0.5, v1=0.5)
    pol = init_policy(2, seed=3, kappa=0.0, rho=0.0)
    res = train(lambda k: batch, pol, 300, update_dual_variable=False)
    assert _rate(res.policy, batch) < 0.05


def test_training_reproducible_and_checkpoint_roundtrip(tmp_path):
    batch = _const_batch(v0=0.3, v1=0.8)
    pol = init_policy(2, seed=5)
    r1 = train(lambda k: batch, pol, 15, seed=3)
    r2 = train(lambda k: batch, pol, 15, seed=3)
    assert np.array_equal(r1.policy.actor.flat(), r2.policy.actor.flat())
    assert r1.history == r2.history
    path = r1.policy.save(tmp_path / "ck.json")
    back = PolicyState.load(path)
    assert np.array_equal(back.actor.flat(), r1.policy.actor.flat())
    assert np.array_equal(back.critic.flat(), r1.policy.critic.flat())
    assert back.mu_d == r1.policy.mu_d and back.iteration == 15
    assert back.to_dict() == r1.policy.to_dict()
    # resuming from the checkpoint continues the same trajectory
    a = train(lambda k: batch, r1.policy, 5, seed=8).policy
    b = train(lambda k: batch, back, 5, seed=8).policy
    assert np.array_equal(a.actor.flat(), b.actor.flat())
    with pytest.raises(FileNotFoundError):
        PolicyState.load(tmp_path / "missing.json")


def test_nonfinite_gradient_aborts():
    batch = _const_batch()
    batch.v0[0, 0] = batch.v1[0, 0] = np.inf
    with pytest.raises(FloatingPointError, match="iteration"):
        train(lambda k: batch, init_policy(2), 1)


def test_dual_rises_when_over_budget():
    batch = _const_batch(v0=0.0, v1=1.0)
    pol = init_policy(2, seed=0, B=0.1)
    res = train(lambda k: batch, pol, 20)
    assert res.policy.mu_d > 0
    assert all(h["mu_d"] >= 0 for h in res.history)


def test_rollout_and_costs():
    batch = _const_batch(E=4, T=10)
    pol = init_policy(2)
    ro = rollout(batch, pol, np.random.default_rng(0), greedy=True)
    assert np.array_equal(ro.actions, (ro.logits > 0).astype(int))
    assert np.array_equal(ro.cost, pol.C * ro.actions)
    assert np.allclose(ro.beliefs.sum(-1), 1)
    assert discounted_costs(np.full((1, 3), 0.2), 0.5)[0] == pytest.approx(0.2 * 1.75)
    assert policy_inputs(np.array([0.3]), np.array([[1.0, 2.0]])).tolist() == [[0.3, 1.0, 2.0]]
