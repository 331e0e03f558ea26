import numpy as np
import pytest
from scipy import stats

from beliefroute.belief import filter_sequence, oracle_posterior_path
from beliefroute.core import Action, RequestFeatures, ResponseOutcome
from beliefroute.env import (EnvModel, LiveServiceAdapter, SimulatedService, TraceRecord,
                             TraceService, env_as_hmm, env_rng, matched_encoder, read_trace,
                             replay_step, response_features, sample_episodes, step_env,
                             trace_arrays, trace_from_steps, write_trace)
from beliefroute.obsmodel import loglik_arrays
from beliefroute.signals import observation_arrays


def test_model_validation():
    with pytest.raises(ValueError):
        EnvModel(q1=1.5)
    with pytest.raises(ValueError):
        EnvModel(soft_a=((0.0, 2.0), (8.0, 8.0)))
    m = EnvModel()
    assert EnvModel.from_dict(m.to_dict()) == m
    assert EnvModel.from_dict({}) == m


def test_sequential_and_vectorised_agree():
    m = EnvModel()
    arr = sample_episodes(m, [3, 4], 60)
    for e, seed in enumerate([3, 4]):
        steps = list(SimulatedService(m, seed).steps(60))
        assert [s.s for s in steps] == arr.s[e].tolist()
        assert np.allclose([s.soft for s in steps], arr.soft[e])
        assert np.array_equal([s.hard for s in steps], arr.hard[e])
        assert np.allclose([s.default.response_features for s in steps], arr.features[e])
        assert [s.default.utility for s in steps] == arr.v0[e].tolist()
        assert [s.enhanced.utility for s in steps] == arr.v1[e].tolist()
        assert [s.request.request_id for s in steps] == list(range(1, 61))


def test_absorbing_chain():
    m = EnvModel(pi0=(0.0, 1.0), stay0=1.0, stay1=1.0)
    assert np.all(sample_episodes(m, [0, 1], 100).s == 1)


def test_default_correct_rate_matches_mixture():
    m = EnvModel()
    arr = sample_episodes(m, range(200), 500)
    assert abs(arr.v0.mean() - (0.5 * 0.15 + 0.5 * 0.95)) <= 0.01


def test_transition_frequencies():
    m = EnvModel(stay0=0.85, stay1=0.93)
    arr = sample_episodes(m, range(500), 2000)
    prev, nxt = arr.s[:, :-1].ravel(), arr.s[:, 1:].ravel()
    assert abs(np.mean(nxt[prev == 0] == 0) - 0.85) <= 0.005
    assert abs(np.mean(nxt[prev == 1] == 1) - 0.93) <= 0.005


def test_check_pass_rates():
    m = EnvModel(theta=((0.3, 0.9), (0.5, 0.8), (0.2, 0.7), (0.4, 0.95)))
    arr = sample_episodes(m, range(100), 500)
    for j in range(4):
        for s in (0, 1):
            mask = arr.s == s
            assert mask.sum() >= 10_000
            assert abs(arr.hard[..., j][mask].mean() - m.theta[j][s]) <= 0.01


def test_soft_scores_follow_beta():
    m = EnvModel()
    arr = sample_episodes(m, range(20), 500)
    for s in (0, 1):
        x = arr.soft[..., 0][arr.s == s]
        assert stats.kstest(x, "beta", args=(m.soft_a[s][0], m.soft_b[s][0])).pvalue > 1e-3


def test_uninformative_emissions_give_marginal():
    m = EnvModel(theta=((0.6, 0.6),) * 4, soft_a=((3.0, 3.0), (3.0, 3.0)),
                 soft_b=((2.0, 2.0), (2.0, 2.0)), pi0=(0.2, 0.8), stay0=0.7, stay1=0.9)
    arr = sample_episodes(m, [0], 30)
    ll = loglik_arrays(matched_encoder(m), arr.features, *observation_arrays(arr.hard, arr.soft, 20))
    b = filter_sequence(ll, m.kernel(), m.pi0)[0, :, 0]
    marg = np.array(m.pi0)
    T = m.kernel().matrix()
    expected = []
    for _ in range(30):
        expected.append(marg[0])
        marg = marg @ T
    assert np.allclose(b, expected, atol=1e-12)


def test_hmm_fields_and_emission():
    m = EnvModel()
    h = env_as_hmm(m)
    assert np.allclose(h.transition, [[0.9, 0.1], [0.1, 0.9]])
    step = step_env(m, None, env_rng(5))
    le = h.log_emission(step.hard, step.soft, step.default.utility == 1)
    for s in (0, 1):
        hand = 0.0
        for j, passed in enumerate(step.hard):
            th = m.theta[j][s]
            hand += np.log(th if passed else 1 - th)
        for i, g in enumerate(step.soft):
            hand += stats.beta.logpdf(g, m.soft_a[s][i], m.soft_b[s][i])
        q = m.q0[s]
        hand += np.log(q if step.default.utility == 1 else 1 - q)
        assert le[s] == pytest.approx(hand, abs=1e-10)


def test_hmm_uninformative_ratio_one():
    m = EnvModel(theta=((0.5, 0.5),) * 4, soft_a=((2.0, 2.0), (2.0, 2.0)), soft_b=((2.0, 2.0), (2.0, 2.0)))
    le = env_as_hmm(m).log_emission([True, False, True, True], [0.3, 0.8])
    assert le[0] == pytest.approx(le[1], abs=1e-12)


def test_matched_encoder_equals_emission_density():
    m = EnvModel()
    arr = sample_episodes(m, [9], 40)
    ll = loglik_arrays(matched_encoder(m), arr.features[0], np.zeros((40, 4)), np.zeros((40, 2)))
    le = env_as_hmm(m).log_emissions(arr.hard[0], arr.soft[0])
    assert np.allclose(ll, le, atol=1e-9)


def test_matched_filter_equals_oracle_on_episode():
    m = EnvModel()
    arr = sample_episodes(m, [11], 15)
    ll = loglik_arrays(matched_encoder(m), arr.features, *observation_arrays(arr.hard, arr.soft, 20))
    b = filter_sequence(ll, m.kernel(), m.pi0)[0, :, 0]
    h = env_as_hmm(m)
    ref = oracle_posterior_path(h.initial, h.transition, h.log_emissions(arr.hard[0], arr.soft[0]))
    assert np.max(np.abs(b - ref)) < 1e-9


def test_response_features_layout():
    f = response_features(0.3, [True, False], [0.25])
    assert np.allclose(f, [0.3, 1.0, 0.0, np.log(0.25), np.log(0.75)])


def test_replay_and_trace_roundtrip(tmp_path):
    steps = list(SimulatedService(EnvModel(), 2).steps(30))
    recs = trace_from_steps(steps)
    path = write_trace(recs, tmp_path / "t.jsonl")
    back = read_trace(path)
    assert back == recs
    r = replay_step(back[0], Action.ACCEPT)
    assert r.outcome.is_default and r.outcome.utility == steps[0].default.utility
    r = replay_step(back[0], Action.ESCALATE)
    assert not r.outcome.is_default and r.outcome.utility == steps[0].enhanced.utility
    replayed = list(TraceService(back).steps(30))
    assert [s.default for s in replayed] == [s.default for s in steps]
    assert all(s.s is None for s in replayed)
    arr = trace_arrays(back, 10)
    assert arr.shape == (3, 10) and arr.s is None
    with pytest.raises(ValueError):
        list(TraceService(back, 25).steps(10))


def test_trace_missing_enhanced(tmp_path):
    with pytest.raises(ValueError, match="enhanced"):
        TraceRecord.from_dict({"x": [0], "default": {"utility": 1, "hard": [], "soft": [], "features": []}})
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"x": [0], "default": {"utility": 1}}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_trace(bad)


def test_live_adapter_contract():
    req = RequestFeatures(1, (0.0,))
    ok = LiveServiceAdapter(lambda r, s: (ResponseOutcome(True, 1.0), [True], [0.5]),
                            lambda r, s: (ResponseOutcome(True, 1.0), [True], [0.5]))
    assert ok.respond(req, Action.ACCEPT, 0)[0].utility == 1.0
    with pytest.raises(ValueError):
        ok.respond(req, Action.ESCALATE, 0)
    with pytest.raises(NotImplementedError):
        LiveServiceAdapter().respond(req, Action.ACCEPT, 0)


def test_seed_determinism():
    a = sample_episodes(EnvModel(), [1, 2], 50)
    b = sample_episodes(EnvModel(), [1, 2], 50)
    assert np.array_equal(a.soft, b.soft) and np.array_equal(a.s, b.s)
