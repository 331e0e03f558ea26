import dataclasses
import json

import numpy as np
import pytest

from beliefroute import harness
from beliefroute.baselines import FixedController, PeriodicController
from beliefroute.core import ConfigError, EpisodeLog, ExperimentConfig
from beliefroute.metrics import discounted_cost, read_report
from beliefroute.policy import PolicyState

SMALL = dict(H=60, seeds=[1000, 1001, 1002], calibration_seeds=list(range(6)),
             validation_seeds=[500, 501], iterations=4, batch_episodes=4, checkpoint_every=2)


@pytest.fixture(scope="module")
def cfg():
    return harness.calibrate(ExperimentConfig(**SMALL))


def test_calibrate_fills_parameters(cfg, tmp_path):
    assert cfg.encoder and len(cfg.soft_cal) == cfg.k_g
    assert 0 <= cfg.baselines["confidence_threshold"]["tau"] <= 1
    assert len(cfg.baselines["risk_predictor"]["weights"]) == cfg.k
    again = harness.calibrate(ExperimentConfig(**SMALL), tmp_path)
    assert again == cfg
    assert ExperimentConfig.load(tmp_path / "calibrated_config.json") == cfg


def test_fixed_alpha_extremes(cfg):
    comp = harness.build_components(cfg)
    ep = harness.episode_for(cfg, comp, FixedController(0.0), 7)
    assert sum(int(r.action) for r in ep.records) == 0
    assert sum(r.cost for r in ep.records) == 0
    ep = harness.episode_for(cfg, comp, FixedController(1.0), 7)
    assert sum(int(r.action) for r in ep.records) == cfg.H
    dc = discounted_cost([r.cost for r in ep.records], cfg.gamma)
    assert dc == pytest.approx(cfg.C * (1 - cfg.gamma ** cfg.H) / (1 - cfg.gamma), rel=1e-12)


def test_episode_byte_identical(cfg):
    comp = harness.build_components(cfg)
    pol = harness.new_policy(cfg, 3)
    a = harness.episode_for(cfg, comp, harness.PolicyController(pol), 11).to_jsonl()
    b = harness.episode_for(cfg, comp, harness.PolicyController(pol), 11).to_jsonl()
    assert a == b


def test_dimension_mismatch_errors(cfg):
    with pytest.raises(ConfigError):
        harness.build_components(cfg.replace(k_h=3))
    comp = harness.build_components(cfg)
    bad_signals = harness.signal_state(cfg.replace(k_h=3, hard_priors=[]))
    with pytest.raises(ValueError):
        harness.run_episode(comp.service(0, 10), FixedController(0.1), bad_signals, comp.encoder,
                            comp.kernel, 10, 0)


class _Blinded:
    """Service wrapper that scrambles labels and the unseen enhanced outcome."""

    def __init__(self, inner):
        self.inner = inner

    def steps(self, H):
        for st in self.inner.steps(H):
            enh = dataclasses.replace(st.enhanced, utility=1.0 - st.enhanced.utility)
            yield dataclasses.replace(st, s=1 - st.s, enhanced=enh)


def test_label_blind_audit(cfg):
    comp = harness.build_components(cfg)
    pol = harness.new_policy(cfg, 1)
    for name, ctrl in [("policy", harness.PolicyController(pol))] + \
            harness.resolve_controllers(["risk_predictor", "random", "output_trigger"], cfg):
        kw = dict(C=cfg.C, kappa=cfg.kappa, initial=cfg.initial_belief)
        a = harness.run_episode(comp.service(3, cfg.H), ctrl, harness.signal_state(cfg),
                                comp.encoder, comp.kernel, cfg.H, 3, **kw)
        b = harness.run_episode(_Blinded(comp.service(3, cfg.H)), ctrl, harness.signal_state(cfg),
                                comp.encoder, comp.kernel, cfg.H, 3, **kw)
        for ra, rb in zip(a.records, b.records):
            assert ra.belief == rb.belief and ra.action == rb.action and ra.z == rb.z
            if int(ra.action) == 0:
                assert ra.utility == rb.utility


def test_one_controller_report(cfg, tmp_path):
    res = harness.run_experiment(cfg, [("fixed", FixedController(0.05))], [1000], tmp_path)
    rows = read_report(tmp_path / "report.csv")
    metrics = [r["metric"] for r in rows if r["seed"] == "1000"]
    assert len(metrics) == len(set(metrics)) and "utility" in metrics
    assert res.manifest.missing() == []
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["controllers"] == ["fixed"] and man["seeds"] == [1000]
    assert set(man["hashes"]) >= {"report", "config"}


def test_empty_and_duplicate_controllers(cfg):
    with pytest.raises(ConfigError):
        harness.run_experiment(cfg, [], [1])
    with pytest.raises(ConfigError):
        harness.run_experiment(cfg, [("a", FixedController(0.1)), ("a", FixedController(0.2))], [1])
    with pytest.raises(ConfigError):
        harness.make_controller("oracle", cfg)
    with pytest.raises(ConfigError):
        harness.make_controller("policy", cfg)


def test_common_random_numbers(cfg):
    res = harness.run_experiment(cfg, [("fixed", FixedController(0.05)),
                                       ("periodic", PeriodicController(0.2))], workers=1)
    for s in cfg.seeds:
        a = [r.s_true for r in res.logs[("fixed", s)].records]
        b = [r.s_true for r in res.logs[("periodic", s)].records]
        assert a == b


def test_parallel_matches_serial(cfg):
    ctrls = harness.resolve_controllers(["random", "confidence_threshold"], cfg)
    a = harness.run_experiment(cfg, ctrls, cfg.seeds[:2], workers=1)
    b = harness.run_experiment(cfg, ctrls, cfg.seeds[:2], workers=2)
    assert {k: v.to_jsonl() for k, v in a.logs.items()} == {k: v.to_jsonl() for k, v in b.logs.items()}
    assert json.dumps(a.rows) == json.dumps(b.rows)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("VEROIC_THREADS", "1")
    assert harness.worker_count(50) == 1
    monkeypatch.setenv("VEROIC_THREADS", "8")
    assert harness.worker_count(3) == 3


def test_budget_accounting_and_report_roundtrip(cfg, tmp_path):
    names = ["fixed", "periodic", "random", "output_trigger", "confidence_threshold",
             "risk_predictor"]
    res = harness.run_experiment(cfg, harness.resolve_controllers(names, cfg), out=tmp_path)
    for (n, s), ep in res.logs.items():
        raw = discounted_cost([r.cost for r in ep.records], cfg.gamma)
        assert abs(res.value(n, "discounted_cost", s) - raw) <= 1e-12
    before = (tmp_path / "report.csv").read_bytes()
    rows = harness.report_from_logs(cfg, tmp_path)
    assert (tmp_path / "report.csv").read_bytes() == before
    assert json.dumps(rows) == json.dumps(res.rows)  # NaN-safe equality
    with pytest.raises(FileNotFoundError):
        harness.report_from_logs(cfg, tmp_path / "nothing")


def test_train_then_eval_matches(cfg, tmp_path):
    run = harness.train_pipeline(cfg, tmp_path / "train", seed=0)
    assert run.policy.iteration == cfg.iterations
    assert len(run.history) == cfg.iterations
    assert sorted(run.checkpoints) == [2, 4]
    assert (tmp_path / "train" / "history.csv").exists()
    best = PolicyState.load(tmp_path / "train" / "checkpoints" / "best.json")
    assert best.iteration in run.checkpoints
    res = harness.evaluate(cfg, ["policy"], tmp_path / "train" / "checkpoints" / "final.json",
                           out=tmp_path / "eval")
    assert json.dumps(res.rows) == json.dumps(run.final_eval.rows)
    assert (tmp_path / "eval" / "report.csv").read_bytes() == \
        (tmp_path / "train" / "final_eval" / "report.csv").read_bytes()


def test_training_reproducible(cfg):
    a = harness.train_pipeline(cfg, seed=2, evaluate=False)
    b = harness.train_pipeline(cfg, seed=2, evaluate=False)
    assert np.array_equal(a.policy.actor.flat(), b.policy.actor.flat())
    assert a.history == b.history


def test_budget_sweep_shapes(cfg, tmp_path):
    rows = harness.budget_sweep(cfg, names=["fixed", "periodic"], seeds=cfg.seeds[:2], out=tmp_path)
    assert len(rows) == 10
    assert sorted({r["alpha"] for r in rows}) == cfg.sweep_alphas
    back = harness.read_sweep(tmp_path / "sweep.csv")
    assert [r["utility"] for r in back] == [r["utility"] for r in rows]
    one = harness.budget_sweep(cfg, [0.1], names=["confidence_threshold"], seeds=cfg.seeds[:1])
    assert len(one) == 1 and one[0]["B"] == pytest.approx(0.1 * cfg.C / (1 - cfg.gamma))
    with pytest.raises(ConfigError):
        harness.budget_sweep(cfg, [0.0], names=["fixed"])
    with pytest.raises(ConfigError):
        harness.budget_sweep(cfg, [], names=["fixed"])


def test_sweep_with_policy(cfg):
    rows = harness.budget_sweep(cfg.replace(iterations=2), [0.05, 0.2], names=["policy"],
                                seeds=cfg.seeds[:1])
    assert [r["controller"] for r in rows] == ["policy", "policy"]
    assert rows[0]["B"] < rows[1]["B"]


def test_log_readback(cfg, tmp_path):
    comp = harness.build_components(cfg)
    ep = harness.episode_for(cfg, comp, FixedController(0.1), 4)
    ep.write(tmp_path / "e.jsonl")
    back = EpisodeLog.read(tmp_path / "e.jsonl", 4, cfg.hash())
    assert back.to_jsonl() == ep.to_jsonl()
