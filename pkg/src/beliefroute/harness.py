"""Experiment orchestration: episodes, controller comparisons, training and sweeps.

Every pipeline takes an :class:`ExperimentConfig` and an output directory and
writes plain files (JSON lines, JSON, CSV) that the ``report`` step can read
back. Environments are paired across controllers by seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import (KINDS, BaselineConfig, Controller, DecisionContext, RiskPredictor,
                        calibrate_threshold, fit_risk_predictor)
from .belief import TransitionKernel, filter_array, predict_array
from .core import Action, Belief, ConfigError, EpisodeLog, ExperimentConfig, StepRecord
from .env import (EnvModel, EpisodeArrays, SimulatedService, TraceService, matched_encoder,
                  read_trace, sample_episodes, trace_arrays)
from .metrics import episode_metrics, read_report, report_rows, write_report
from .obsmodel import EncoderParams, fit_encoder, loglik_arrays
from .policy import (PolicyState, RiskProfile, TrainingBatch, act, discounted_costs, init_policy,
                     reward, rollout, train)
from .signals import CalibrationState, fit_soft_calibration, observation_arrays

log = logging.getLogger(__name__)

POLICY = "policy"
ALL_CONTROLLERS = (POLICY,) + KINDS
# a checkpoint is feasible on validation if its cost stays within this factor of B
VALIDATION_SLACK = 1.1


# --- components -------------------------------------------------------------------

@dataclass
class Components:
    model: EnvModel
    kernel: TransitionKernel
    encoder: EncoderParams
    trace: Optional[list] = None

    def service(self, seed: int, H: int):
        if self.trace is None:
            return SimulatedService(self.model, seed)
        n_episodes = len(self.trace) // H
        if n_episodes == 0:
            raise ConfigError(f"trace has {len(self.trace)} records, fewer than H={H}")
        return TraceService(self.trace, (seed % n_episodes) * H)

    def arrays(self, seeds: Sequence[int], H: int) -> EpisodeArrays:
        if self.trace is None:
            return sample_episodes(self.model, seeds, H)
        arr = trace_arrays(self.trace, H)
        return arr.take([s % arr.shape[0] for s in seeds])


def build_components(cfg: ExperimentConfig) -> Components:
    model = EnvModel.from_dict(cfg.env)
    if model.k_h != cfg.k_h or model.k_g != cfg.k_g or model.d_x != cfg.d_x:
        raise ConfigError("environment signal/feature counts disagree with k_h, k_g, d_x")
    kernel = TransitionKernel(cfg.stay0, cfg.stay1)
    # without a fitted encoder, fall back to the simulator's exact emission model
    encoder = EncoderParams.from_dict(cfg.encoder) if cfg.encoder else matched_encoder(model)
    trace = read_trace(cfg.trace) if cfg.trace else None
    return Components(model, kernel, encoder, trace)


def signal_state(cfg: ExperimentConfig) -> CalibrationState:
    return CalibrationState.create(cfg.W, cfg.k_h, cfg.k_g, cfg.hard_priors or None,
                                   cfg.soft_cal or None)


def batch_logliks(cfg: ExperimentConfig, comp: Components, arr: EpisodeArrays) -> np.ndarray:
    zh, zg = observation_arrays(arr.hard, arr.soft, cfg.W, cfg.hard_priors or None,
                                cfg.soft_cal or None)
    return loglik_arrays(comp.encoder, arr.features, zh, zg)


# --- controllers ------------------------------------------------------------------

class PolicyController(Controller):
    """Frozen policy; samples actions from a per-episode seeded stream."""

    name = POLICY

    def __init__(self, policy: PolicyState, greedy: bool = False):
        self.policy = policy
        self.greedy = greedy
        self.rng = None

    def reset(self, seed):
        self.seed = seed
        self.rng = np.random.default_rng([seed, 5])

    def decide(self, ctx):
        return act(ctx.belief, ctx.x, self.policy, self.rng, greedy=self.greedy)


def make_controller(name: str, cfg: ExperimentConfig, policy: Optional[PolicyState] = None
                    ) -> Controller:
    if name == POLICY:
        if policy is None:
            raise ConfigError("the policy controller needs a checkpoint")
        return PolicyController(policy)
    if name not in KINDS:
        raise ConfigError(f"unknown controller {name!r}; choose from {', '.join(ALL_CONTROLLERS)}")
    params = dict(cfg.baselines.get(name, {}))
    params.pop("kind", None)
    params["alpha"] = cfg.alpha
    return BaselineConfig(kind=name, **params).build(cfg.k_h)


# --- one episode ------------------------------------------------------------------

def run_episode(service, controller: Controller, signals: CalibrationState, encoder: EncoderParams,
                kernel: TransitionKernel, H: int, seed: int, *, C: float = 0.20,
                kappa: float = 1.0, risk: RiskProfile = RiskProfile(),
                initial=(0.5, 0.5), quality_threshold: float = 1.0,
                config_hash: str = "") -> EpisodeLog:
    """Sequential protocol: observe, predict, filter, decide, return a response.

    ``service`` yields :class:`EnvStep` objects. The controller sees only the
    belief, request features and signals of the default response; the
    enhanced outcome is read only when it escalates. Latent-state and error
    labels are attached to the record afterwards for evaluation.
    """
    if signals.k_h != encoder.k_h or signals.k_g != encoder.k_g:
        raise ValueError("signal state and encoder disagree on signal counts")
    controller.reset(seed)
    k_h = signals.k_h
    pred = np.asarray(initial, dtype=float)
    records = []
    b = prev_action = None
    for t, step in enumerate(service.steps(H), 1):
        if t > 1:
            pred = predict_array(b, kernel, np.asarray(int(prev_action)))
        z = signals.observe(step.hard, step.soft)
        z_h, z_g = z[:k_h], z[k_h:]
        f = np.asarray(step.default.response_features, dtype=float)
        if f.shape != (encoder.d_r,):
            raise ValueError(f"response features have shape {f.shape}, encoder expects {encoder.d_r}")
        b = filter_array(pred, loglik_arrays(encoder, f, z_h, z_g))
        if not np.all(np.isfinite(b)):
            raise FloatingPointError(f"non-finite belief at step {t} of seed {seed}")
        belief = Belief.from_array(b)
        ctx = DecisionContext(t, belief, np.asarray(step.request.features, dtype=float),
                              z_h, z_g, np.asarray(step.hard, dtype=float), seed)
        action, p = controller.decide(ctx)
        action = Action(int(action))
        returned = step.enhanced if action is Action.ESCALATE else step.default
        cost = C * int(action)
        r = reward(returned.utility, action, belief, risk, kappa, C)
        records.append(StepRecord(t, tuple(float(v) for v in z), belief, action, float(p), cost,
                                  float(returned.utility), r, step.s,
                                  int(step.default.utility < quality_threshold)))
        prev_action = action
    if len(records) != H:
        raise ValueError(f"service produced {len(records)} steps, expected {H}")
    return EpisodeLog(seed, tuple(records), config_hash)


def episode_for(cfg: ExperimentConfig, comp: Components, controller: Controller, seed: int
                ) -> EpisodeLog:
    return run_episode(comp.service(seed, cfg.H), controller, signal_state(cfg), comp.encoder,
                       comp.kernel, cfg.H, seed, C=cfg.C, kappa=cfg.kappa,
                       risk=RiskProfile(*cfg.risk), initial=cfg.initial_belief,
                       quality_threshold=cfg.quality_threshold, config_hash=cfg.hash())


# --- experiments --------------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    controllers: list
    seeds: list
    outputs: dict
    started: float
    finished: float = 0.0
    hashes: dict = field(default_factory=dict)

    def missing(self) -> list[str]:
        return [p for p in self.outputs.values() if not Path(p).exists()]

    def to_dict(self):
        return {"config": self.config, "controllers": self.controllers, "seeds": self.seeds,
                "outputs": self.outputs, "started": self.started, "finished": self.finished,
                "hashes": self.hashes}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


@dataclass
class ExperimentResult:
    rows: list
    logs: dict
    manifest: Optional[RunManifest] = None

    def value(self, controller, metric, seed="ALL"):
        for r in self.rows:
            if r["controller"] == controller and r["metric"] == metric and str(r["seed"]) == str(seed):
                return r["value"]
        raise KeyError((controller, metric, seed))

    def per_seed(self, controller, metric) -> np.ndarray:
        """Per-seed values ordered by seed."""
        vals = sorted((r["seed"], r["value"]) for r in self.rows
                      if r["controller"] == controller and r["metric"] == metric and r["seed"] != "ALL")
        return np.array([v for _, v in vals])


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def worker_count(n_cells: int) -> int:
    cap = os.environ.get("VEROIC_THREADS")
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, n_cells))


def _run_cell(cfg_dict, name, controller, seed, log_path):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ep = episode_for(cfg, build_components(cfg), controller, seed)
    if log_path is not None:
        ep.write(log_path)
    return ep


def run_experiment(cfg: ExperimentConfig, controllers, seeds: Optional[Sequence[int]] = None,
                   out: Optional[Path] = None, workers: Optional[int] = None) -> ExperimentResult:
    """Run every (controller, seed) cell and compute the metric report.

    ``controllers`` is a list of ``(name, Controller)`` pairs. With ``out``
    set, per-cell logs go to ``out/logs/<name>/seed_<s>.jsonl`` and the
    report and manifest are written once all cells are done.
    """
    controllers = list(controllers)
    if not controllers:
        raise ConfigError("run_experiment needs at least one controller")
    names = [n for n, _ in controllers]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate controller names: {names}")
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("run_experiment needs at least one seed")
    started = time.time()
    out = Path(out) if out is not None else None
    cells = []
    for name, ctrl in controllers:
        for s in seeds:
            path = out / "logs" / name / f"seed_{s}.jsonl" if out is not None else None
            cells.append((name, ctrl, s, path))
    n_workers = worker_count(len(cells)) if workers is None else max(1, workers)
    if n_workers == 1:
        comp = build_components(cfg)
        logs = {}
        for name, ctrl, s, path in cells:
            ep = episode_for(cfg, comp, ctrl, s)
            if path is not None:
                ep.write(path)
            logs[(name, s)] = ep
    else:
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(n_workers) as pool:
            futs = {(n, s): pool.submit(_run_cell, cfg_dict, n, c, s, p) for n, c, s, p in cells}
            logs = {k: f.result() for k, f in futs.items()}
    rows = _rows_from_logs(cfg, logs)
    manifest = None
    if out is not None:
        report = out / "report.csv"
        write_report(rows, report)
        outputs = {"report": str(report)}
        outputs.update({f"{n}/seed_{s}": str(p) for n, _, s, p in cells})
        manifest = RunManifest(cfg.to_dict(), names, seeds, outputs, started, time.time())
        manifest.hashes = {k: _sha256(p) for k, p in outputs.items()}
        manifest.hashes["config"] = cfg.hash()
        manifest.write(out / "manifest.json")
        missing = manifest.missing()
        if missing:
            raise RuntimeError(f"run finished with missing outputs: {missing}")
    return ExperimentResult(rows, logs, manifest)


def _rows_from_logs(cfg: ExperimentConfig, logs: dict) -> list[dict]:
    per_cell = {k: episode_metrics(ep, cfg.gamma, cfg.quality_threshold, cfg.recd_run,
                                   cfg.recd_recovery)
                for k, ep in logs.items()}
    return report_rows(per_cell, cfg.cvar_beta)


def report_from_logs(cfg: ExperimentConfig, out: Path) -> list[dict]:
    """Recompute the metric report from stored episode logs under ``out/logs``."""
    out = Path(out)
    root = out / "logs"
    if not root.is_dir():
        raise FileNotFoundError(f"no episode logs under {root}")
    logs = {}
    for ctrl_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(ctrl_dir.glob("seed_*.jsonl")):
            seed = int(f.stem.split("_", 1)[1])
            logs[(ctrl_dir.name, seed)] = EpisodeLog.read(f, seed, cfg.hash())
    if not logs:
        raise FileNotFoundError(f"no episode logs under {root}")
    rows = _rows_from_logs(cfg, logs)
    write_report(rows, out / "report.csv")
    return rows


# --- calibration --------------------------------------------------------------------

def calibrate(cfg: ExperimentConfig, out: Optional[Path] = None, seed: int = 0) -> ExperimentConfig:
    """Fit soft calibrations, the encoder and baseline thresholds on calibration seeds.

    Returns the config with ``soft_cal``, ``encoder`` and ``baselines`` filled
    in; with ``out`` set it is also saved to ``out/calibrated_config.json``.
    """
    comp = build_components(cfg)
    arr = comp.arrays(cfg.calibration_seeds, cfg.H)
    correct = (arr.v0 >= cfg.quality_threshold).astype(float)
    soft_cal = [fit_soft_calibration(arr.soft[..., i].ravel(), correct.ravel()).to_dict()
                for i in range(cfg.k_g)]
    zh, zg = observation_arrays(arr.hard, arr.soft, cfg.W, cfg.hard_priors or None, soft_cal)
    e = 1.0 - correct
    encoder = fit_encoder(arr.features, zh, zg, e, comp.kernel, cfg.initial_belief, seed=seed)
    cal = cfg.replace(soft_cal=soft_cal, encoder=encoder.to_dict())
    cal = cal.replace(baselines=baseline_parameters(cal, zh, zg, e))
    if out is not None:
        cal.save(Path(out) / "calibrated_config.json")
    return cal


def baseline_parameters(cfg: ExperimentConfig, zh, zg, e, predictor=None) -> dict:
    """Threshold-baseline parameters at ``cfg.alpha`` from calibration-split signals."""
    Z = np.concatenate([zh, zg], axis=-1).reshape(-1, cfg.k)
    if predictor is None:
        predictor = fit_risk_predictor(Z, np.asarray(e).ravel())
    ct_scores = 1.0 - np.asarray(zg).reshape(-1, cfg.k_g).mean(axis=1)
    out = dict(cfg.baselines)
    out["confidence_threshold"] = {"tau": calibrate_threshold(ct_scores, cfg.alpha)}
    out["risk_predictor"] = {"tau": calibrate_threshold(predictor.risk_array(Z), cfg.alpha),
                             "weights": np.asarray(predictor.weights).tolist(),
                             "bias": float(predictor.bias)}
    return out


def recalibrate_thresholds(cfg: ExperimentConfig) -> ExperimentConfig:
    """Re-derive the budget-matched thresholds for the config's alpha."""
    comp = build_components(cfg)
    arr = comp.arrays(cfg.calibration_seeds, cfg.H)
    zh, zg = observation_arrays(arr.hard, arr.soft, cfg.W, cfg.hard_priors or None,
                                cfg.soft_cal or None)
    e = (arr.v0 < cfg.quality_threshold).astype(float)
    rp = cfg.baselines.get("risk_predictor", {})
    predictor = None
    if "weights" in rp:
        predictor = RiskPredictor(np.asarray(rp["weights"], float), float(rp["bias"]))
    return cfg.replace(baselines=baseline_parameters(cfg, zh, zg, e, predictor))


# --- training -----------------------------------------------------------------------

def new_policy(cfg: ExperimentConfig, seed: int = 0) -> PolicyState:
    return init_policy(cfg.d_x, cfg.hidden, seed, kappa=cfg.kappa, rho=cfg.rho, gamma=cfg.gamma,
                       C=cfg.C, B=cfg.B, eta=cfg.eta, dual_step=cfg.dual_step,
                       risk=RiskProfile(*cfg.risk), logit_penalty=cfg.logit_penalty,
                       lr_decay=cfg.lr_decay, dual_decay=cfg.dual_decay)


def batch_source(cfg: ExperimentConfig, comp: Optional[Components] = None
                 ) -> Callable[[int], TrainingBatch]:
    """Training episodes for iteration ``i``: a fresh block of training seeds."""
    comp = comp or build_components(cfg)
    E = cfg.batch_episodes

    def source(i: int) -> TrainingBatch:
        seeds = range(cfg.train_seed_base + i * E, cfg.train_seed_base + (i + 1) * E)
        arr = comp.arrays(seeds, cfg.H)
        return TrainingBatch(arr.x, batch_logliks(cfg, comp, arr), arr.v0, arr.v1,
                             comp.kernel, tuple(cfg.initial_belief))
    return source


def evaluate_batch(policy: PolicyState, batch: TrainingBatch, seed: int = 0) -> dict:
    """Mean utility and discounted cost of the frozen policy on fixed episodes."""
    ro = rollout(batch, policy, np.random.default_rng([seed, 13]))
    return {"utility": float(ro.utility.mean()),
            "discounted_cost": float(discounted_costs(ro.cost, policy.gamma).mean()),
            "escalation_rate": float(ro.actions.mean())}


@dataclass
class TrainRun:
    policy: PolicyState
    best: PolicyState
    history: list
    validation: list
    checkpoints: dict = field(default_factory=dict)
    final_eval: Optional[ExperimentResult] = None


def train_pipeline(cfg: ExperimentConfig, out: Optional[Path] = None, seed: int = 0,
                   iterations: Optional[int] = None, evaluate: bool = True) -> TrainRun:
    """Train the policy, checkpointing every ``checkpoint_every`` iterations.

    Each checkpoint is scored on the validation seeds; the best one is the
    highest-utility checkpoint whose validation cost is within 10% of B (the
    cheapest one if none is). With ``evaluate`` the final policy is run on
    ``cfg.seeds`` and the report written to ``out/final_eval``.
    """
    comp = build_components(cfg)
    iterations = cfg.iterations if iterations is None else iterations
    out = Path(out) if out is not None else None
    val = comp.arrays(cfg.validation_seeds, cfg.H)
    val_batch = TrainingBatch(val.x, batch_logliks(cfg, comp, val), val.v0, val.v1,
                              comp.kernel, tuple(cfg.initial_belief))
    validation, checkpoints = [], {}
    best = {"key": None, "policy": None}

    def score(pol: PolicyState):
        res = evaluate_batch(pol, val_batch, seed)
        res["iteration"] = pol.iteration
        validation.append(res)
        feasible = res["discounted_cost"] <= VALIDATION_SLACK * pol.B
        key = (feasible, res["utility"] if feasible else -res["discounted_cost"])
        if best["key"] is None or key > best["key"]:
            best["key"], best["policy"] = key, pol.copy()
        if out is not None:
            path = out / "checkpoints" / f"iter_{pol.iteration:05d}.json"
            pol.save(path)
            checkpoints[pol.iteration] = str(path)

    def callback(i, pol, info):
        if cfg.checkpoint_every and pol.iteration % cfg.checkpoint_every == 0:
            score(pol)

    result = train(batch_source(cfg, comp), new_policy(cfg, seed), iterations, seed=seed,
                   callback=callback)
    policy = result.policy
    if not validation or validation[-1]["iteration"] != policy.iteration:
        score(policy)
    run = TrainRun(policy, best["policy"], result.history, validation, checkpoints)
    if out is not None:
        policy.save(out / "checkpoints" / "final.json")
        run.best.save(out / "checkpoints" / "best.json")
        _write_csv(out / "history.csv", result.history)
        _write_csv(out / "validation.csv", validation)
    if evaluate:
        run.final_eval = run_experiment(cfg, [(POLICY, PolicyController(policy))], cfg.seeds,
                                        out / "final_eval" if out is not None else None)
    return run


def _write_csv(path, rows):
    if not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# --- evaluation and sweeps ---------------------------------------------------------------

def resolve_controllers(names: Sequence[str], cfg: ExperimentConfig,
                        policy: Optional[PolicyState] = None) -> list:
    return [(n, make_controller(n, cfg, policy)) for n in names]


def evaluate(cfg: ExperimentConfig, names: Sequence[str], checkpoint: Optional[Path] = None,
             seeds: Optional[Sequence[int]] = None, out: Optional[Path] = None) -> ExperimentResult:
    policy = None
    if POLICY in names:
        if checkpoint is None:
            raise ConfigError("evaluating the policy needs --checkpoint")
        policy = PolicyState.load(checkpoint)
    return run_experiment(cfg, resolve_controllers(names, cfg, policy), seeds, out)


SWEEP_FIELDS = ("controller", "alpha", "B", "utility", "utility_std", "discounted_cost",
                "escalation_rate", "occ", "cvar")


def budget_sweep(cfg: ExperimentConfig, alphas: Optional[Sequence[float]] = None,
                 names: Sequence[str] = ALL_CONTROLLERS, seeds: Optional[Sequence[int]] = None,
                 out: Optional[Path] = None, train_seed: int = 0) -> list[dict]:
    """Per-alpha evaluation: thresholds recalibrated and the policy retrained at each budget."""
    alphas = list(cfg.sweep_alphas if alphas is None else alphas)
    if not alphas:
        raise ConfigError("budget sweep needs at least one alpha")
    if any(not 0.0 < a <= 1.0 for a in alphas):
        raise ConfigError(f"alphas must lie in (0, 1]: {alphas}")
    out = Path(out) if out is not None else None
    rows = []
    for a in alphas:
        cfg_a = cfg.replace(alpha=a)
        if {"confidence_threshold", "risk_predictor"} & set(names):
            cfg_a = recalibrate_thresholds(cfg_a)
        policy = None
        sub = out / f"alpha_{a:g}" if out is not None else None
        if POLICY in names:
            policy = train_pipeline(cfg_a, sub, seed=train_seed, evaluate=False).policy
        res = run_experiment(cfg_a, resolve_controllers(names, cfg_a, policy), seeds, sub)
        for n in names:
            util = res.per_seed(n, "utility")
            rows.append({"controller": n, "alpha": a, "B": cfg_a.B,
                         "utility": float(util.mean()),
                         "utility_std": float(util.std(ddof=1)) if util.size > 1 else 0.0,
                         "discounted_cost": res.value(n, "discounted_cost"),
                         "escalation_rate": res.value(n, "escalations") / cfg.H,
                         "occ": res.value(n, "occ"), "cvar": res.value(n, "cvar")})
    if out is not None:
        _write_csv(out / "sweep.csv", rows)
    return rows


def read_sweep(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in SWEEP_FIELDS[1:]:
            r[k] = float(r[k])
    return rows

