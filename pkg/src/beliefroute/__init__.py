"""Belief-based escalation control for two-tier model services."""

from .baselines import BaselineConfig, calibrate_threshold, fit_risk_predictor
from .belief import TransitionKernel, exact_posterior_oracle, filter_sequence
from .core import (Action, Belief, ConfigError, EpisodeLog, ExperimentConfig, StepRecord,
                   budget_from_alpha)
from .env import EnvModel, SimulatedService, env_as_hmm, matched_encoder, sample_episodes
from .harness import (budget_sweep, calibrate, evaluate, run_episode, run_experiment,
                      train_pipeline)
from .obsmodel import EncoderParams, fit_encoder
from .policy import PolicyState, RiskProfile, init_policy, train

__version__ = "0.1.0"
