"""
Tracking a hidden reliability state
===================================

The default model of the simulated service drifts between a reliable and an
unreliable regime. Nothing tells the router which regime it is in; it only
sees cheap quality signals. This script filters those signals into a belief
and checks it against the exact posterior.
"""

import numpy as np

from beliefroute.belief import filter_sequence, oracle_posterior_path
from beliefroute.env import EnvModel, env_as_hmm, matched_encoder, sample_episodes
from beliefroute.metrics import brier, ece
from beliefroute.obsmodel import loglik_arrays
from beliefroute.signals import observation_arrays

model = EnvModel()
H = 60
arr = sample_episodes(model, [42], H)

# Hard checks are pass/fail bits, soft scores live in (0, 1). The signal layer
# turns them into a windowed pass rate and calibrated probabilities.
zh, zg = observation_arrays(arr.hard, arr.soft, W=20)

# With the encoder matched to the simulator, the per-step scores are the true
# emission log densities, so the filter should equal the exact posterior.
ll = loglik_arrays(matched_encoder(model), arr.features, zh, zg)
p_hat = filter_sequence(ll, model.kernel(), model.pi0)[0, :, 0]

hmm = env_as_hmm(model)
exact = oracle_posterior_path(hmm.initial, hmm.transition,
                              hmm.log_emissions(arr.hard[0], arr.soft[0]), method="forward")
print(f"max |filter - exact posterior| over {H} steps: {np.abs(p_hat - exact).max():.2e}")

print("\n  t  state  P(unreliable)")
for t in range(0, H, 4):
    bar = "#" * int(round(20 * p_hat[t]))
    print(f"{t + 1:3d}  {'U' if arr.s[0, t] == 0 else 'R'}      {p_hat[t]:.3f} {bar}")

# Calibration over many steps: among steps with belief near p, about a
# fraction p should really be unreliable.
big = sample_episodes(model, range(100, 140), 500)
zh, zg = observation_arrays(big.hard, big.soft, W=20)
p = filter_sequence(loglik_arrays(matched_encoder(model), big.features, zh, zg),
                    model.kernel(), model.pi0)[..., 0].ravel()
s0 = (big.s == 0).ravel()
print(f"\n{p.size} steps: ECE {ece(p, s0):.4f}  Brier {brier(p, s0):.5f}")
