"""
Training the budget-constrained policy
======================================

The policy sees the belief and the request features. A Lagrange multiplier
prices each escalation; it rises while the policy overspends and settles once
the discounted cost sits at the budget. This script trains the policy, shows
the multiplier and cost trajectory, and compares it with Periodic on the
evaluation seeds.
"""

import sys

import numpy as np

from beliefroute import harness
from beliefroute.core import ExperimentConfig

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500
cfg = harness.calibrate(ExperimentConfig())

run = harness.train_pipeline(cfg, seed=0, iterations=iterations)
print(f"budget B = {cfg.B:.3f}\n")
print(" iter   mu_d  batch cost  esc. rate")
for h in run.history[::max(1, iterations // 10)] + run.history[-1:]:
    print(f"{h['iteration']:5d}  {h['mu_d']:5.2f}  {h['batch_cost']:10.3f}  {h['escalation_rate']:9.4f}")

tail = np.array([h["batch_cost"] for h in run.history[-100:]])
print(f"\nlast 100 iterations: mean cost {tail.mean():.3f}, "
      f"half peak-to-peak {(tail.max() - tail.min()) / 2:.3f}")

# Paired comparison on the evaluation seeds.
per = harness.run_experiment(cfg, harness.resolve_controllers(["periodic"], cfg))
u_pol = run.final_eval.per_seed("policy", "utility")
u_per = per.per_seed("periodic", "utility")
d = u_pol - u_per
print(f"\npolicy utility {u_pol.mean():.4f}  periodic {u_per.mean():.4f}  "
      f"paired diff {d.mean():+.4f} +- {1.96 * d.std(ddof=1) / np.sqrt(d.size):.4f}")
for m in ("occ", "cvar", "discounted_cost"):
    print(f"{m:16s} policy {run.final_eval.value('policy', m):.4f}  periodic {per.value('periodic', m):.4f}")
