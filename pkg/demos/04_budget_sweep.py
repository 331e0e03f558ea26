"""
How utility grows with the budget
=================================

For each budget fraction alpha the score thresholds are recalibrated and the
policy is retrained against the new budget B = alpha * C / (1 - gamma).
Every controller runs on the same seeds at every alpha. The full sweep
retrains five policies and takes a few minutes; pass a smaller iteration
count for a quick look.
"""

import sys

from beliefroute import harness
from beliefroute.core import ExperimentConfig

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500
cfg = harness.calibrate(ExperimentConfig(iterations=iterations))
names = ["policy", "periodic", "confidence_threshold", "risk_predictor"]
rows = harness.budget_sweep(cfg, names=names)

alphas = sorted({r["alpha"] for r in rows})
table = {(r["controller"], r["alpha"]): r for r in rows}
print("utility by alpha")
print(f"{'controller':22s}" + "".join(f"{a:>9g}" for a in alphas))
for n in names:
    print(f"{n:22s}" + "".join(f"{table[n, a]['utility']:9.4f}" for a in alphas))
print("\ndiscounted cost / B")
for n in names:
    print(f"{n:22s}" + "".join(f"{table[n, a]['discounted_cost'] / table[n, a]['B']:9.2f}"
                               for a in alphas))
