"""
The whole pipeline at toy scale
===============================

Collect random play, fit the dynamics, collect planner play with frames,
train the prior for one epoch and compare both agents. The numbers are far
too small to say anything about which agent is better; the point is the
sequence of artifacts. ``ipp`` on the command line runs the same steps.
"""

import dataclasses
import tempfile
from pathlib import Path

from ipp import harness
from ipp.prior_model import TrainConfig

root = Path(tempfile.mkdtemp(prefix="ipp-demo-"))
base = harness.ExperimentConfig(seed=0, out_dir=str(root / "random"), max_ticks_per_episode=200)

# %%
# Random play is enough to identify gravity and the two action impacts.
_, summary = harness.collect(base, episodes=10, policy="random")
print(summary.line())
dyn = harness.estimate(base)
print("dynamics:", dyn.to_json())

# %%
# The planner with a uniform prior then plays a few episodes whose frames
# become training data for the prior network.
expert = dataclasses.replace(base, out_dir=str(root / "expert"), seed=100,
                             planner=harness.with_budget(base.planner, 64),
                             train=TrainConfig(epochs=1))
_, summary = harness.collect(expert, episodes=2, policy="planner", dynamics_path=root / "random" / "dynamics.json")
print(summary.line())
_, history = harness.train_prior(expert)
print("loss by epoch:", [round(v, 3) for v in history])

# %%
# Evaluate both agents at the same sample budget.
for kind in ("pb-uniform", "pb-cnn"):
    result = harness.evaluate(dataclasses.replace(expert, episodes_per_eval=3), kind, budget_samples=32,
                              dynamics_path=root / "random" / "dynamics.json")
    print(kind, "scores", result.scores, "mean decision", f"{result.decision_ms_mean:.2f} ms")
print("artifacts in", root)
