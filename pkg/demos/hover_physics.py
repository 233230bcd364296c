"""
Hovering with a random flapper
==============================

The bird gains ``g`` pixels per tick of downward speed and a flap subtracts
``dv``. A policy that flaps with probability ``g / dv`` therefore keeps the
average vertical velocity change at zero.
"""

import numpy as np

from ipp import Action, EnvConfig, WorldState, preprocess, render, step

cfg = EnvConfig()
print(f"g={cfg.gravity_g}  dv={cfg.flap_impulse_dv}  hover flap rate={cfg.hover_flap_probability}")

# %%
# Step an obstacle-free sky many times from rest and average the change in
# vertical velocity. Flaps are rare but large, so the mean sits near zero.
rng = np.random.default_rng(0)
start = WorldState(bird_y=128.0, bird_vy=0.0, bird_x=cfg.bird_x)
flaps = rng.random(20_000) < cfg.hover_flap_probability
dv = np.array([step(start, Action.FLAP if f else Action.NOOP, cfg, rng).bird_vy for f in flaps])
print(f"mean velocity change {dv.mean():+.4f} +- {dv.std(ddof=1) / np.sqrt(dv.size):.4f}")

# %%
# What the prior network sees: four 80x80 frames, oldest first. The first
# observation of an episode is repeated to fill the stack.
frame = render(start, cfg=cfg)
stack = preprocess([frame])
print("rendered", frame.shape, "-> stack", stack.shape, "range", stack.min(), stack.max())
