"""Independent oracles shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

from ipp.physics_env import Action, EnvConfig, Obstacle, WorldState, step

SCENE_CFG = EnvConfig()


def sequence_weight(n_flaps: int, h: int) -> float:
    """Probability of one particular length-h sequence under a uniform Dirichlet prior.

    Integrating theta**k * (1 - theta)**(h - k) over theta in [0, 1] gives
    k! (h - k)! / (h + 1)!.
    """
    return math.factorial(n_flaps) * math.factorial(h - n_flaps) / math.factorial(h + 1)


def survives(s: WorldState, actions, cfg: EnvConfig = SCENE_CFG) -> bool:
    """Step the real environment; noiseless config so the rng is never consulted."""
    rng = np.random.default_rng(0)
    for a in actions:
        s = step(s, a, cfg, rng)
        if not s.alive:
            return False
    return True


def survival_by_first_action(s: WorldState, h: int = 8, cfg: EnvConfig = SCENE_CFG) -> np.ndarray:
    """P(no collision within h ticks | first action) when plans come from a uniform prior."""
    totals = np.zeros(len(Action))
    for seq in itertools.product(list(Action), repeat=h):
        if survives(s, seq, cfg):
            totals[seq[0]] += sequence_weight(sum(1 for a in seq if a == Action.FLAP), h)
    # each first action carries half of the prior mass
    return totals / 0.5


def single_obstacle_scenes(n: int = 20) -> list[WorldState]:
    """Hand-built scenes: one pipe at varying distance, bird at varying height and speed."""
    scenes = []
    rng = np.random.default_rng(20240601)
    while len(scenes) < n:
        gap = float(rng.choice([96.0, 128.0, 160.0]))
        x = float(rng.choice([40.0, 56.0, 60.0, 66.0, 72.0]))
        y = float(np.clip(gap + rng.uniform(-60, 60), 20.0, 236.0))
        vy = float(rng.uniform(-6, 6))
        ob = Obstacle(x=x, gap_center_y=gap, gap_half_height=36.0, width=32.0)
        s = WorldState(bird_y=y, bird_vy=vy, bird_x=SCENE_CFG.bird_x, obstacles=(ob,))
        p = survival_by_first_action(s)
        # keep scenes where the choice matters and some plan survives
        if p.max() > 0 and abs(p[0] - p[1]) > 0.05:
            scenes.append(s)
    return scenes
