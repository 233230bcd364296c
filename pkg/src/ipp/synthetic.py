"""Synthetic frame-stack task for checking that the prior network can learn."""

from __future__ import annotations

import numpy as np

from .physics_env import EnvConfig, Obstacle, WorldState, downsample, render


def bird_gap_task(
    n: int = 200,
    delta: int = 10,
    seed: int = 0,
    cfg: EnvConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Frame stacks of a bird above or below an upcoming gap.

    Above the gap the target is ``(0.2, 0.8) * delta`` (mostly Noop); below
    it the counts are reversed. Returns ``(inputs (n,4,80,80), targets (n,2))``.
    """
    cfg = cfg or EnvConfig()
    rng = np.random.default_rng(seed)
    inputs = np.empty((n, 4, 80, 80), np.float32)
    targets = np.empty((n, 2))
    lo, hi = cfg.gap_center_range
    for i in range(n):
        gap = rng.uniform(lo, hi)
        x0 = rng.uniform(cfg.bird_x + 20, cfg.world_width - cfg.pipe_width)
        above = i % 2 == 0
        offset = rng.uniform(cfg.gap_half_height * 0.5, cfg.gap_half_height * 1.5)
        y0 = gap - offset if above else gap + offset
        y0 = float(np.clip(y0, cfg.bird_radius + 1, cfg.world_height - cfg.bird_radius - 1))
        vy = rng.uniform(-2, 2)
        for k in range(4):
            s = WorldState(
                bird_y=y0 + vy * k,
                bird_vy=vy,
                bird_x=cfg.bird_x,
                obstacles=(Obstacle(x0 - cfg.scroll_speed * k, gap, cfg.gap_half_height, cfg.pipe_width),),
            )
            inputs[i, k] = downsample(render(s, cfg=cfg))
        targets[i] = (0.2 * delta, 0.8 * delta) if above else (0.8 * delta, 0.2 * delta)
    return inputs, targets
