"""Headless side-scrolling physics world: a bird under gravity threading pipe gaps.

The y-axis points down. A flap adds an upward velocity impulse on top of
gravity, so with flap probability ``g / dv`` the expected change in vertical
velocity per tick is zero (the "hover" rate, 0.072 with the defaults).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

NATIVE_SIZE = 256
STACK_SIZE = 80
STACK_DEPTH = 4

BACKGROUND = 0.0
OBSTACLE = 0.6
BIRD = 1.0


class Action(enum.IntEnum):
    FLAP = 0
    NOOP = 1


N_ACTIONS = len(Action)


class TerminalStateError(RuntimeError):
    """Raised when stepping a state whose bird has already collided."""


@dataclass(frozen=True, slots=True)
class EnvConfig:
    gravity_g: float = 0.36
    flap_impulse_dv: float = 5.0
    action_noise_sigma: float = 0.0
    terminal_velocity: float = 10.0
    world_height: float = 256.0
    world_width: float = 256.0
    scroll_speed: float = 2.0
    pipe_spacing: float = 128.0
    pipe_width: float = 32.0
    gap_half_height: float = 36.0
    gap_center_range: tuple[float, float] = (64.0, 192.0)
    bird_x: float = 64.0
    bird_radius: float = 6.0
    bird_start_y: float = 128.0
    first_obstacle_x: float = 192.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.gravity_g <= 0:
            raise ValueError("gravity_g must be positive")
        if self.flap_impulse_dv <= 0:
            raise ValueError("flap_impulse_dv must be positive")
        if self.terminal_velocity <= 0:
            raise ValueError("terminal_velocity must be positive")
        if self.action_noise_sigma < 0:
            raise ValueError("action_noise_sigma must be non-negative")
        if self.gap_half_height <= self.bird_radius:
            raise ValueError("gap_half_height must exceed the bird radius")
        lo, hi = self.gap_center_range
        if not (self.gap_half_height < lo <= hi < self.world_height - self.gap_half_height):
            raise ValueError("gap_center_range must keep every gap inside the world")
        if self.scroll_speed <= 0 or self.pipe_spacing <= self.pipe_width:
            raise ValueError("invalid scroll/pipe geometry")

    @property
    def hover_flap_probability(self) -> float:
        return self.gravity_g / self.flap_impulse_dv

    def to_dict(self) -> dict:
        return {
            "gravity_g": self.gravity_g,
            "flap_impulse_dv": self.flap_impulse_dv,
            "action_noise_sigma": self.action_noise_sigma,
            "terminal_velocity": self.terminal_velocity,
            "world_height": self.world_height,
            "world_width": self.world_width,
            "scroll_speed": self.scroll_speed,
            "pipe_spacing": self.pipe_spacing,
            "pipe_width": self.pipe_width,
            "gap_half_height": self.gap_half_height,
            "gap_center_range": list(self.gap_center_range),
            "bird_x": self.bird_x,
            "bird_radius": self.bird_radius,
            "bird_start_y": self.bird_start_y,
            "first_obstacle_x": self.first_obstacle_x,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "gap_center_range" in d:
            d["gap_center_range"] = tuple(float(v) for v in d["gap_center_range"])
        return cls(**d)


@dataclass(frozen=True, slots=True)
class Obstacle:
    x: float
    gap_center_y: float
    gap_half_height: float
    width: float

    @property
    def gap_top(self) -> float:
        return self.gap_center_y - self.gap_half_height

    @property
    def gap_bottom(self) -> float:
        return self.gap_center_y + self.gap_half_height


@dataclass(frozen=True, slots=True)
class WorldState:
    bird_y: float
    bird_vy: float
    bird_x: float
    obstacles: tuple[Obstacle, ...] = ()
    tick: int = 0
    score: int = 0
    alive: bool = True


def _clamp(v: float, limit: float) -> float:
    return min(max(v, -limit), limit)


def free_interval(
    obstacles: Sequence[Obstacle], bird_x: float, cfg: EnvConfig, offset: float = 0.0
) -> tuple[float, float]:
    """Range of bird centre heights that touch nothing.

    ``offset`` shifts every obstacle left by that many pixels, which lets a
    rollout query future ticks without building new states. A bird exactly
    touching a surface is not a collision.
    """
    r = cfg.bird_radius
    lo = r
    hi = cfg.world_height - r
    r2 = r * r
    for ob in obstacles:
        left = ob.x - offset
        right = left + ob.width
        if bird_x < left:
            dx = left - bird_x
        elif bird_x > right:
            dx = bird_x - right
        else:
            dx = 0.0
        if dx >= r:
            continue
        e = math.sqrt(r2 - dx * dx)
        lo = max(lo, ob.gap_top + e)
        hi = min(hi, ob.gap_bottom - e)
    return lo, hi


def collided(state: WorldState, cfg: EnvConfig | None = None) -> bool:
    """True iff the bird disc overlaps the floor, the ceiling, or a pipe body."""
    cfg = cfg or EnvConfig()
    lo, hi = free_interval(state.obstacles, state.bird_x, cfg)
    return not (lo <= state.bird_y <= hi)


def _spawn(obstacles: list[Obstacle], cfg: EnvConfig, rng: np.random.Generator) -> None:
    # keep one obstacle beyond the right edge so rollouts see the next gap early;
    # a hand-built empty sky stays empty
    while obstacles and obstacles[-1].x <= cfg.world_width:
        lo, hi = cfg.gap_center_range
        obstacles.append(
            Obstacle(
                x=obstacles[-1].x + cfg.pipe_spacing,
                gap_center_y=float(rng.uniform(lo, hi)),
                gap_half_height=cfg.gap_half_height,
                width=cfg.pipe_width,
            )
        )


def reset(cfg: EnvConfig, rng: np.random.Generator) -> WorldState:
    lo, hi = cfg.gap_center_range
    obstacles = [
        Obstacle(
            x=cfg.first_obstacle_x,
            gap_center_y=float(rng.uniform(lo, hi)),
            gap_half_height=cfg.gap_half_height,
            width=cfg.pipe_width,
        )
    ]
    _spawn(obstacles, cfg, rng)
    return WorldState(
        bird_y=cfg.bird_start_y,
        bird_vy=0.0,
        bird_x=cfg.bird_x,
        obstacles=tuple(obstacles),
    )


def impact(action: Action, cfg: EnvConfig) -> float:
    return -cfg.flap_impulse_dv if action == Action.FLAP else 0.0


def step(
    state: WorldState, action: Action, cfg: EnvConfig, rng: np.random.Generator
) -> WorldState:
    """Advance the world one tick."""
    if not state.alive:
        raise TerminalStateError("cannot step a terminal state")
    dv = impact(Action(action), cfg)
    if cfg.action_noise_sigma > 0:
        dv += float(rng.normal(0.0, cfg.action_noise_sigma))
    vy = _clamp(state.bird_vy + cfg.gravity_g + dv, cfg.terminal_velocity)
    y = state.bird_y + vy

    score = state.score
    moved: list[Obstacle] = []
    for ob in state.obstacles:
        new_x = ob.x - cfg.scroll_speed
        if ob.x + ob.width >= state.bird_x > new_x + ob.width:
            score += 1
        if new_x + ob.width >= 0:
            moved.append(replace(ob, x=new_x))
    _spawn(moved, cfg, rng)

    nxt = WorldState(
        bird_y=y,
        bird_vy=vy,
        bird_x=state.bird_x,
        obstacles=tuple(moved),
        tick=state.tick + 1,
        score=score,
    )
    if collided(nxt, cfg):
        nxt = replace(nxt, alive=False)
    return nxt


# -- rendering -------------------------------------------------------------


def render(
    state: WorldState,
    width: int = NATIVE_SIZE,
    height: int = NATIVE_SIZE,
    cfg: EnvConfig | None = None,
) -> np.ndarray:
    """Rasterize ``state`` to a ``(height, width)`` grayscale frame in [0, 1].

    Pixel centres are sampled: background 0.0, pipes 0.6, bird 1.0.
    """
    if width <= 0 or height <= 0:
        raise ValueError("frame dimensions must be positive")
    cfg = cfg or EnvConfig()
    sx = cfg.world_width / width
    sy = cfg.world_height / height
    px = (np.arange(width) + 0.5) * sx
    py = (np.arange(height) + 0.5) * sy
    frame = np.full((height, width), BACKGROUND)

    for ob in state.obstacles:
        cols = (px >= ob.x) & (px < ob.x + ob.width)
        if not cols.any():
            continue
        rows = (py < ob.gap_top) | (py > ob.gap_bottom)
        frame[np.ix_(rows, cols)] = OBSTACLE

    r = cfg.bird_radius
    cols = np.abs(px - state.bird_x) <= r
    rows = np.abs(py - state.bird_y) <= r
    if cols.any() and rows.any():
        dx = px[cols] - state.bird_x
        dy = py[rows] - state.bird_y
        disc = dy[:, None] ** 2 + dx[None, :] ** 2 <= r * r
        sub = frame[np.ix_(rows, cols)]
        sub[disc] = BIRD
        frame[np.ix_(rows, cols)] = sub
    return frame


@lru_cache(maxsize=16)
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the fraction of output cell i covered by each input cell."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = i * scale, (i + 1) * scale
        for j in range(int(np.floor(a)), min(int(np.ceil(b)), n_in)):
            w[i, j] = min(b, j + 1) - max(a, j)
    w /= scale
    w.setflags(write=False)
    return w


def downsample(frame: np.ndarray, size: int = STACK_SIZE) -> np.ndarray:
    """Box-filter (area-average) a frame to ``size x size``."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape
    if (h, w) == (size, size):
        out = frame
    else:
        out = _area_weights(h, size) @ frame @ _area_weights(w, size).T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess(history: Sequence[np.ndarray]) -> np.ndarray:
    """Stack the newest four frames as a ``(4, 80, 80)`` float32 array.

    Frames are ordered oldest to newest. Short histories are padded at the
    front by repeating the oldest frame.
    """
    if len(history) == 0:
        raise ValueError("preprocess needs at least one frame")
    recent = list(history[-STACK_DEPTH:])
    recent = [recent[0]] * (STACK_DEPTH - len(recent)) + recent
    return np.stack([downsample(f) for f in recent])


# -- episodes ----------------------------------------------------------------

REWARD_PASS = 1
REWARD_COLLISION = -1


@dataclass(slots=True)
class TickRecord:
    tick: int
    y: float
    vy: float | None
    action: int
    reward: int
    collision: bool
    frame_idx: int = -1

    def to_json(self) -> dict:
        return {
            "tick": self.tick,
            "y": self.y,
            "vy": self.vy,
            "action": self.action,
            "reward": self.reward,
            "collision": self.collision,
            "frame_idx": self.frame_idx,
        }


@dataclass(slots=True)
class TrajectoryLog:
    """One episode. Record ``t`` holds the pre-action state at tick ``t``,
    the action taken there, and the reward/collision that action produced.
    ``frames[k]`` is the 80x80 downsampled render referenced by ``frame_idx``.
    """

    records: list[TickRecord] = field(default_factory=list)
    frames: np.ndarray | None = None
    final_state: WorldState | None = None

    @property
    def score(self) -> int:
        if self.final_state is not None:
            return self.final_state.score
        return sum(r.reward for r in self.records if r.reward > 0)

    def __len__(self) -> int:
        return len(self.records)


Policy = Callable[[WorldState], Action]


def run_episode(
    cfg: EnvConfig,
    policy: Policy,
    max_ticks: int,
    seed: int | None = None,
    record_frames: bool = False,
) -> TrajectoryLog:
    """Play one episode until collision or ``max_ticks`` decisions."""
    if max_ticks <= 0:
        raise ValueError("max_ticks must be positive")
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    state = reset(cfg, rng)
    log = TrajectoryLog()
    frames: list[np.ndarray] = []
    while state.alive and state.tick < max_ticks:
        frame_idx = -1
        if record_frames:
            frame_idx = len(frames)
            frames.append(downsample(render(state, cfg=cfg)))
        action = Action(policy(state))
        nxt = step(state, action, cfg, rng)
        if not nxt.alive:
            reward = REWARD_COLLISION
        else:
            reward = REWARD_PASS * (nxt.score - state.score)
        log.records.append(
            TickRecord(
                tick=state.tick,
                y=state.bird_y,
                vy=state.bird_vy,
                action=int(action),
                reward=reward,
                collision=not nxt.alive,
                frame_idx=frame_idx,
            )
        )
        state = nxt
    log.final_state = state
    if record_frames:
        log.frames = np.stack(frames) if frames else np.zeros((0, STACK_SIZE, STACK_SIZE), np.float32)
    return log


def random_policy(p_flap: float, rng: np.random.Generator) -> Policy:
    def act(state: WorldState) -> Action:
        return Action.FLAP if rng.random() < p_flap else Action.NOOP

    return act
