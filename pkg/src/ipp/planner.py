"""Anytime rollout planner with a Dirichlet prior over action frequencies.

Each iteration draws action probabilities from ``Dirichlet(alpha)``, an i.i.d.
plan of ``h`` actions from them, and per-step velocity impacts from the
fitted Gaussians. The plan is rolled forward through the kinematic model;
plans that stay clear of every surface are kept, their action counts are
added to ``alpha`` and the horizon grows by ``delta``. When the budget runs
out the most frequent first action among kept plans is returned.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import EstimatedDynamics
from .physics_env import N_ACTIONS, Action, EnvConfig, WorldState


class ContractError(RuntimeError):
    pass


# -- Dirichlet / gamma sampling ----------------------------------------------


def _log_gamma_ge1(shape: float, rng: np.random.Generator) -> float:
    # squeeze-and-reject gamma sampler for shape >= 1
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * x**4:
            return math.log(d * v)
        if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return math.log(d * v)


def log_gamma_sample(shape: float, rng: np.random.Generator) -> float:
    """Log of a Gamma(shape, 1) draw.

    Shapes below one use the boost ``G(a) = G(a + 1) * U**(1/a)``, kept in
    log space so tiny shapes cannot underflow to zero.
    """
    if not shape > 0:
        raise ValueError("gamma shape must be positive")
    if shape >= 1.0:
        return _log_gamma_ge1(shape, rng)
    u = 1.0 - rng.random()  # (0, 1]
    return _log_gamma_ge1(shape + 1.0, rng) + math.log(u) / shape


def gamma_sample(shape: float, rng: np.random.Generator) -> float:
    return math.exp(log_gamma_sample(shape, rng))


def validate_alpha(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1 or a.shape[0] != N_ACTIONS:
        raise ValueError(f"alpha must have {N_ACTIONS} components, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError("alpha components must be finite and positive")
    return a


def _dirichlet(alpha: Sequence[float], rng: np.random.Generator) -> list[float]:
    logs = [log_gamma_sample(a, rng) for a in alpha]
    top = max(logs)
    w = [math.exp(v - top) for v in logs]
    total = math.fsum(w)
    return [v / total for v in w]


def dirichlet_sample(alpha, rng: np.random.Generator) -> np.ndarray:
    """theta_i = g_i / sum(g) with independent g_i ~ Gamma(alpha_i, 1)."""
    a = validate_alpha(alpha)
    return np.array(_dirichlet(a.tolist(), rng))


def uniform_prior(n_actions: int = N_ACTIONS) -> np.ndarray:
    if n_actions < 2:
        raise ValueError("need at least two actions")
    return np.ones(n_actions)


# -- rollouts ------------------------------------------------------------------


class _Rollout:
    """Kinematic forward model anchored at one state.

    The admissible band ``[lo[k], hi[k]]`` for the bird centre after ``k``
    ticks depends only on the state, so it is computed once and reused by
    every plan simulated from that state.
    """

    def __init__(self, s: WorldState, dyn: EstimatedDynamics, cfg: EnvConfig) -> None:
        self.y0 = s.bird_y
        self.vy0 = s.bird_vy
        self.g = dyn.g_hat
        self.tv = cfg.terminal_velocity
        self.cfg = cfg
        self.bird_x = s.bird_x
        self._obs = s.obstacles
        self.lo: list[float] = []
        self.hi: list[float] = []
        self._extend(64)

    def _extend(self, h: int) -> None:
        cfg = self.cfg
        r = cfg.bird_radius
        n = max(h, 2 * len(self.lo))
        lo = np.full(n, r)
        hi = np.full(n, cfg.world_height - r)
        for ob in self._obs:
            # repeated subtraction mirrors the environment's per-tick scroll exactly
            steps = np.empty(n + 1)
            steps[0] = ob.x
            steps[1:] = -cfg.scroll_speed
            left = np.cumsum(steps)[1:]
            right = left + ob.width
            dx = np.where(self.bird_x < left, left - self.bird_x,
                          np.where(self.bird_x > right, self.bird_x - right, 0.0))
            near = dx < r
            if not near.any():
                continue
            e = np.sqrt(r * r - dx[near] ** 2)
            lo[near] = np.maximum(lo[near], ob.gap_top + e)
            hi[near] = np.minimum(hi[near], ob.gap_bottom - e)
        self.lo, self.hi = lo.tolist(), hi.tolist()

    def collides(self, impacts: Sequence[float]) -> bool:
        h = len(impacts)
        if h > len(self.lo):
            self._extend(h)
        lo, hi = self.lo, self.hi
        g, tv = self.g, self.tv
        v, y = self.vy0, self.y0
        # scalar loop with early exit; same operation order as the environment
        for k in range(h):
            v = v + g + impacts[k]
            if v > tv:
                v = tv
            elif v < -tv:
                v = -tv
            y = y + v
            if y < lo[k] or y > hi[k]:
                return True
        return False


def simulate(
    s: WorldState,
    impacts: Sequence[float],
    h: int,
    dyn: EstimatedDynamics,
    cfg: EnvConfig | None = None,
) -> bool:
    """Roll ``h`` velocity impacts forward from ``s``; True if any tick collides."""
    impacts = [float(v) for v in impacts]
    if len(impacts) != h:
        raise ValueError(f"expected {h} impacts, got {len(impacts)}")
    return _Rollout(s, dyn, cfg or EnvConfig()).collides(impacts)


# -- plans and the sample store --------------------------------------------


@dataclass(frozen=True, slots=True)
class PlanSample:
    actions: np.ndarray
    impacts: np.ndarray
    horizon_h: int
    c_h: bool
    t: int = 0

    @property
    def first_action(self) -> Action:
        return Action(int(self.actions[0]))


@dataclass(slots=True)
class SampleStore:
    """Collision-free plans in insertion order."""

    m: list[PlanSample] = field(default_factory=list)

    def add(self, plan: PlanSample) -> None:
        if plan.c_h:
            raise ContractError("only collision-free plans may be stored")
        self.m.append(plan)

    def __len__(self) -> int:
        return len(self.m)

    def __iter__(self):
        return iter(self.m)


class _ImpactTable:
    def __init__(self, dyn: EstimatedDynamics) -> None:
        self.mu = np.array([dyn.impacts[a].mu for a in Action])
        self.sigma = np.array([dyn.impacts[a].sigma for a in Action])
        self.noisy = bool(np.any(self.sigma > 0))

    def draw(self, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu = self.mu[actions]
        if not self.noisy:
            return mu
        return mu + self.sigma[actions] * rng.standard_normal(len(actions))


def _sample_plan(
    alpha: np.ndarray,
    h: int,
    table: _ImpactTable,
    model: _Rollout,
    rng: np.random.Generator,
    t: int,
) -> PlanSample:
    theta = _dirichlet(alpha.tolist(), rng)
    cdf = np.cumsum(theta)
    actions = np.minimum(np.searchsorted(cdf, rng.random(h), side="right"), N_ACTIONS - 1)
    impacts = table.draw(actions, rng)
    c_h = model.collides(impacts.tolist())
    return PlanSample(actions=actions.astype(np.int8), impacts=impacts, horizon_h=h, c_h=c_h, t=t)


def sample_actions(
    s: WorldState,
    t: int,
    alpha,
    h: int,
    dyn: EstimatedDynamics,
    rng: np.random.Generator,
    cfg: EnvConfig | None = None,
) -> tuple[PlanSample, bool]:
    """Draw one plan for ticks ``t .. t+h-1`` and simulate it."""
    if not s.alive:
        raise ContractError("cannot plan from a terminal state")
    if h < 1:
        raise ValueError("horizon must be at least 1")
    plan = _sample_plan(
        validate_alpha(alpha), h, _ImpactTable(dyn), _Rollout(s, dyn, cfg or EnvConfig()), rng, t
    )
    return plan, plan.c_h


def update_alpha(alpha, plan: PlanSample) -> np.ndarray:
    """Add the plan's per-action counts to ``alpha`` (returns a new array)."""
    if plan.c_h:
        raise ContractError("alpha is only updated from collision-free plans")
    if plan.horizon_h < 1:
        raise ContractError("plans must have at least one action")
    a = np.array(alpha, dtype=np.float64)
    return a + np.bincount(plan.actions, minlength=N_ACTIONS)


@dataclass(frozen=True, slots=True)
class ActionDistribution:
    counts: np.ndarray
    probabilities: np.ndarray | None

    @property
    def undefined(self) -> bool:
        return self.probabilities is None


def estimate_conditional(m: SampleStore | Sequence[PlanSample], t: int = 0) -> ActionDistribution:
    """Frequency of each first action among stored collision-free plans."""
    firsts = [int(p.actions[0]) for p in m]
    return _distribution(np.bincount(np.asarray(firsts, dtype=np.int64), minlength=N_ACTIONS))


def _distribution(counts: np.ndarray) -> ActionDistribution:
    total = counts.sum()
    probs = counts / total if total > 0 else None
    return ActionDistribution(counts=counts, probabilities=probs)


# -- GetAction -------------------------------------------------------------


class FallbackRule(str, enum.Enum):
    PRIOR_MEAN = "prior_mean"
    LOWEST_INDEX = "lowest_index"


@dataclass(frozen=True, slots=True)
class PlannerConfig:
    initial_horizon: int = 10
    horizon_increment: int = 1
    budget_samples: int | None = 128
    budget_ms: float | None = None
    fallback_rule: FallbackRule = FallbackRule.PRIOR_MEAN
    max_horizon: int | None = None
    rng_seed: int = 0
    # wall-clock mode stops sampling this early to leave time for choosing the
    # action and returning; measured tails on a desktop CPU are 20-80 us
    finish_reserve_ms: float = 0.2

    def __post_init__(self) -> None:
        if self.initial_horizon < 1:
            raise ValueError("initial_horizon must be >= 1")
        if self.horizon_increment < 0:
            raise ValueError("horizon_increment must be >= 0")
        if (self.budget_samples is None) == (self.budget_ms is None):
            raise ValueError("set exactly one of budget_samples / budget_ms")
        if self.budget_samples is not None and self.budget_samples <= 0:
            raise ValueError("budget_samples must be positive")
        if self.budget_ms is not None and not self.budget_ms > 0:
            raise ValueError("budget_ms must be positive")
        if self.max_horizon is not None and self.max_horizon < self.initial_horizon:
            raise ValueError("max_horizon must be >= initial_horizon")
        if self.finish_reserve_ms < 0:
            raise ValueError("finish_reserve_ms must be >= 0")

    @property
    def budget_kind(self) -> str:
        return "samples" if self.budget_samples is not None else "ms"

    @property
    def budget(self) -> float:
        return self.budget_samples if self.budget_samples is not None else self.budget_ms

    def to_dict(self) -> dict:
        return {
            "initial_horizon": self.initial_horizon,
            "horizon_increment": self.horizon_increment,
            "budget_samples": self.budget_samples,
            "budget_ms": self.budget_ms,
            "fallback_rule": self.fallback_rule.value,
            "max_horizon": self.max_horizon,
            "rng_seed": self.rng_seed,
            "finish_reserve_ms": self.finish_reserve_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        d = dict(d)
        if "fallback_rule" in d:
            d["fallback_rule"] = FallbackRule(d["fallback_rule"])
        return cls(**d)


@dataclass(slots=True)
class PlannerDiagnostics:
    samples: int
    survivors: int
    final_h: int
    final_alpha: list[float]
    elapsed_us: int
    fallback: bool
    max_sample_us: int = 0
    counts: list[int] = field(default_factory=list)
    prior_us: int = 0  # time spent computing alpha, outside the budget; set by the caller

    def to_json(self) -> dict:
        return {
            "samples": self.samples,
            "survivors": self.survivors,
            "final_h": self.final_h,
            "final_alpha": self.final_alpha,
            "elapsed_us": self.elapsed_us,
            "fallback": self.fallback,
            "max_sample_us": self.max_sample_us,
            "prior_us": self.prior_us,
        }


def _prior_choice(prior: np.ndarray, candidates: Sequence[int], rule: FallbackRule) -> int:
    if rule is FallbackRule.LOWEST_INDEX:
        return min(candidates)
    mean = prior / prior.sum()
    best = max(mean[c] for c in candidates)
    return min(c for c in candidates if mean[c] == best)


def get_action(
    s: WorldState,
    t: int,
    prior_alpha,
    cfg: PlannerConfig,
    dyn: EstimatedDynamics,
    rng: np.random.Generator,
    env_cfg: EnvConfig | None = None,
    store: SampleStore | None = None,
) -> tuple[Action, PlannerDiagnostics]:
    """Sample-simulate-condition until the budget is spent, then pick an action.

    ``prior_alpha`` is never modified. Pass ``store`` to keep the surviving
    plans for inspection; otherwise only their first actions are tallied,
    which gives the same decision without holding every plan in memory.

    In wall-clock mode the budget covers the whole call, setup included, and
    sampling stops once the next rollout (predicted from the previous one)
    would end within ``finish_reserve_ms`` of the deadline.
    """
    start = time.perf_counter()
    if not s.alive:
        raise ContractError("cannot plan from a terminal state")
    prior = validate_alpha(prior_alpha)
    env_cfg = env_cfg or EnvConfig()
    alpha = prior.copy()
    model = _Rollout(s, dyn, env_cfg)
    table = _ImpactTable(dyn)
    counts = [0] * N_ACTIONS
    h = cfg.initial_horizon
    samples = 0
    max_sample = 0.0

    def keep(plan: PlanSample) -> None:
        nonlocal alpha, h
        if store is not None:
            store.add(plan)
        counts[plan.actions[0]] += 1
        alpha = update_alpha(alpha, plan)
        h += cfg.horizon_increment
        if cfg.max_horizon is not None:
            h = min(h, cfg.max_horizon)

    if cfg.budget_samples is not None:
        while samples < cfg.budget_samples:
            plan = _sample_plan(alpha, h, table, model, rng, t)
            samples += 1
            if not plan.c_h:
                keep(plan)
        now = time.perf_counter()
    else:
        deadline = start + (cfg.budget_ms - cfg.finish_reserve_ms) / 1000.0
        now = time.perf_counter()
        last = 0.0
        while samples == 0 or now + last <= deadline:
            plan = _sample_plan(alpha, h, table, model, rng, t)
            samples += 1
            if not plan.c_h:
                keep(plan)
            after = time.perf_counter()
            last = after - now
            max_sample = max(max_sample, last)
            now = after
    elapsed = now - start

    dist = _distribution(np.array(counts, dtype=np.int64))
    if dist.undefined:
        choice = _prior_choice(prior, range(N_ACTIONS), cfg.fallback_rule)
    else:
        top = dist.counts.max()
        tied = [i for i in range(N_ACTIONS) if dist.counts[i] == top]
        choice = tied[0] if len(tied) == 1 else _prior_choice(prior, tied, cfg.fallback_rule)

    diag = PlannerDiagnostics(
        samples=samples,
        survivors=int(sum(counts)),
        final_h=h,
        final_alpha=[float(v) for v in alpha],
        elapsed_us=int(round(elapsed * 1e6)),
        fallback=dist.undefined,
        max_sample_us=int(math.ceil(max_sample * 1e6)),
        counts=[int(c) for c in dist.counts],
    )
    return Action(choice), diag
