"""Experiment pipeline: collect gameplay, fit dynamics, train the prior, evaluate.

Every episode ``i`` of a run seeded with ``seed`` uses episode seed
``seed + i``: the environment draws from ``default_rng(seed + i)`` and the
agent from ``default_rng([seed + i, 1])``, so single episodes can be rerun
in isolation.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import logio
from .dynamics import EstimatedDynamics, estimate_dynamics
from .physics_env import (
    Action,
    EnvConfig,
    TrajectoryLog,
    WorldState,
    downsample,
    preprocess,
    random_policy,
    render,
    run_episode,
)
from .planner import PlannerConfig, get_action, uniform_prior
from .prior_model import (
    CnnParams,
    TrainConfig,
    build_dataset,
    forward,
    load_params,
    save_params,
    sgd_fit,
)

log = logging.getLogger(__name__)

LOGS_FILE = "logs.jsonl"
FRAMES_FILE = "frames.ippf"
DYNAMICS_FILE = "dynamics.json"
WEIGHTS_FILE = "prior.ippw"
LOSS_FILE = "loss_history.csv"
SWEEP_FILE = "sweep.csv"
CSV_COLUMNS = ["agent", "budget_kind", "budget", "mean_score", "std", "seed"]


class ConfigError(ValueError):
    exit_code = 2


class MissingArtifactError(FileNotFoundError):
    exit_code = 3


class AgentKind(str, enum.Enum):
    PB_CNN = "pb-cnn"
    PB_UNIFORM = "pb-uniform"


# Tuned so that a few hundred uniform-prior samples clear most pipes while
# small budgets do not; see README for the calibration runs.
DEFAULT_ENV = EnvConfig(
    gap_half_height=48.0,
    terminal_velocity=8.0,
    gap_center_range=(80.0, 176.0),
)
DEFAULT_PLANNER = PlannerConfig(initial_horizon=30, horizon_increment=1, max_horizon=40, budget_samples=128)


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = DEFAULT_ENV
    planner: PlannerConfig = DEFAULT_PLANNER
    train: TrainConfig = field(default_factory=TrainConfig)
    agent_kind: AgentKind = AgentKind.PB_UNIFORM
    episodes_per_eval: int = 10
    max_ticks_per_episode: int = 1000
    seed: int = 0
    out_dir: str = "ipp-out"
    use_ground_truth_dynamics: bool = False
    collect_policy: str = "random"
    collect_p_flap: float = 0.072
    collect_episodes: int = 10

    def __post_init__(self) -> None:
        if self.episodes_per_eval < 1:
            raise ConfigError("episodes_per_eval must be >= 1")
        if self.max_ticks_per_episode < 1:
            raise ConfigError("max_ticks_per_episode must be >= 1")
        if self.collect_policy not in ("random", "planner"):
            raise ConfigError("collect_policy must be 'random' or 'planner'")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "planner": self.planner.to_dict(),
            "train": self.train.to_dict(),
            "agent_kind": self.agent_kind.value,
            "episodes_per_eval": self.episodes_per_eval,
            "max_ticks_per_episode": self.max_ticks_per_episode,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "use_ground_truth_dynamics": self.use_ground_truth_dynamics,
            "collect_policy": self.collect_policy,
            "collect_p_flap": self.collect_p_flap,
            "collect_episodes": self.collect_episodes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            base = cls()
            kw = {}
            if "env" in d:
                kw["env"] = EnvConfig.from_dict({**base.env.to_dict(), **d.pop("env")})
            if "planner" in d:
                kw["planner"] = PlannerConfig.from_dict({**base.planner.to_dict(), **d.pop("planner")})
            if "train" in d:
                kw["train"] = TrainConfig.from_dict({**base.train.to_dict(), **d.pop("train")})
            if "agent_kind" in d:
                kw["agent_kind"] = AgentKind(d.pop("agent_kind"))
            return cls(**kw, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc


def episode_rngs(seed: int, index: int) -> tuple[int, np.random.Generator]:
    ep_seed = seed + index
    return ep_seed, np.random.default_rng([ep_seed, 1])


# -- agents ------------------------------------------------------------------


class UniformPrior:
    def reset(self) -> None:
        pass

    def __call__(self, state: WorldState) -> np.ndarray:
        return uniform_prior()


class CnnPrior:
    """Renders each observed state and feeds the last four frames to the network."""

    def __init__(self, kappa: CnnParams, env_cfg: EnvConfig) -> None:
        self.kappa = kappa
        self.env_cfg = env_cfg
        self.history: list[np.ndarray] = []

    def reset(self) -> None:
        self.history = []

    def __call__(self, state: WorldState) -> np.ndarray:
        if state.tick == 0:
            self.history = []
        self.history.append(downsample(render(state, cfg=self.env_cfg)))
        self.history = self.history[-4:]
        return forward(self.kappa, preprocess(self.history)).astype(np.float64)


class PlannerAgent:
    """Callable policy: prior from ``prior_source`` then a planner decision."""

    def __init__(self, prior_source, planner: PlannerConfig, dyn: EstimatedDynamics,
                 env_cfg: EnvConfig, rng: np.random.Generator) -> None:
        self.prior_source = prior_source
        self.planner = planner
        self.dyn = dyn
        self.env_cfg = env_cfg
        self.rng = rng
        self.latencies_us: list[int] = []
        self.diagnostics = []

    def __call__(self, state: WorldState) -> Action:
        start = time.perf_counter_ns()
        alpha = self.prior_source(state)
        prior_us = (time.perf_counter_ns() - start) // 1000
        action, diag = get_action(state, state.tick, alpha, self.planner, self.dyn, self.rng, self.env_cfg)
        diag.prior_us = prior_us
        self.latencies_us.append(diag.elapsed_us)
        self.diagnostics.append(diag)
        return action


# -- artifacts -------------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path}")
    return path


def load_dynamics(config: ExperimentConfig, path=None) -> EstimatedDynamics:
    if config.use_ground_truth_dynamics:
        return EstimatedDynamics.ground_truth(config.env)
    p = Path(path) if path else config.out / DYNAMICS_FILE
    return EstimatedDynamics.load(_require(p, "dynamics JSON (run `ipp estimate` first)"))


def load_prior(config: ExperimentConfig, path=None) -> CnnParams:
    p = Path(path) if path else config.out / WEIGHTS_FILE
    return load_params(_require(p, "prior weight file (run `ipp train-prior` first)"), n_actions=len(Action),
                       alpha_floor=config.train.alpha_floor)


def _ensure_out(config: ExperimentConfig) -> Path:
    out = config.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out} ({exc})") from exc
    return out


# -- collect -----------------------------------------------------------------


@dataclass
class CollectSummary:
    episodes: int
    ticks: int
    mean_score: float

    def line(self) -> str:
        return f"collected episodes={self.episodes} ticks={self.ticks} mean_score={self.mean_score:.3f}"


def collect(
    config: ExperimentConfig,
    episodes: int | None = None,
    policy: str | None = None,
    dynamics_path=None,
) -> tuple[list[TrajectoryLog], CollectSummary]:
    """Play episodes with a random or planner policy and write logs + frames."""
    episodes = config.collect_episodes if episodes is None else episodes
    policy = policy or config.collect_policy
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    out = _ensure_out(config)
    dyn = load_dynamics(config, dynamics_path) if policy == "planner" else None
    logs = []
    for i in range(episodes):
        ep_seed, agent_rng = episode_rngs(config.seed, i)
        if policy == "random":
            act = random_policy(config.collect_p_flap, np.random.default_rng([ep_seed, 2]))
        elif policy == "planner":
            act = PlannerAgent(UniformPrior(), config.planner, dyn, config.env, agent_rng)
        else:
            raise ConfigError(f"unknown collect policy {policy!r}")
        logs.append(run_episode(config.env, act, config.max_ticks_per_episode, seed=ep_seed, record_frames=True))
    logio.write_logs(logs, out / LOGS_FILE, out / FRAMES_FILE)
    summary = CollectSummary(
        episodes=len(logs),
        ticks=sum(len(l) for l in logs),
        mean_score=float(np.mean([l.score for l in logs])),
    )
    return logs, summary


# -- estimate ----------------------------------------------------------------


def estimate(config: ExperimentConfig, logs_path=None, out_path=None) -> EstimatedDynamics:
    logs_path = Path(logs_path) if logs_path else config.out / LOGS_FILE
    logs = logio.read_logs(_require(logs_path, "trajectory log"))
    dyn = estimate_dynamics(logs, terminal_velocity=config.env.terminal_velocity)
    out_path = Path(out_path) if out_path else config.out / DYNAMICS_FILE
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dyn.save(out_path)
    return dyn


# -- train ---------------------------------------------------------------------


class EmptyDatasetError(ValueError):
    pass


def train_prior(config: ExperimentConfig, logs_path=None, frames_path=None) -> tuple[CnnParams, list[float]]:
    logs_path = Path(logs_path) if logs_path else config.out / LOGS_FILE
    frames_path = Path(frames_path) if frames_path else logs_path.with_name(FRAMES_FILE)
    logs = logio.read_logs(_require(logs_path, "trajectory log"), _require(frames_path, "frame sidecar"))
    cfg = config.train
    data = build_dataset(logs, cfg.delta_window)
    if len(data) == 0:
        raise EmptyDatasetError("no training examples left after dropping negatively rewarded windows")
    kappa = CnnParams.init(np.random.default_rng(cfg.rng_seed), alpha_floor=cfg.alpha_floor)
    fit = sgd_fit(kappa, data, cfg)
    out = _ensure_out(config)
    save_params(fit.params, out / WEIGHTS_FILE)
    with open(out / LOSS_FILE, "w", newline="") as fh:
        fh.write("epoch,loss\n")
        for epoch, value in enumerate(fit.history):
            fh.write(f"{epoch},{value!r}\n")
    return fit.params, fit.history


# -- evaluate ------------------------------------------------------------------


@dataclass
class EvalResult:
    agent_kind: AgentKind
    budget_kind: str
    budget: float
    scores: list[int]
    seed: int
    mean: float = 0.0
    std: float = 0.0
    decision_ms_mean: float = 0.0
    decision_ms_p95: float = 0.0

    def __post_init__(self) -> None:
        if self.scores:
            self.mean = float(np.mean(self.scores))
            self.std = float(np.std(self.scores))

    def to_json(self) -> dict:
        return {
            "agent": self.agent_kind.value,
            "budget_kind": self.budget_kind,
            "budget": self.budget,
            "scores": self.scores,
            "mean": self.mean,
            "std": self.std,
            "decision_ms_mean": self.decision_ms_mean,
            "decision_ms_p95": self.decision_ms_p95,
            "seed": self.seed,
        }

    def csv_row(self) -> list:
        budget = int(self.budget) if self.budget_kind == "samples" else self.budget
        return [self.agent_kind.value, self.budget_kind, budget, repr(self.mean), repr(self.std), self.seed]


def _play(args) -> tuple[int, list[int]]:
    config, kind, planner, dyn, kappa, index = args
    ep_seed, agent_rng = episode_rngs(config.seed, index)
    prior = CnnPrior(kappa, config.env) if kind is AgentKind.PB_CNN else UniformPrior()
    agent = PlannerAgent(prior, planner, dyn, config.env, agent_rng)
    episode = run_episode(config.env, agent, config.max_ticks_per_episode, seed=ep_seed)
    return episode.score, agent.latencies_us


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("IPP_THREADS", "1")))
    except ValueError:
        raise ConfigError("IPP_THREADS must be an integer")


def with_budget(planner: PlannerConfig, samples: int | None = None, ms: float | None = None) -> PlannerConfig:
    if samples is None and ms is None:
        return planner
    return replace(planner, budget_samples=samples, budget_ms=ms)


def evaluate(
    config: ExperimentConfig,
    agent_kind: AgentKind | str | None = None,
    budget_samples: int | None = None,
    budget_ms: float | None = None,
    weights_path=None,
    dynamics_path=None,
) -> EvalResult:
    """Play ``episodes_per_eval`` games and summarise the final scores."""
    kind = AgentKind(agent_kind) if agent_kind is not None else config.agent_kind
    try:
        planner = with_budget(config.planner, budget_samples, budget_ms)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dyn = load_dynamics(config, dynamics_path)
    kappa = load_prior(config, weights_path) if kind is AgentKind.PB_CNN else None
    jobs = [(config, kind, planner, dyn, kappa, i) for i in range(config.episodes_per_eval)]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_play, jobs))
    else:
        results = [_play(j) for j in jobs]
    latencies = np.concatenate([np.asarray(r[1], dtype=float) for r in results]) / 1000.0
    return EvalResult(
        agent_kind=kind,
        budget_kind=planner.budget_kind,
        budget=planner.budget,
        scores=[r[0] for r in results],
        seed=config.seed,
        decision_ms_mean=float(latencies.mean()) if latencies.size else 0.0,
        decision_ms_p95=float(np.percentile(latencies, 95)) if latencies.size else 0.0,
    )


def results_csv(rows: Sequence[EvalResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def write_eval(config: ExperimentConfig, result: EvalResult) -> tuple[Path, Path]:
    out = _ensure_out(config)
    budget = int(result.budget) if result.budget_kind == "samples" else result.budget
    stem = f"eval_{result.agent_kind.value}_{result.budget_kind}{budget}_seed{result.seed}"
    jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
    jpath.write_text(json.dumps(result.to_json(), indent=2) + "\n")
    cpath.write_text(results_csv([result]))
    return jpath, cpath


@dataclass
class SweepOutcome:
    results: list[EvalResult]
    failures: list[tuple[str, float, str]]
    csv_path: Path


def sweep(
    config: ExperimentConfig,
    budgets: Sequence[float],
    agents: Sequence[AgentKind | str],
    budget_kind: str = "samples",
    weights_path=None,
    dynamics_path=None,
) -> SweepOutcome:
    """Evaluate every agent at every budget; failed cells are reported, not fatal."""
    if not budgets:
        raise ConfigError("budgets must be non-empty")
    if budget_kind not in ("samples", "ms"):
        raise ConfigError("budget_kind must be 'samples' or 'ms'")
    results, failures = [], []
    for agent in agents:
        kind = AgentKind(agent)
        for b in budgets:
            kw = {"budget_samples": int(b)} if budget_kind == "samples" else {"budget_ms": float(b)}
            try:
                results.append(
                    evaluate(config, kind, weights_path=weights_path, dynamics_path=dynamics_path, **kw)
                )
            except Exception as exc:  # keep going; the CLI turns failures into a nonzero exit
                log.error("sweep cell %s/%s failed: %s", kind.value, b, exc)
                failures.append((kind.value, b, str(exc)))
    out = _ensure_out(config)
    path = out / SWEEP_FILE
    path.write_text(results_csv(results))
    return SweepOutcome(results, failures, path)


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

