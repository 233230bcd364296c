"""Recover gravity and per-action velocity impacts from recorded trajectories."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .physics_env import Action, EnvConfig, TrajectoryLog


class InsufficientObservationsError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Impact:
    mu: float
    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True, slots=True)
class EstimatedDynamics:
    g_hat: float
    impacts: dict[Action, Impact]

    def __post_init__(self) -> None:
        missing = [a.name for a in Action if a not in self.impacts]
        if missing:
            raise ValueError(f"impacts missing for actions: {missing}")

    @classmethod
    def ground_truth(cls, cfg: EnvConfig) -> "EstimatedDynamics":
        s = cfg.action_noise_sigma
        return cls(
            g_hat=cfg.gravity_g,
            impacts={Action.FLAP: Impact(-cfg.flap_impulse_dv, s), Action.NOOP: Impact(0.0, s)},
        )

    def to_json(self) -> dict:
        return {
            "g": self.g_hat,
            "impacts": {
                str(int(a)): {"mu": self.impacts[a].mu, "sigma": self.impacts[a].sigma}
                for a in Action
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EstimatedDynamics":
        try:
            impacts = {
                Action(int(k)): Impact(float(v["mu"]), float(v["sigma"]))
                for k, v in doc["impacts"].items()
            }
            return cls(g_hat=float(doc["g"]), impacts=impacts)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed dynamics document: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EstimatedDynamics":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _transitions(
    logs: Iterable[TrajectoryLog], terminal_velocity: float | None
) -> Iterable[tuple[int, float]]:
    """Yield ``(action, dv)`` for every observed non-terminal transition.

    ``dv`` is the velocity change across the tick. When velocities are not
    recorded it comes from the second difference of positions, which needs
    the preceding tick as well.
    """
    for log in logs:
        recs = log.records
        for i in range(len(recs) - 1):
            cur, nxt = recs[i], recs[i + 1]
            if cur.collision or nxt.tick != cur.tick + 1:
                continue
            if cur.vy is not None and nxt.vy is not None:
                v_after = nxt.vy
                dv = nxt.vy - cur.vy
            else:
                if i == 0 or recs[i - 1].tick != cur.tick - 1:
                    continue
                v_after = nxt.y - cur.y
                dv = nxt.y - 2.0 * cur.y + recs[i - 1].y
            if terminal_velocity is not None and abs(v_after) >= terminal_velocity:
                continue
            yield cur.action, dv


def estimate_gravity(
    logs: Sequence[TrajectoryLog], terminal_velocity: float | None = None
) -> float:
    """Least-squares gravity from the velocity changes of Noop ticks.

    Fitting a constant to the second differences by least squares reduces to
    their mean.
    """
    d = [dv for a, dv in _transitions(logs, terminal_velocity) if a == Action.NOOP]
    if len(d) < 1:
        raise InsufficientObservationsError(
            "insufficient observations: no unclamped Noop transitions to fit gravity"
        )
    return math.fsum(d) / len(d)


def fit_action_gaussians(
    logs: Sequence[TrajectoryLog], g_hat: float, terminal_velocity: float | None = None
) -> EstimatedDynamics:
    residuals: dict[Action, list[float]] = {a: [] for a in Action}
    for a, dv in _transitions(logs, terminal_velocity):
        residuals[Action(a)].append(dv - g_hat)
    impacts = {}
    for a, r in residuals.items():
        if len(r) < 2:
            raise InsufficientObservationsError(
                f"insufficient observations for action {a.name}: {len(r)} < 2"
            )
        arr = np.asarray(r)
        impacts[a] = Impact(mu=float(arr.mean()), sigma=float(arr.std(ddof=1)))
    return EstimatedDynamics(g_hat=g_hat, impacts=impacts)


def estimate_dynamics(
    logs: Sequence[TrajectoryLog], terminal_velocity: float | None = None
) -> EstimatedDynamics:
    g = estimate_gravity(logs, terminal_velocity)
    return fit_action_gaussians(logs, g, terminal_velocity)


def sample_impact(dyn: EstimatedDynamics, a: Action, rng: np.random.Generator) -> float:
    imp = dyn.impacts[Action(a)]
    if imp.sigma == 0:
        return imp.mu
    return float(rng.normal(imp.mu, imp.sigma))
