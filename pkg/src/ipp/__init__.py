"""Rollout planning with a learned Dirichlet prior on a Flappy-Bird-like physics game."""

from .dynamics import (
    EstimatedDynamics,
    Impact,
    InsufficientObservationsError,
    estimate_dynamics,
    estimate_gravity,
    fit_action_gaussians,
    sample_impact,
)
from .physics_env import (
    Action,
    EnvConfig,
    Obstacle,
    TrajectoryLog,
    WorldState,
    collided,
    preprocess,
    render,
    reset,
    run_episode,
    step,
)
from .planner import (
    PlannerConfig,
    SampleStore,
    dirichlet_sample,
    estimate_conditional,
    get_action,
    sample_actions,
    simulate,
    uniform_prior,
    update_alpha,
)
from .prior_model import CnnParams, TrainConfig, build_dataset, forward, load_params, save_params, sgd_fit

__version__ = "0.1.0"
