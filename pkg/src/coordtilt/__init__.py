"""Coordinated multi-agent Q-learning for antenna tilt optimization."""

from .baselines import CoordinatedSweep, DQNBaseline, RandomPolicy, SweepBaseline, random_policy_baseline
from .config import ExperimentConfig
from .graph import CoordinationGraph, build_graph, coupling_matrix
from .learner import CoordinatedQLearner, Normalizer, calibrate, evaluate
from .maxplus import brute_force_argmax, select_actions
from .netsim import Deployment, TiltEnv, compute_snapshot, drop_users, facing_pair_deployment, generate_deployment

__version__ = "0.1.0"

__all__ = [
    "CoordinatedQLearner",
    "CoordinatedSweep",
    "CoordinationGraph",
    "DQNBaseline",
    "Deployment",
    "ExperimentConfig",
    "Normalizer",
    "RandomPolicy",
    "SweepBaseline",
    "TiltEnv",
    "brute_force_argmax",
    "build_graph",
    "calibrate",
    "compute_snapshot",
    "coupling_matrix",
    "drop_users",
    "evaluate",
    "facing_pair_deployment",
    "generate_deployment",
    "random_policy_baseline",
    "select_actions",
]
