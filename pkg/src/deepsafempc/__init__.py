"""Safe multi-agent RL toolkit: MAPPO, learned dynamics, SQP safety filter."""

from .env import EnvConfig, StepOutcome
from .harness import RunConfig, default_config, load_config, run_comparison, run_training
from .mappo import ActorPolicy, CentralCritic, MAPPOTrainer, PPOHyper, RolloutBatch
from .mpc import Bounds, MPCOptions, SQPDiagnostics, safety_filter, sqp_solve
from .neural_core import AdamState, GradientSet, MLPNet, adam_step, init_mlp, mlp_backward, mlp_forward
from .predictor import DynamicsModel, ErrorMonitor, PredictorHyper, TransitionDataset, predict, train_predictor
from .qp import QPProblem, QPSolution, solve_box_qp, solve_eq_qp

__all__ = [
    "EnvConfig",
    "StepOutcome",
    "RunConfig",
    "default_config",
    "load_config",
    "run_comparison",
    "run_training",
    "ActorPolicy",
    "CentralCritic",
    "MAPPOTrainer",
    "PPOHyper",
    "RolloutBatch",
    "Bounds",
    "MPCOptions",
    "SQPDiagnostics",
    "safety_filter",
    "sqp_solve",
    "AdamState",
    "GradientSet",
    "MLPNet",
    "adam_step",
    "init_mlp",
    "mlp_backward",
    "mlp_forward",
    "DynamicsModel",
    "ErrorMonitor",
    "PredictorHyper",
    "TransitionDataset",
    "predict",
    "train_predictor",
    "QPProblem",
    "QPSolution",
    "solve_box_qp",
    "solve_eq_qp",
]

__version__ = "0.1.0"
