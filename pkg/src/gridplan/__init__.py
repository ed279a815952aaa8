"""Differentiable planning on procedurally generated grid worlds.

Three planner variants (a convolutional value-iteration network and two
sigmoid-gated value-propagation recurrences), a minimal tape-based autodiff
core, an off-policy actor-critic trainer, exact search oracles for
verification, and a small CLI harness.
"""

from .harness import (CheckpointError, EvalReport, RunConfig, evaluate,
                      load_checkpoint, run_gradcheck_suite, save_checkpoint)
from .planners import (VARIANTS, PlannerConfig, PlannerParams, choose_depth,
                       greedy_action, plan, value_map)
from .trainer import Hyperparams, ReplayBuffer, Transition, train
from .world import (KINDS, GridWorld, generate, load_map, observe, save_map, step)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "EvalReport", "RunConfig", "evaluate", "load_checkpoint",
    "run_gradcheck_suite", "save_checkpoint", "VARIANTS", "PlannerConfig",
    "PlannerParams", "choose_depth", "greedy_action", "plan", "value_map",
    "Hyperparams", "ReplayBuffer", "Transition", "train", "KINDS", "GridWorld",
    "generate", "load_map", "observe", "save_map", "step", "__version__",
]
