"""Two-lane overtaking benchmark: kinematic simulator, dueling double-Q
agents with a hand-rolled numpy backprop, advisor fusion with reward
shaping, and a seeded experiment harness."""

from .sim import (Action, ACTION_NAMES, ConfigError, OBS_DIM, SceneState,
                  SimConfig, StepResult, observe, reset, step)
from .agents import Agent, AgentConfig, ReplayBuffer, Transition, TrainingDiverged
from .fusion import (AdvisorRecommendation, FusionConfig, FusionEngine,
                     rule_recommendation, scene_to_text)
from .harness import (ExperimentConfig, RunFailure, SCHEMES, apply_scheme,
                      compare_schemes, config_from_dict, config_to_dict,
                      eval_agent, load_config, sweep_hv_counts, train_run)

__version__ = "0.1.0"

__all__ = [
    "Action", "ACTION_NAMES", "ConfigError", "OBS_DIM", "SceneState",
    "SimConfig", "StepResult", "observe", "reset", "step",
    "Agent", "AgentConfig", "ReplayBuffer", "Transition", "TrainingDiverged",
    "AdvisorRecommendation", "FusionConfig", "FusionEngine",
    "rule_recommendation", "scene_to_text",
    "ExperimentConfig", "RunFailure", "SCHEMES", "apply_scheme",
    "compare_schemes", "config_from_dict", "config_to_dict", "eval_agent",
    "load_config", "sweep_hv_counts", "train_run",
    "__version__",
]
