"""Capability-balanced GRPO training kernel on exactly-differentiable toy environments."""

from capbal.envpolicy import (
    Capability,
    Difficulty,
    EnvSpec,
    Environment,
    PolicyParams,
    TaskContext,
    action_distribution,
    build_environment,
    exact_capability_objective,
    init_policy,
    logprob_gradient,
)
from capbal.reward import RewardWeights, SubScores, composite

__all__ = [
    "Capability",
    "Difficulty",
    "EnvSpec",
    "Environment",
    "PolicyParams",
    "RewardWeights",
    "SubScores",
    "TaskContext",
    "action_distribution",
    "build_environment",
    "composite",
    "exact_capability_objective",
    "init_policy",
    "logprob_gradient",
]

__version__ = "0.1.0"
