"""Environment-aware active learning with IRL-trained query arbitration."""

import os

# The engine's linear algebra is thousands of tiny factorizations per
# episode; BLAS thread fan-out only adds sync overhead there and makes
# reductions order-dependent. Must be set before the first numpy import.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from .domain import (
    Action,
    ActionKind,
    Concept,
    DEFAULT_COSTS,
    EpisodeConfig,
    Instance,
    LearningState,
    Scene,
    apply_answer,
    candidate_actions,
    initial_state,
)
from .envsim import TaskDataset, generate_synthetic_task, load_task, save_task
from .episode import (
    LearningCurve,
    Trajectory,
    compare_strategies,
    evaluate_accuracy,
    run_condition,
    run_episode,
)
from .features import DecisionFeatureVector, FEATURE_NAMES, WeightVector, feature_vector
from .gpc import ClassifierEnsemble, GPClassifier, LinearProbClassifier, fit_ensemble
from .irl import DemonstrationSet, IrlConfig, synthetic_expert, train_weights
from .strategies import STRATEGY_IDS, Strategy, build_strategy, make_policy

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ActionKind",
    "ClassifierEnsemble",
    "Concept",
    "DEFAULT_COSTS",
    "DecisionFeatureVector",
    "DemonstrationSet",
    "EpisodeConfig",
    "FEATURE_NAMES",
    "GPClassifier",
    "Instance",
    "IrlConfig",
    "LearningCurve",
    "LearningState",
    "LinearProbClassifier",
    "STRATEGY_IDS",
    "Scene",
    "Strategy",
    "TaskDataset",
    "Trajectory",
    "WeightVector",
    "apply_answer",
    "build_strategy",
    "candidate_actions",
    "compare_strategies",
    "evaluate_accuracy",
    "feature_vector",
    "fit_ensemble",
    "generate_synthetic_task",
    "initial_state",
    "load_task",
    "make_policy",
    "run_condition",
    "run_episode",
    "save_task",
    "synthetic_expert",
    "train_weights",
]
