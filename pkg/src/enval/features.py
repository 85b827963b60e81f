"""The seven decision features over a learning state, each in [0, 1].

Task-centric: average classifier discriminability (acd), class
distribution uniformity (cdu), instance variation (iv), label prediction
margin (pm). Environment-centric: query budget consumption (qbc),
remaining time usage (rtu), non-query time passed (nqt).

Degenerate inputs (empty scene, empty sample) evaluate to 0 for every
feature except rtu, so untrained states are minimally attractive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import (
    ActionKind,
    Concept,
    HistoryEntry,
    LearningState,
    TrainingExample,
    positives_per_concept,
)
from .errors import ConfigError, ContractViolation

FEATURE_NAMES = ("acd", "cdu", "iv", "pm", "qbc", "rtu", "nqt")

# Feature subsets per strategy family.
SUBSET_IROS = ("acd", "cdu")
SUBSET_TASK = ("acd", "cdu", "iv", "pm")
SUBSET_TASK_ENV = FEATURE_NAMES


@dataclass(frozen=True)
class DecisionFeatureVector:
    acd: float
    cdu: float
    iv: float
    pm: float
    qbc: float
    rtu: float
    nqt: float

    def as_array(self, names: tuple[str, ...] = FEATURE_NAMES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)

    @classmethod
    def from_array(cls, values) -> "DecisionFeatureVector":
        values = [float(v) for v in values]
        if len(values) != len(FEATURE_NAMES):
            raise ContractViolation(f"expected {len(FEATURE_NAMES)} components")
        return cls(*values)


@dataclass(frozen=True)
class WeightVector:
    """Named weights for U(s) = sum_i w_i * phi_i(s)."""

    weights: tuple[tuple[str, float], ...]

    def __post_init__(self):
        vals = np.array([w for _, w in self.weights], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ConfigError("weights must be finite")
        if np.sum(np.abs(vals)) <= 0:
            raise ConfigError("weight vector must have positive L1 norm")
        unknown = [n for n, _ in self.weights if n not in FEATURE_NAMES]
        if unknown:
            raise ConfigError(f"unknown feature names: {unknown}")

    @classmethod
    def uniform(cls, names: tuple[str, ...]) -> "WeightVector":
        return cls(tuple((n, 1.0 / len(names)) for n in names))

    @classmethod
    def from_mapping(cls, mapping: dict[str, float]) -> "WeightVector":
        return cls(tuple((n, float(mapping[n])) for n in FEATURE_NAMES if n in mapping))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.weights)

    @property
    def values(self) -> np.ndarray:
        return np.array([w for _, w in self.weights], dtype=float)

    def utility(self, phi: DecisionFeatureVector) -> float:
        return float(self.values @ phi.as_array(self.names))


def classifier_discriminability(posteriors: np.ndarray) -> float:
    """Mean over concepts of the posterior range across scene instances."""
    if posteriors is None or posteriors.size == 0:
        return 0.0
    ranges = posteriors.max(axis=0) - posteriors.min(axis=0)
    return float(np.mean(ranges))


def class_distribution_uniformity(
    sample: tuple[TrainingExample, ...], concepts: tuple[Concept, ...]
) -> float:
    """Ratio of the least- to most-represented class's positive count."""
    counts = positives_per_concept(sample, concepts)
    if not counts or max(counts.values()) == 0:
        return 0.0
    return min(counts.values()) / max(counts.values())


def class_likelihoods(posteriors: np.ndarray) -> np.ndarray:
    """p(x|y): each posterior column normalized over the scene.

    Reads p(x|y) as the probability of instance x being selected as an
    example of class y; a zero column stays zero.
    """
    sums = posteriors.sum(axis=0, keepdims=True)
    safe = np.where(sums <= 0, 1.0, sums)
    return np.where(sums <= 0, 0.0, posteriors / safe)


def instance_variation(likelihoods: np.ndarray) -> float:
    """Mean relative standard deviation of p(X|y), clamped to [0, 1].

    Population standard deviation; a concept column with zero mean
    contributes 0.
    """
    if likelihoods is None or likelihoods.size == 0:
        return 0.0
    means = likelihoods.mean(axis=0)
    stds = likelihoods.std(axis=0)
    rsd = np.where(means <= 0, 0.0, stds / np.where(means <= 0, 1.0, means))
    return float(np.clip(np.mean(rsd), 0.0, 1.0))


def prediction_margin(posteriors: np.ndarray) -> float:
    """Mean gap between the top-two concept posteriors per instance."""
    if posteriors.shape[1] < 2:
        raise ContractViolation("prediction margin needs at least two concepts")
    if posteriors.shape[0] == 0:
        return 0.0
    part = np.partition(posteriors, posteriors.shape[1] - 2, axis=1)
    margins = part[:, -1] - part[:, -2]
    return float(np.mean(margins))


def budget_consumption(state: LearningState) -> float:
    if state.budget_total <= 0:
        raise ConfigError("budget consumption undefined for zero budget")
    return state.budget_spent / state.budget_total


def remaining_time_usage(state: LearningState) -> float:
    return (state.time_total - state.turn) / state.time_total


def trailing_no_query_turns(history: tuple[HistoryEntry, ...], window_size: int) -> int:
    count = 0
    for entry in reversed(history):
        if entry.action.kind is not ActionKind.NO_QUERY:
            break
        count += 1
        if count >= window_size:
            break
    return count


def non_query_time_passed(history: tuple[HistoryEntry, ...], window_size: int) -> float:
    """Fraction of the sliding window spent in consecutive trailing NQ turns."""
    if window_size < 1:
        raise ConfigError("window size must be >= 1")
    return trailing_no_query_turns(history, window_size) / window_size


def feature_vector(
    state: LearningState,
    posteriors: np.ndarray,
    concepts: tuple[Concept, ...],
    window_size: int,
    likelihoods: np.ndarray | None = None,
) -> DecisionFeatureVector:
    """Assemble all seven decision features for one state."""
    if likelihoods is None:
        likelihoods = class_likelihoods(posteriors)
    return DecisionFeatureVector(
        acd=classifier_discriminability(posteriors),
        cdu=class_distribution_uniformity(state.training_sample, concepts),
        iv=instance_variation(likelihoods),
        pm=prediction_margin(posteriors),
        qbc=budget_consumption(state),
        rtu=remaining_time_usage(state),
        nqt=non_query_time_passed(state.history, window_size),
    )
