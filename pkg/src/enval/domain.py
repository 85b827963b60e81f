"""Core vocabulary: instances, scenes, concepts, actions, learning state.

All types are immutable values; state transitions return new states.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractViolation, InputError


class ActionKind(str, Enum):
    DEMO_QUERY = "dq"
    LABEL_QUERY = "lq"
    FEATURE_SUBSET_QUERY = "fsq"
    NO_QUERY = "nq"


# A-priori action costs, in abstract cost units.
DEFAULT_COSTS: dict[ActionKind, int] = {
    ActionKind.DEMO_QUERY: 2,
    ActionKind.FEATURE_SUBSET_QUERY: 2,
    ActionKind.LABEL_QUERY: 1,
    ActionKind.NO_QUERY: 0,
}

POSITIVE = 1
NEGATIVE = -1


@dataclass(frozen=True)
class Instance:
    """One observed object: a feature vector plus hidden ground truth.

    ``true_labels`` is visible only to the oracle and the evaluator,
    never to the learner's strategy.
    """

    id: str
    features: tuple[float, ...]
    true_labels: frozenset[str] = frozenset()

    def __post_init__(self):
        if not all(np.isfinite(self.features)):
            raise InputError(f"instance {self.id} has non-finite features")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=float)


@dataclass(frozen=True)
class Concept:
    """A task symbol to be grounded, e.g. "fruit".

    ``relevant_features`` is the ground-truth answer payload for feature
    subset queries; ``priority`` resolves multi-label instances to a
    single label answer (lower value wins).
    """

    id: str
    relevant_features: frozenset[int] | None = None
    priority: int = 0


@dataclass(frozen=True)
class Scene:
    """The set of instances in the agent's purview at one turn."""

    turn: int
    instances: tuple[Instance, ...]

    def __post_init__(self):
        if self.turn < 1:
            raise ContractViolation("scene turn must be >= 1")
        if not self.instances:
            raise ContractViolation("scene must contain at least one instance")
        ids = [inst.id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise ContractViolation("instance ids must be unique within a scene")

    def by_id(self, instance_id: str) -> Instance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise ContractViolation(f"instance {instance_id!r} not in scene")


@dataclass(frozen=True)
class Action:
    """A communicative action: DQ(concept), LQ(instance), FSQ, or NQ."""

    kind: ActionKind
    concept_id: str | None = None
    instance_id: str | None = None
    cost: int = 0

    def __post_init__(self):
        if self.cost < 0:
            raise ContractViolation("action cost must be non-negative")
        if self.kind is ActionKind.DEMO_QUERY and self.concept_id is None:
            raise ContractViolation("demo query needs a concept id")
        if self.kind is ActionKind.LABEL_QUERY and self.instance_id is None:
            raise ContractViolation("label query needs an instance id")

    @property
    def is_query(self) -> bool:
        return self.kind is not ActionKind.NO_QUERY

    @property
    def arg(self) -> str | None:
        """The action's single argument, for logs."""
        return self.concept_id if self.kind is ActionKind.DEMO_QUERY else self.instance_id

    def describe(self) -> str:
        if self.kind is ActionKind.DEMO_QUERY:
            return f"dq({self.concept_id})"
        if self.kind is ActionKind.LABEL_QUERY:
            return f"lq({self.instance_id})"
        return self.kind.value


def no_query() -> Action:
    return Action(ActionKind.NO_QUERY, cost=0)


@dataclass(frozen=True)
class TrainingExample:
    """One (features, concept, polarity) triple in the training sample."""

    features: tuple[float, ...]
    concept_id: str
    polarity: int  # POSITIVE or NEGATIVE


@dataclass(frozen=True)
class HistoryEntry:
    turn: int
    action: Action
    summary: str


@dataclass(frozen=True)
class EpisodeConfig:
    """Environmental conditions for one learning episode.

    ``window_size`` is the sliding window for the non-query-time feature;
    it defaults to the scene change period (window proportional to the
    rate of environmental change).
    """

    budget: int
    time_allocation: int
    scene_change_period: int = 10
    window_size: int | None = None
    strategy_id: str = "dt-task-env"
    costs: tuple[tuple[ActionKind, int], ...] = tuple(sorted(DEFAULT_COSTS.items(), key=lambda kv: kv[0].value))
    seed: int = 0
    scene_size: int = 8

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if self.budget == 0:
            # Degenerate but allowed: the episode is all no-query turns.
            pass
        for name in ("time_allocation", "scene_change_period", "scene_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.window_size is None:
            object.__setattr__(self, "window_size", self.scene_change_period)
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")

    @property
    def cost_map(self) -> dict[ActionKind, int]:
        return dict(self.costs)

    def cost_of(self, kind: ActionKind) -> int:
        return self.cost_map[kind]


@dataclass(frozen=True, eq=False)
class LearningState:
    """The learner's situation: sample, posteriors, history, accounting.

    Immutable; every transition produces a new state. ``posteriors`` is
    the cached p(y|x) matrix over the current scene (instances x concepts)
    and is invalidated (None) whenever the sample or feature subset
    changes.
    """

    budget_total: int
    time_total: int
    budget_spent: int = 0
    turn: int = 0
    training_sample: tuple[TrainingExample, ...] = ()
    history: tuple[HistoryEntry, ...] = ()
    fsq_answered: bool = False
    active_feature_subset: tuple[int, ...] | None = None
    posteriors: np.ndarray | None = None

    def __post_init__(self):
        if self.budget_spent > self.budget_total:
            raise ContractViolation("budget overspent")
        if self.turn > self.time_total:
            raise ContractViolation("turn past allocated time")

    @property
    def budget_remaining(self) -> int:
        return self.budget_total - self.budget_spent

    def with_posteriors(self, posteriors: np.ndarray) -> "LearningState":
        return replace(self, posteriors=posteriors)


def initial_state(config: EpisodeConfig) -> LearningState:
    return LearningState(budget_total=config.budget, time_total=config.time_allocation)


def candidate_actions(
    state: LearningState,
    scene: Scene,
    concepts: tuple[Concept, ...],
    costs: dict[ActionKind, int] | None = None,
) -> list[Action]:
    """Enumerate the legal actions at this turn.

    Emission order doubles as the tie-break order used by arbitration:
    NQ first, then FSQ, label queries by instance id, demo queries by
    concept id. Actions whose cost exceeds the remaining budget are
    excluded, which degenerates to [NQ] once the budget is spent.

    Answered questions leave the set: FSQ once its (unchanging) answer
    is in, and the label query for an observation already labeled — the
    teacher is deterministic, so a second answer would be identical.
    A scene refresh yields new noisy observations, which are askable
    again.
    """
    costs = dict(DEFAULT_COSTS) if costs is None else costs
    remaining = state.budget_remaining
    actions = [no_query()]
    fsq_cost = costs[ActionKind.FEATURE_SUBSET_QUERY]
    if not state.fsq_answered and fsq_cost <= remaining:
        actions.append(Action(ActionKind.FEATURE_SUBSET_QUERY, cost=fsq_cost))
    lq_cost = costs[ActionKind.LABEL_QUERY]
    if lq_cost <= remaining:
        labeled = {ex.features for ex in state.training_sample if ex.polarity == POSITIVE}
        for inst in sorted(scene.instances, key=lambda i: i.id):
            if inst.features in labeled:
                continue
            actions.append(Action(ActionKind.LABEL_QUERY, instance_id=inst.id, cost=lq_cost))
    dq_cost = costs[ActionKind.DEMO_QUERY]
    if dq_cost <= remaining:
        for concept in sorted(concepts, key=lambda c: c.id):
            actions.append(Action(ActionKind.DEMO_QUERY, concept_id=concept.id, cost=dq_cost))
    return actions


def one_vs_rest(
    features: tuple[float, ...], positive_concept: str, concepts: tuple[Concept, ...]
) -> tuple[TrainingExample, ...]:
    """Expand a single label into one positive and |Y|-1 negatives."""
    out = [TrainingExample(features, positive_concept, POSITIVE)]
    for concept in concepts:
        if concept.id != positive_concept:
            out.append(TrainingExample(features, concept.id, NEGATIVE))
    return tuple(out)


def _extend_sample(
    sample: tuple[TrainingExample, ...], added: tuple[TrainingExample, ...]
) -> tuple[TrainingExample, ...]:
    # The teacher is deterministic, so a repeated answer about the same
    # observation carries no new information; duplicate triples are not
    # appended (double-counting them would let the classifiers sharpen
    # on re-asked questions).
    seen = set(sample)
    fresh = tuple(ex for ex in added if ex not in seen)
    return sample + fresh


def apply_answer(
    state: LearningState,
    scene: Scene,
    action: Action,
    answer: "OracleAnswer",
    concepts: tuple[Concept, ...],
) -> LearningState:
    """Advance the state by one turn given an action and its answer.

    Pure: equal inputs yield equal outputs. Raises ContractViolation when
    the answer kind does not match the action kind or the action would
    overspend the budget.
    """
    if answer.kind is not action.kind:
        raise ContractViolation(f"answer kind {answer.kind} does not match action {action.kind}")
    if state.budget_spent + action.cost > state.budget_total:
        raise ContractViolation("action would exceed the query budget")
    new_turn = state.turn + 1

    if action.kind is ActionKind.NO_QUERY:
        entry = HistoryEntry(new_turn, action, "no query")
        return replace(state, turn=new_turn, history=state.history + (entry,))

    if action.kind is ActionKind.LABEL_QUERY:
        inst = scene.by_id(action.instance_id)
        added = one_vs_rest(inst.features, answer.concept_id, concepts)
        entry = HistoryEntry(new_turn, action, f"{action.instance_id} labeled {answer.concept_id}")
        return replace(
            state,
            turn=new_turn,
            budget_spent=state.budget_spent + action.cost,
            training_sample=_extend_sample(state.training_sample, added),
            history=state.history + (entry,),
            posteriors=None,
        )

    if action.kind is ActionKind.DEMO_QUERY:
        added = one_vs_rest(answer.instance.features, answer.concept_id, concepts)
        entry = HistoryEntry(new_turn, action, f"demo {answer.instance.id} for {answer.concept_id}")
        return replace(
            state,
            turn=new_turn,
            budget_spent=state.budget_spent + action.cost,
            training_sample=_extend_sample(state.training_sample, added),
            history=state.history + (entry,),
            posteriors=None,
        )

    # FSQ: install the subset and mark every classifier stale.
    subset = tuple(sorted(answer.feature_subset))
    entry = HistoryEntry(new_turn, action, f"relevant features {list(subset)}")
    return replace(
        state,
        turn=new_turn,
        budget_spent=state.budget_spent + action.cost,
        fsq_answered=True,
        active_feature_subset=subset,
        history=state.history + (entry,),
        posteriors=None,
    )


# --- Oracle answers -------------------------------------------------------
# Defined here (not in the simulator) because state transitions consume
# them; the simulator and the HTTP service both produce them.


@dataclass(frozen=True)
class OracleAnswer:
    kind: ActionKind


@dataclass(frozen=True)
class LabelAnswer(OracleAnswer):
    concept_id: str = ""

    def __init__(self, concept_id: str):
        object.__setattr__(self, "kind", ActionKind.LABEL_QUERY)
        object.__setattr__(self, "concept_id", concept_id)


@dataclass(frozen=True)
class DemoAnswer(OracleAnswer):
    instance: Instance = None  # type: ignore[assignment]
    concept_id: str = ""

    def __init__(self, instance: Instance, concept_id: str):
        object.__setattr__(self, "kind", ActionKind.DEMO_QUERY)
        object.__setattr__(self, "instance", instance)
        object.__setattr__(self, "concept_id", concept_id)


@dataclass(frozen=True)
class FeatureSubsetAnswer(OracleAnswer):
    feature_subset: tuple[int, ...] = ()

    def __init__(self, feature_subset):
        object.__setattr__(self, "kind", ActionKind.FEATURE_SUBSET_QUERY)
        object.__setattr__(self, "feature_subset", tuple(sorted(int(i) for i in feature_subset)))


@dataclass(frozen=True)
class NoAnswer(OracleAnswer):
    def __init__(self):
        object.__setattr__(self, "kind", ActionKind.NO_QUERY)


def positives_per_concept(
    sample: tuple[TrainingExample, ...], concepts: tuple[Concept, ...]
) -> dict[str, int]:
    counts = {c.id: 0 for c in concepts}
    for ex in sample:
        if ex.polarity == POSITIVE and ex.concept_id in counts:
            counts[ex.concept_id] += 1
    return counts
