"""Run learning episodes end to end and replicate the condition grid.

The engine enforces budget and time accounting, records one trajectory
step per turn (NQ fills non-query turns), evaluates hold-out accuracy
after every model change, and emits deterministic line-delimited logs.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import mannwhitneyu

from . import seeding
from .domain import (
    Action,
    ActionKind,
    EpisodeConfig,
    LearningState,
    NoAnswer,
    OracleAnswer,
    Scene,
    apply_answer,
    initial_state,
)
from .envsim import SceneStream, SimulatedTeacher, TaskDataset
from .errors import ConfigError, ContractViolation, InsufficientData
from .features import DecisionFeatureVector, WeightVector, feature_vector
from .gpc import fit_ensemble, make_classifier_factory
from .strategies import ArbitrationContext, make_policy


@dataclass(frozen=True)
class TrajectoryStep:
    turn: int
    phi: DecisionFeatureVector
    action: Action
    cost: int
    cum_cost: int
    accuracy: float


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[TrajectoryStep, ...]
    config: EpisodeConfig
    strategy_id: str
    final_accuracy: float

    def feature_counts(self) -> np.ndarray:
        if not self.steps:
            return np.zeros(7)
        return np.sum([s.phi.as_array() for s in self.steps], axis=0)

    def query_count(self) -> int:
        return sum(1 for s in self.steps if s.action.is_query)

    def total_cost(self) -> int:
        return self.steps[-1].cum_cost if self.steps else 0


@dataclass(frozen=True)
class LearningCurve:
    points: tuple[tuple[int, float, float], ...]  # (turn, mean accuracy, std error)
    runs: int
    final_accuracies: tuple[float, ...]

    def __post_init__(self):
        turns = [t for t, _, _ in self.points]
        if turns != sorted(set(turns)):
            raise ContractViolation("curve turns must be strictly increasing")
        if self.runs < 1:
            raise ContractViolation("a curve needs at least one run")


def evaluate_accuracy(ensemble, test_instances, dataset: TaskDataset) -> float:
    """Fraction of test instances whose argmax-posterior concept is correct.

    Argmax ties resolve to the earliest concept in declaration order.
    """
    if not test_instances:
        raise ContractViolation("empty test set")
    posteriors = ensemble.posterior_matrix(list(test_instances))
    predicted = np.argmax(posteriors, axis=1)
    concept_ids = [c.id for c in ensemble.concepts]
    hits = sum(
        1
        for inst, p in zip(test_instances, predicted)
        if concept_ids[p] == dataset.priority_label(inst)
    )
    return hits / len(test_instances)


class EpisodeEngine:
    """Stateful stepper for one episode; used by the runner and the service.

    Each turn: observe the scene, refresh posteriors if the model or the
    scene changed, pick an action (policy or caller), obtain an answer
    (oracle or caller), apply it, and record the step.
    """

    def __init__(
        self,
        dataset: TaskDataset,
        config: EpisodeConfig,
        policy=None,
        classifier_factory=None,
        oracle=None,
        policy_rng=None,
    ):
        self.dataset = dataset
        self.config = config
        self.policy = policy
        # None selects the task-calibrated GP (see gpc.make_task_gp_factory).
        self.factory = (
            classifier_factory
            if classifier_factory is not None
            else make_classifier_factory("gp", dataset)
        )
        self.stream = SceneStream(dataset, config)
        self.oracle = oracle if oracle is not None else SimulatedTeacher(dataset, config)
        self.policy_rng = (
            policy_rng if policy_rng is not None else seeding.derive(config.seed, seeding.POLICY)
        )
        relevant = dataset.relevant_union()
        self.ctx = ArbitrationContext(
            concepts=dataset.concepts,
            window_size=config.window_size,
            costs=config.cost_map,
            classifier_factory=self.factory,
            fsq_proxy_size=len(relevant) if relevant else max(1, dataset.feature_dim // 4),
        )
        self.state: LearningState = initial_state(config)
        self.ensemble = fit_ensemble(dataset.concepts, (), None, self.factory)
        self._test_instances = dataset.holdout_instances()
        self._accuracy = evaluate_accuracy(self.ensemble, self._test_instances, dataset)
        self._posterior_scene: Scene | None = None
        self.steps: list[TrajectoryStep] = []

    @property
    def finished(self) -> bool:
        return self.state.turn >= self.config.time_allocation

    @property
    def next_turn(self) -> int:
        return self.state.turn + 1

    def observe(self) -> Scene:
        """Current scene with posteriors freshly installed on the state."""
        if self.finished:
            raise ContractViolation("episode already concluded")
        scene = self.stream.scene_for_turn(self.next_turn)
        if self.state.posteriors is None or scene is not self._posterior_scene:
            self.state = self.state.with_posteriors(self.ensemble.posterior_matrix(scene))
            self._posterior_scene = scene
        return scene

    def phi(self, scene: Scene) -> DecisionFeatureVector:
        return feature_vector(
            self.state, self.state.posteriors, self.dataset.concepts, self.config.window_size
        )

    def select_action(self, scene: Scene) -> Action:
        if self.policy is None:
            raise ContractViolation("engine has no policy; supply actions explicitly")
        return self.policy.select_action(self.state, scene, self.ensemble, self.ctx, self.policy_rng)

    def answer_for(self, scene: Scene, action: Action) -> OracleAnswer:
        if not action.is_query:
            return NoAnswer()
        return self.oracle.answer(scene, action, self.next_turn)

    def apply(self, scene: Scene, action: Action, answer: OracleAnswer) -> TrajectoryStep:
        phi = self.phi(scene)
        prev_sample = self.state.training_sample
        prev_subset = self.state.active_feature_subset
        self.state = apply_answer(self.state, scene, action, answer, self.dataset.concepts)
        if (
            self.state.training_sample is not prev_sample
            or self.state.active_feature_subset != prev_subset
        ):
            self.ensemble = fit_ensemble(
                self.dataset.concepts,
                self.state.training_sample,
                self.state.active_feature_subset,
                self.factory,
            )
            self._posterior_scene = None
            self._accuracy = evaluate_accuracy(self.ensemble, self._test_instances, self.dataset)
        step = TrajectoryStep(
            turn=self.state.turn,
            phi=phi,
            action=action,
            cost=action.cost,
            cum_cost=self.state.budget_spent,
            accuracy=self._accuracy,
        )
        self.steps.append(step)
        return step

    def step(self, action: Action | None = None) -> TrajectoryStep:
        scene = self.observe()
        if action is None:
            action = self.select_action(scene)
        answer = self.answer_for(scene, action)
        return self.apply(scene, action, answer)

    def trajectory(self) -> Trajectory:
        strategy_id = getattr(self.policy, "strategy_id", "external")
        return Trajectory(
            steps=tuple(self.steps),
            config=self.config,
            strategy_id=strategy_id,
            final_accuracy=self.steps[-1].accuracy if self.steps else self._accuracy,
        )

    def curve_points(self) -> list[tuple[int, float]]:
        return [(s.turn, s.accuracy) for s in self.steps]


def run_episode(
    dataset: TaskDataset,
    config: EpisodeConfig,
    policy,
    oracle=None,
    classifier_factory=None,
    policy_rng=None,
) -> tuple[Trajectory, list[tuple[int, float]]]:
    """Run one full episode; returns the trajectory and per-turn accuracy."""
    engine = EpisodeEngine(
        dataset,
        config,
        policy=policy,
        classifier_factory=classifier_factory,
        oracle=oracle,
        policy_rng=policy_rng,
    )
    while not engine.finished:
        engine.step()
    return engine.trajectory(), engine.curve_points()


# --- Condition grid -------------------------------------------------------


def _episode_task(args):
    (dataset, config, strategy_id, weights, factory_name) = args
    policy = make_policy(strategy_id, weights)
    factory = make_classifier_factory(factory_name, dataset)
    trajectory, points = run_episode(dataset, config, policy, classifier_factory=factory)
    return trajectory, points


def run_condition(
    dataset: TaskDataset,
    strategy_ids: list[str],
    condition: dict,
    seeds: list[int],
    weights_map: dict[str, WeightVector] | None = None,
    classifier: str = "gp",
    scene_change_period: int = 10,
    scene_size: int = 8,
    n_jobs: int = 1,
) -> tuple[dict[str, LearningCurve], dict[str, list[Trajectory]]]:
    """Learning curves per strategy, averaged over seeds with std error."""
    if not seeds:
        raise ConfigError("at least one seed is required")
    weights_map = weights_map or {}
    jobs = []
    for strategy_id in strategy_ids:
        for seed in seeds:
            config = EpisodeConfig(
                budget=condition["budget"],
                time_allocation=condition["time"],
                scene_change_period=scene_change_period,
                strategy_id=strategy_id,
                seed=seed,
                scene_size=scene_size,
            )
            jobs.append((dataset, config, strategy_id, weights_map.get(strategy_id), classifier))

    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_episode_task, jobs))
    else:
        results = [_episode_task(j) for j in jobs]

    curves: dict[str, LearningCurve] = {}
    trajectories: dict[str, list[Trajectory]] = {}
    idx = 0
    for strategy_id in strategy_ids:
        runs = results[idx : idx + len(seeds)]
        idx += len(seeds)
        trajectories[strategy_id] = [traj for traj, _ in runs]
        acc = np.array([[a for _, a in points] for _, points in runs])
        turns = [t for t, _ in runs[0][1]]
        means = acc.mean(axis=0)
        if len(seeds) > 1:
            stderr = acc.std(axis=0, ddof=1) / np.sqrt(len(seeds))
        else:
            stderr = np.zeros(len(turns))
        curves[strategy_id] = LearningCurve(
            points=tuple(
                (int(t), float(m), float(s)) for t, m, s in zip(turns, means, stderr)
            ),
            runs=len(seeds),
            final_accuracies=tuple(float(a) for a in acc[:, -1]),
        )
    return curves, trajectories


def compare_strategies(curves_a: LearningCurve, curves_b: LearningCurve) -> dict:
    """One-tailed Mann-Whitney U test that A beats B on final accuracies."""
    a, b = curves_a.final_accuracies, curves_b.final_accuracies
    if len(a) < 3 or len(b) < 3:
        raise InsufficientData("need final accuracies from at least 3 runs per side")
    result = mannwhitneyu(a, b, alternative="greater")
    return {"u_statistic": float(result.statistic), "p_value": float(result.pvalue)}


# --- Serialization --------------------------------------------------------


def config_to_dict(config: EpisodeConfig) -> dict:
    return {
        "budget": config.budget,
        "time_allocation": config.time_allocation,
        "scene_change_period": config.scene_change_period,
        "window_size": config.window_size,
        "strategy_id": config.strategy_id,
        "costs": {kind.value: cost for kind, cost in config.costs},
        "seed": config.seed,
        "scene_size": config.scene_size,
    }


def config_from_dict(doc: dict) -> EpisodeConfig:
    return EpisodeConfig(
        budget=int(doc["budget"]),
        time_allocation=int(doc["time_allocation"]),
        scene_change_period=int(doc["scene_change_period"]),
        window_size=int(doc["window_size"]),
        strategy_id=doc.get("strategy_id", "dt-task-env"),
        costs=tuple(sorted((ActionKind(k), int(v)) for k, v in doc["costs"].items())),
        seed=int(doc["seed"]),
        scene_size=int(doc.get("scene_size", 8)),
    )


def _step_to_record(step: TrajectoryStep) -> dict:
    return {
        "v": 1,
        "turn": step.turn,
        "phi": [float(x) for x in step.phi.as_array()],
        "action": {"kind": step.action.kind.value, "arg": step.action.arg},
        "cost": step.cost,
        "cumCost": step.cum_cost,
        "accuracy": step.accuracy,
    }


def trajectory_to_lines(trajectory: Trajectory) -> list[str]:
    header = {
        "v": 1,
        "kind": "trajectory",
        "strategy": trajectory.strategy_id,
        "config": config_to_dict(trajectory.config),
        "final_accuracy": trajectory.final_accuracy,
        "feature_counts": [float(x) for x in trajectory.feature_counts()],
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(_step_to_record(s), sort_keys=True) for s in trajectory.steps)
    return lines


def write_trajectory(path: str | Path, trajectory: Trajectory) -> None:
    Path(path).write_text("\n".join(trajectory_to_lines(trajectory)) + "\n")


def read_trajectory(path: str | Path) -> Trajectory:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ContractViolation(f"{path}: empty trajectory file")
    header = json.loads(lines[0])
    if header.get("kind") != "trajectory" or header.get("v") != 1:
        raise ContractViolation(f"{path}: not a v1 trajectory file")
    config = config_from_dict(header["config"])
    steps = []
    for line in lines[1:]:
        doc = json.loads(line)
        kind = ActionKind(doc["action"]["kind"])
        arg = doc["action"]["arg"]
        action = Action(
            kind,
            concept_id=arg if kind is ActionKind.DEMO_QUERY else None,
            instance_id=arg if kind is ActionKind.LABEL_QUERY else None,
            cost=int(doc["cost"]),
        )
        steps.append(
            TrajectoryStep(
                turn=int(doc["turn"]),
                phi=DecisionFeatureVector.from_array(doc["phi"]),
                action=action,
                cost=int(doc["cost"]),
                cum_cost=int(doc["cumCost"]),
                accuracy=float(doc["accuracy"]),
            )
        )
    return Trajectory(
        steps=tuple(steps),
        config=config,
        strategy_id=header.get("strategy", "external"),
        final_accuracy=float(header.get("final_accuracy", steps[-1].accuracy if steps else 0.0)),
    )


def write_curves_csv(curves: dict[str, LearningCurve], path: str | Path) -> None:
    lines = ["strategy,turn,mean_acc,std_err"]
    for strategy_id in sorted(curves):
        for turn, mean, err in curves[strategy_id].points:
            lines.append(f"{strategy_id},{turn},{mean!r},{err!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_curve_plot(curves: dict[str, LearningCurve], path: str | Path, title: str = "") -> None:
    """Minimal learning-curve image; purely a convenience artifact."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for strategy_id in sorted(curves):
        curve = curves[strategy_id]
        turns = [t for t, _, _ in curve.points]
        means = np.array([m for _, m, _ in curve.points])
        errs = np.array([e for _, _, e in curve.points])
        ax.plot(turns, means, label=strategy_id)
        ax.fill_between(turns, means - errs, means + errs, alpha=0.2)
    ax.set_xlabel("turn")
    ax.set_ylabel("hold-out accuracy")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
