"""Maximum-entropy IRL over questioning trajectories.

Recovers the seven decision-feature weights from expert demonstrations
by matching feature counts: the gradient of the demonstration
log-likelihood is the demonstrated counts minus the counts expected
under the max-ent trajectory distribution p(tau|w) ~ exp(w . phi(tau)).
Exact enumeration of that distribution is intractable for real
episodes (it exists only as a test oracle), so expected counts are
estimated from Monte-Carlo rollouts of the softmax-over-EU policy with
self-normalized importance weights exp(w . phi(tau)) / q(tau). The
weighting matters: the softmax policy is myopic (one-step EU), so its
unweighted rollouts cannot represent budget pacing, whose payoff is
multi-step (spending early forces a long no-query tail later).
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seeding
from .domain import (
    Action,
    ActionKind,
    EpisodeConfig,
    LearningState,
    Scene,
    no_query,
    positives_per_concept,
)
from .envsim import TaskDataset
from .episode import Trajectory, config_to_dict, run_episode
from .errors import ConfigError, ContractViolation, TrainingDiverged
from .features import FEATURE_NAMES, SUBSET_TASK_ENV, WeightVector
from .gpc import make_classifier_factory
from .strategies import DTPolicy, SoftmaxDTPolicy, Strategy, build_strategy


def feature_counts(trajectory: Trajectory) -> np.ndarray:
    """Per-component sum of phi(s_t) over the trajectory's steps."""
    return trajectory.feature_counts()


def mean_feature_counts(trajectories) -> np.ndarray:
    counts = [feature_counts(t) for t in trajectories]
    if not counts:
        return np.zeros(len(FEATURE_NAMES))
    return np.mean(counts, axis=0)


def _same_conditions(a: EpisodeConfig, b: EpisodeConfig) -> bool:
    keys = ("budget", "time_allocation", "scene_change_period", "window_size", "costs", "scene_size")
    return all(getattr(a, k) == getattr(b, k) for k in keys)


@dataclass(frozen=True)
class DemonstrationSet:
    """Expert trajectories recorded under one environmental condition."""

    trajectories: tuple[Trajectory, ...]
    environment_config: EpisodeConfig

    def __post_init__(self):
        if not self.trajectories:
            raise ContractViolation("a demonstration set needs at least one trajectory")
        for traj in self.trajectories:
            if not _same_conditions(traj.config, self.environment_config):
                raise ContractViolation(
                    "demonstrations were not recorded under one environmental condition"
                )

    @classmethod
    def from_trajectories(cls, trajectories) -> "DemonstrationSet":
        trajectories = tuple(trajectories)
        if not trajectories:
            raise ContractViolation("no demonstrations given")
        return cls(trajectories=trajectories, environment_config=trajectories[0].config)


@dataclass(frozen=True)
class IrlConfig:
    """Trainer knobs.

    ``exploration`` mixes extra no-query mass into the rollout proposal
    so budget-pacing trajectories appear in every batch; the importance
    weights correct the estimate back to the max-ent target, so this
    only reduces variance where it matters.
    """

    max_iterations: int = 100
    learning_rate: float = 4.0
    rollouts_per_iteration: int = 8
    temperature: float = 150.0
    exploration: float = 0.35
    validation_episodes: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.exploration < 1.0:
            raise ConfigError("exploration must be in [0, 1)")
        if self.rollouts_per_iteration < 1 or self.validation_episodes < 0:
            raise ConfigError("rollout and validation counts must be sensible")


def expected_counts(
    weights: WeightVector, rollouts, log_proposals=None, truncate_at: int | None = None
) -> np.ndarray:
    """Expected feature counts under the max-ent trajectory distribution.

    With ``log_proposals`` given (one log q(tau) per rollout, the
    summed log-probabilities of the sampled actions), the estimate is
    self-normalized importance sampling against exp(w . phi(tau));
    without them it is the plain rollout mean.

    ``truncate_at`` marks where policy-sampled trajectories end and
    off-proposal ones (demonstrations) begin: the off-proposal
    log-ratios are truncated just above the best on-proposal ratio, so
    they dominate the estimate only once the weights genuinely explain
    them rather than by proposal-density disparity alone.
    """
    counts = np.array([feature_counts(t) for t in rollouts])
    if log_proposals is None:
        return counts.mean(axis=0)
    w = weights.values
    log_w = counts @ w - np.asarray(log_proposals, dtype=float)
    if truncate_at is not None and 0 < truncate_at < len(log_w):
        cap = log_w[:truncate_at].max() + np.log(10.0)
        log_w = np.minimum(log_w, cap)
    log_w -= log_w.max()
    ratios = np.exp(log_w)
    ratios /= ratios.sum()
    return ratios @ counts


def irl_gradient(weights: WeightVector, demos: DemonstrationSet, rollout_sampler) -> np.ndarray:
    """Mean demonstrated feature counts minus expected sampled counts.

    ``rollout_sampler(weights)`` returns either a list of trajectories
    (plain mean) or a ``(trajectories, log_proposals)`` pair
    (importance-weighted mean).
    """
    demo_mean = mean_feature_counts(demos.trajectories)
    sampled = rollout_sampler(weights)
    if isinstance(sampled, tuple):
        rollouts, log_proposals = sampled
        return demo_mean - expected_counts(weights, rollouts, log_proposals)
    return demo_mean - mean_feature_counts(sampled)


@dataclass
class IterationLogEntry:
    iteration: int
    gradient_norm: float
    validation_accuracy: float
    weights: tuple[float, ...]


@dataclass
class TrainingResult:
    best_weights: WeightVector
    best_validation_accuracy: float
    best_iteration: int
    iteration_log: list[IterationLogEntry]


def _rollout_config(env: EpisodeConfig, seed: int) -> EpisodeConfig:
    return replace(env, seed=seed, strategy_id="dt-task-env")


def sample_rollout(
    task: TaskDataset,
    config: EpisodeConfig,
    weights: WeightVector,
    beta: float,
    classifier_factory=None,
    exploration: float = 0.0,
) -> tuple[Trajectory, float]:
    """One stochastic episode under the softmax-over-EU proposal.

    Returns the trajectory together with log q(tau), the summed log
    probabilities of the sampled actions, which the importance-weighted
    gradient estimator needs. ``exploration`` adds that much extra
    probability mass to the no-query action each turn (the candidate
    list always starts with NQ), keeping budget-pacing trajectories
    represented in the sample.
    """
    from .episode import EpisodeEngine
    from .strategies import softmax_policy

    strategy = build_strategy("dt-task-env", weights)
    engine = EpisodeEngine(task, config, classifier_factory=classifier_factory)
    rng = seeding.derive(config.seed, seeding.POLICY)
    log_q = 0.0
    while not engine.finished:
        scene = engine.observe()
        dist = softmax_policy(engine.state, scene, engine.ensemble, strategy, engine.ctx, beta)
        probs = np.array([p for _, p in dist]) * (1.0 - exploration)
        probs[0] += exploration
        probs /= probs.sum()
        idx = int(rng.choice(len(dist), p=probs))
        action = dist[idx][0]
        log_q += float(np.log(probs[idx]))
        engine.apply(scene, action, engine.answer_for(scene, action))
    traj = engine.trajectory()
    traj = Trajectory(
        steps=traj.steps,
        config=traj.config,
        strategy_id="dt-task-env",
        final_accuracy=traj.final_accuracy,
    )
    return traj, log_q


@dataclass(frozen=True)
class DemoChoicePoint:
    """One demonstrated decision: successor features per candidate, and
    which candidate the expert took."""

    successor_phis: np.ndarray  # (num candidates, 7)
    chosen: int


def precompute_demo_choices(
    task: TaskDataset, demos: DemonstrationSet, classifier_factory=None
) -> list[DemoChoicePoint]:
    """Replay the demonstrations and record, at every visited state, the
    outcome-averaged successor features of every candidate action.

    These do not depend on the weights, so the whole causal-entropy
    training loop reduces to logistic-regression-style updates over
    this table.
    """
    from .episode import EpisodeEngine
    from .strategies import candidate_outcome_features

    choices: list[DemoChoicePoint] = []
    for traj in demos.trajectories:
        engine = EpisodeEngine(task, traj.config, classifier_factory=classifier_factory)
        for step in traj.steps:
            scene = engine.observe()
            scored = candidate_outcome_features(engine.state, scene, engine.ensemble, engine.ctx)
            actions = [a for a, _ in scored]
            phis = np.array([phi for _, phi in scored])
            chosen = actions.index(step.action)
            choices.append(DemoChoicePoint(successor_phis=phis, chosen=chosen))
            engine.apply(scene, step.action, engine.answer_for(scene, step.action))
    return choices


def causal_log_likelihood(
    w: np.ndarray, choices: list[DemoChoicePoint], beta: float, per_demo: int
) -> float:
    """Log-likelihood of the demonstrated choices under softmax-over-EU."""
    ll = 0.0
    for point in choices:
        logits = beta * (point.successor_phis @ w)
        m = logits.max()
        ll += logits[point.chosen] - (m + np.log(np.exp(logits - m).sum()))
    return ll / per_demo


def causal_gradient(
    weights: WeightVector, choices: list[DemoChoicePoint], beta: float, per_demo: int
) -> np.ndarray:
    """Demonstrated minus policy-expected successor feature counts.

    The per-state expectation is taken under the softmax-over-EU policy
    at the demonstrated states (the causal-entropy form of the
    feature-matching gradient); dividing by the number of
    demonstrations keeps the scale of per-trajectory count sums.
    """
    w = weights.values
    grad = np.zeros(len(w))
    for point in choices:
        logits = beta * (point.successor_phis @ w)
        logits -= logits.max()
        p = np.exp(logits)
        p /= p.sum()
        grad += point.successor_phis[point.chosen] - p @ point.successor_phis
    return grad / per_demo


def demo_log_proposal(
    task: TaskDataset,
    trajectory: Trajectory,
    weights: WeightVector,
    beta: float,
    classifier_factory=None,
    exploration: float = 0.0,
) -> float:
    """log q(tau) the rollout proposal assigns to a logged trajectory.

    Replays the trajectory teacher-forced and sums the proposal's log
    probability of each logged action; this is what lets demonstrations
    join the importance-sampling pool next to fresh rollouts.
    """
    from .episode import EpisodeEngine
    from .strategies import softmax_policy

    strategy = build_strategy("dt-task-env", weights)
    engine = EpisodeEngine(task, trajectory.config, classifier_factory=classifier_factory)
    log_q = 0.0
    for step in trajectory.steps:
        scene = engine.observe()
        dist = softmax_policy(engine.state, scene, engine.ensemble, strategy, engine.ctx, beta)
        probs = np.array([p for _, p in dist]) * (1.0 - exploration)
        probs[0] += exploration
        probs /= probs.sum()
        idx = next(i for i, (a, _) in enumerate(dist) if a == step.action)
        log_q += float(np.log(max(probs[idx], 1e-300)))
        engine.apply(scene, step.action, engine.answer_for(scene, step.action))
    return log_q


def _rollout_worker(args):
    task, config, weights_items, beta, factory_name, exploration = args

    weights = WeightVector(weights_items)
    factory = make_classifier_factory(factory_name, task)
    if beta is None:
        policy = DTPolicy(build_strategy("dt-task-env", weights))
        traj, _ = run_episode(task, config, policy, classifier_factory=factory)
        return traj, 0.0
    return sample_rollout(task, config, weights, beta, factory, exploration)


def _demo_logq_worker(args):
    task, trajectory, weights_items, beta, factory_name, exploration = args
    weights = WeightVector(weights_items)
    factory = make_classifier_factory(factory_name, task)
    return demo_log_proposal(task, trajectory, weights, beta, factory, exploration)


def train_weights(
    demos: DemonstrationSet,
    irl_config: IrlConfig,
    validation_task: TaskDataset,
    rollout_sampler=None,
    n_jobs: int = 1,
    classifier_name: str = "gp",
    gradient_mode: str = "causal",
) -> TrainingResult:
    """Gradient ascent on the max-ent objective with validation selection.

    The default gradient is the causal-entropy form: demonstrated minus
    policy-expected successor feature counts at the demonstrated states.
    It is convex in the weights, deterministic, and needs no rollouts
    for the gradient itself. ``gradient_mode="rollout"`` instead
    estimates expected counts by importance-weighted Monte-Carlo
    rollouts of the softmax policy over whole trajectories; it is kept
    for comparison but mixes high estimator variance into the update.
    A caller-supplied ``rollout_sampler`` forces rollout mode.

    After each update the candidate weights are scored by greedy
    (argmax-EU) episodes under the training conditions; the weights with
    the best mean final accuracy win. Validation seeds are held fixed
    across iterations so scores are comparable. Episodes within an
    iteration are independent; ``n_jobs`` > 1 runs them in a process
    pool with per-episode seeds, so results match the serial run.
    """
    env = demos.environment_config
    w = np.full(len(FEATURE_NAMES), 1.0 / len(FEATURE_NAMES))
    pool = ProcessPoolExecutor(max_workers=n_jobs) if n_jobs > 1 else None

    def run_batch(jobs):
        if pool is not None:
            return list(pool.map(_rollout_worker, jobs))
        return [_rollout_worker(j) for j in jobs]

    def rollout_jobs(weights: WeightVector, iteration: int):
        jobs = []
        for k in range(irl_config.rollouts_per_iteration):
            seed = seeding.derive_seed(irl_config.seed, seeding.IRL_ROLLOUT, iteration, k)
            jobs.append(
                (
                    validation_task,
                    _rollout_config(env, seed),
                    weights.weights,
                    irl_config.temperature,
                    classifier_name,
                    irl_config.exploration,
                )
            )
        return jobs

    def validation_jobs(weights: WeightVector):
        return [
            (
                validation_task,
                _rollout_config(
                    env, seeding.derive_seed(irl_config.seed, seeding.IRL_VALIDATION, k)
                ),
                weights.weights,
                None,
                classifier_name,
                0.0,
            )
            for k in range(irl_config.validation_episodes)
        ]

    demo_mean = mean_feature_counts(demos.trajectories)
    mode = "rollout" if rollout_sampler is not None else gradient_mode
    choices: list[DemoChoicePoint] | None = None
    if mode == "causal":
        factory = make_classifier_factory(classifier_name, validation_task)
        choices = precompute_demo_choices(validation_task, demos, factory)

    log: list[IterationLogEntry] = []
    best_w, best_acc, best_it = w.copy(), -np.inf, -1
    try:
        for iteration in range(irl_config.max_iterations):
            weights = WeightVector(tuple(zip(FEATURE_NAMES, w.tolist())))
            if rollout_sampler is not None:
                rollouts = rollout_sampler(weights)
                grad = demo_mean - mean_feature_counts(rollouts)
            elif mode == "causal":
                grad = causal_gradient(
                    weights, choices, irl_config.temperature, len(demos.trajectories)
                )
                # Backtracking line search on the exact (convex) choice
                # log-likelihood: the configured rate is the largest step
                # tried, halved until the objective improves, so the loop
                # reaches the optimum in a handful of iterations instead
                # of crawling there.
                beta_t = irl_config.temperature
                per = len(demos.trajectories)
                ll0 = causal_log_likelihood(w, choices, beta_t, per)
                step = irl_config.learning_rate
                for _ in range(12):
                    if causal_log_likelihood(w + step * grad, choices, beta_t, per) > ll0:
                        break
                    step /= 2.0
                w = w + step * grad
            else:
                results = run_batch(rollout_jobs(weights, iteration))
                rollouts = [t for t, _ in results]
                log_q = [lq for _, lq in results]
                grad = demo_mean - expected_counts(weights, rollouts, log_q)
            if mode != "causal" or rollout_sampler is not None:
                w = w + irl_config.learning_rate * grad
            if np.linalg.norm(w) > 1e6:
                raise TrainingDiverged("weight norm exceeded 1e6", log=log)
            if rollout_sampler is not None:
                acc = 0.0
            else:
                candidate = WeightVector(tuple(zip(FEATURE_NAMES, w.tolist())))
                finals = [t.final_accuracy for t, _ in run_batch(validation_jobs(candidate))]
                acc = float(np.mean(finals)) if finals else 0.0
            log.append(
                IterationLogEntry(
                    iteration=iteration,
                    gradient_norm=float(np.linalg.norm(grad)),
                    validation_accuracy=acc,
                    weights=tuple(float(x) for x in w),
                )
            )
            if acc > best_acc:
                best_w, best_acc, best_it = w.copy(), acc, iteration
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainingResult(
        best_weights=WeightVector(tuple(zip(FEATURE_NAMES, best_w.tolist()))),
        best_validation_accuracy=float(best_acc),
        best_iteration=best_it,
        iteration_log=log,
    )


# --- Synthetic expert -----------------------------------------------------


# Ground-truth questioning style for the synthetic expert: a strong
# discriminability drive (asks FSQ by turn five of its own accord, right
# after the first labels make the subset answer usable), label queries
# dominant, and enough budget pressure to stop once the concepts are
# pinned down. Values picked so the induced behavior shows these habits
# without the FSQ guardrail ever having to fire.
DEFAULT_EXPERT_WEIGHTS = WeightVector(
    (
        ("acd", 5.0),
        ("cdu", 0.5),
        ("iv", 1.5),
        ("pm", 0.5),
        ("qbc", -2.4),
        ("rtu", 0.14),
        ("nqt", -1.2),
    )
)


@dataclass(frozen=True)
class ExpertSpec:
    """Synthetic expert: a known weight vector plus scripted guardrails.

    The core is the greedy arbitration policy under ``weights`` (the
    recovery experiment's ground truth); the single scripted rule forces
    the feature subset query by ``fsq_deadline`` if the core has not
    asked it yet.
    """

    weights: WeightVector | None = None
    fsq_deadline: int = 5

    def resolved_weights(self) -> WeightVector:
        return self.weights if self.weights is not None else DEFAULT_EXPERT_WEIGHTS


class ExpertPolicy:
    """Greedy policy under the expert's weights, with the FSQ guardrail."""

    strategy_id = "expert"

    def __init__(self, spec: ExpertSpec, concepts=None, rng=None):
        self.spec = spec
        self._core = DTPolicy(build_strategy("dt-task-env", spec.resolved_weights()))

    def select_action(self, state: LearningState, scene: Scene, ensemble, ctx, rng=None) -> Action:
        fsq_cost = ctx.costs[ActionKind.FEATURE_SUBSET_QUERY]
        if (
            not state.fsq_answered
            and state.turn + 1 >= self.spec.fsq_deadline
            and fsq_cost <= state.budget_remaining
        ):
            return Action(ActionKind.FEATURE_SUBSET_QUERY, cost=fsq_cost)
        return self._core.select_action(state, scene, ensemble, ctx, rng)


def synthetic_expert(
    dataset: TaskDataset,
    config: EpisodeConfig,
    expert_spec: ExpertSpec | None = None,
    demonstrations: int = 3,
    classifier_factory=None,
) -> DemonstrationSet:
    """Generate scripted expert demonstrations in the trajectory format."""
    expert_spec = expert_spec or ExpertSpec()
    trajectories = []
    for k in range(demonstrations):
        seed = seeding.derive_seed(config.seed, seeding.EXPERT, k)
        demo_config = replace(config, seed=seed)
        policy = ExpertPolicy(expert_spec)
        traj, _ = run_episode(
            dataset, demo_config, policy, classifier_factory=classifier_factory
        )
        trajectories.append(traj)
    return DemonstrationSet(
        trajectories=tuple(trajectories), environment_config=trajectories[0].config
    )


# --- Weights file ---------------------------------------------------------


def config_hash(config: EpisodeConfig) -> str:
    doc = config_to_dict(config)
    doc.pop("seed", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def save_weights(
    path: str | Path,
    weights: WeightVector,
    trained_on: EpisodeConfig,
    validation_accuracy: float,
) -> None:
    doc = {
        "v": 1,
        "strategy": "dt-task-env",
        "features": list(weights.names),
        "weights": [float(x) for x in weights.values],
        "trainedOn": {"configHash": config_hash(trained_on)},
        "validationAccuracy": validation_accuracy,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_weights(path: str | Path) -> WeightVector:
    doc = json.loads(Path(path).read_text())
    if doc.get("v") != 1:
        raise ContractViolation(f"{path}: unsupported weights file version")
    names = tuple(doc["features"])
    if names != SUBSET_TASK_ENV:
        raise ContractViolation(f"{path}: unexpected feature names {names}")
    return WeightVector(tuple(zip(names, [float(x) for x in doc["weights"]])))
