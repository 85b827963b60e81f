"""Questioning policies: u-sampling and the decision-theoretic arbiters.

The DT variants score every candidate action by expected utility: each
action's outcomes are simulated one step ahead (myopic lookahead), the
classifiers are refit per outcome, and U(s') = w . phi(s') is averaged
under the outcome distribution. A per-turn refit cache exploits the
one-vs-rest structure (each simulated answer touches every concept with
a +/- polarity) so arbitration costs 2|Y| fits per label query instead
of |Y|^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import (
    Action,
    ActionKind,
    Concept,
    DemoAnswer,
    FeatureSubsetAnswer,
    LabelAnswer,
    LearningState,
    NoAnswer,
    Scene,
    apply_answer,
    candidate_actions,
    no_query,
)
from .errors import ContractViolation
from .features import (
    FEATURE_NAMES,
    SUBSET_IROS,
    SUBSET_TASK,
    SUBSET_TASK_ENV,
    WeightVector,
    feature_vector,
)

FEATURE_NAMES_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}
from .gpc import fit_classifier, gp_factory

STRATEGY_IDS = ("u-sampling", "dt-iros", "dt-task", "dt-task-env")

STRATEGY_FEATURES = {
    "dt-iros": SUBSET_IROS,
    "dt-task": SUBSET_TASK,
    "dt-task-env": SUBSET_TASK_ENV,
}


@dataclass(frozen=True)
class Strategy:
    id: str
    weights: WeightVector | None = None

    def __post_init__(self):
        if self.id not in STRATEGY_IDS:
            raise ContractViolation(f"unknown strategy id {self.id!r}")
        if self.id in STRATEGY_FEATURES:
            expected = STRATEGY_FEATURES[self.id]
            if self.weights is None:
                object.__setattr__(self, "weights", WeightVector.uniform(expected))
            elif self.weights.names != expected:
                raise ContractViolation(
                    f"{self.id} expects weights over {expected}, got {self.weights.names}"
                )

    @property
    def is_dt(self) -> bool:
        return self.id in STRATEGY_FEATURES


def build_strategy(strategy_id: str, weights: WeightVector | None = None) -> Strategy:
    return Strategy(id=strategy_id, weights=weights)


@dataclass
class ArbitrationContext:
    """Per-episode constants the arbitration functions need."""

    concepts: tuple[Concept, ...]
    window_size: int
    costs: dict[ActionKind, int]
    classifier_factory: object = gp_factory
    fsq_proxy_size: int = 3


@dataclass(frozen=True)
class Outcome:
    state: LearningState  # successor, with posteriors installed
    probability: float


def entropy_score(posterior_row: np.ndarray) -> float:
    """Prediction entropy of one instance's label distribution (nats).

    The independent binary posteriors are normalized into a distribution
    over the concept set first.
    """
    row = np.asarray(posterior_row, dtype=float)
    q = row / row.sum()
    terms = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return float(-terms.sum())


def u_sampling_select(
    state: LearningState, scene: Scene, posteriors: np.ndarray, costs: dict[ActionKind, int]
) -> Action:
    """Label query on the max-entropy instance; NQ once the budget is out.

    Ties break to the lowest instance id. This baseline never issues
    demo or feature subset queries.
    """
    lq_cost = costs[ActionKind.LABEL_QUERY]
    if lq_cost > state.budget_remaining:
        return no_query()
    order = np.argsort([inst.id for inst in scene.instances], kind="stable")
    best_idx, best_entropy = None, -np.inf
    for i in order:
        h = entropy_score(posteriors[i])
        if h > best_entropy + 1e-12:
            best_idx, best_entropy = i, h
    target = scene.instances[int(best_idx)]
    return Action(ActionKind.LABEL_QUERY, instance_id=target.id, cost=lq_cost)


def feature_subset_proxy(
    sample,
    concepts: tuple[Concept, ...],
    num_features: int,
    size: int,
    scene_x: np.ndarray | None = None,
) -> tuple[int, ...]:
    """Filter-style proxy for the teacher's feature subset answer.

    Scores each feature by how well the labeled positives separate by
    class along it (between-class variance over shrunk within-class
    variance, an ANOVA-F ratio) and keeps the top ``size``. The
    shrinkage keeps the ranking sane at the tiny sample sizes where the
    feature subset decision actually gets made. With fewer than two
    labeled classes the full feature set is returned, which leaves
    predictions unchanged.
    """
    ranked = rank_discriminative_features(sample, num_features, scene_x)
    if ranked is None or size >= num_features:
        return tuple(range(num_features))
    return tuple(sorted(ranked[:size]))


def rank_discriminative_features(
    sample, num_features: int, scene_x: np.ndarray | None = None
) -> tuple[int, ...] | None:
    """All feature indices ranked by the class-separation score.

    With two or more labeled classes this is a shrunk ANOVA-F ratio
    (between-class over within-class variance of the positives). With a
    single labeled class the scene stands in for the contrast: relevant
    dims are those where the labeled examples sit far from the scene's
    overall center, since a concept cluster is offset from the
    all-concepts mixture only along dims carrying class signal. Returns
    None when there is nothing to rank against.
    """
    rows, labels = [], []
    for ex in sample:
        if ex.polarity > 0:
            rows.append(ex.features)
            labels.append(ex.concept_id)
    if not rows:
        return None
    x = np.asarray(rows, dtype=float)
    if len(set(labels)) < 2:
        if scene_x is None or scene_x.shape[0] < 2:
            return None
        spread = scene_x.std(axis=0)
        spread = np.where(spread < 1e-12, 1.0, spread)
        scores = np.abs(x.mean(axis=0) - scene_x.mean(axis=0)) / spread
        return tuple(sorted(range(num_features), key=lambda j: (-scores[j], j)))
    class_ids = sorted(set(labels))
    total_var = x.var(axis=0)
    scale = np.where(total_var < 1e-12, 1.0, total_var)
    between = np.zeros(num_features)
    within = np.zeros(num_features)
    for cid in class_ids:
        mask = np.asarray([lab == cid for lab in labels])
        grp = x[mask]
        between += mask.sum() * (grp.mean(axis=0) - x.mean(axis=0)) ** 2
        within += ((grp - grp.mean(axis=0)) ** 2).sum(axis=0)
    scores = between / (within + 0.5 * scale * len(rows))
    return tuple(sorted(range(num_features), key=lambda j: (-scores[j], j)))


class _RefitCache:
    """Memo for simulated refits within one arbitration turn.

    Keyed by (concept, added instance & polarity, subset); values are
    (classifier, posterior column over the current scene).
    """

    def __init__(
        self, state: LearningState, scene: Scene, ctx: ArbitrationContext, ensemble=None
    ):
        self._state = state
        self._scene = scene
        self._ctx = ctx
        self._scene_x = np.asarray([inst.features for inst in scene.instances], dtype=float)
        self._base_x: dict[str, np.ndarray] = {}
        self._base_t: dict[str, np.ndarray] = {}
        self._base_rows: dict[str, set] = {}
        self._warm: dict[str, np.ndarray] = {}
        for c in ctx.concepts:
            rows = [ex for ex in state.training_sample if ex.concept_id == c.id]
            self._base_x[c.id] = (
                np.asarray([ex.features for ex in rows], dtype=float)
                if rows
                else np.empty((0, self._scene_x.shape[1]))
            )
            self._base_t[c.id] = np.asarray([ex.polarity for ex in rows], dtype=float)
            self._base_rows[c.id] = {(ex.features, ex.polarity) for ex in rows}
            if ensemble is not None and ensemble.subset == state.active_feature_subset:
                base = ensemble.classifiers.get(c.id)
                mode = getattr(base, "_mode", None)
                if mode is not None and len(mode) == len(rows):
                    self._warm[c.id] = mode
        self._memo: dict = {}

    def column(self, concept_id: str, added, subset) -> np.ndarray:
        # Mirror the state transition's dedup: a row the base sample
        # already contains adds nothing to the simulated refit.
        added = tuple(
            ex for ex in added if (ex.features, ex.polarity) not in self._base_rows[concept_id]
        )
        key = (concept_id, tuple((ex.features, ex.polarity) for ex in added), subset)
        hit = self._memo.get(key)
        if hit is None:
            x, t = self._base_x[concept_id], self._base_t[concept_id]
            if added:
                x = np.concatenate([x, [ex.features for ex in added]]) if x.size else np.asarray(
                    [ex.features for ex in added], dtype=float
                )
                t = np.concatenate([t, [float(ex.polarity) for ex in added]])
            f0 = None
            warm = self._warm.get(concept_id)
            if warm is not None and subset == self._state.active_feature_subset:
                f0 = np.concatenate([warm, np.zeros(len(added))]) if added else warm
            if f0 is not None:
                clf = self._ctx.classifier_factory(x, t, subset, f0=f0)
            else:
                clf = self._ctx.classifier_factory(x, t, subset)
            hit = clf.predict_proba(self._scene_x)
            self._memo[key] = hit
        return hit


def simulate_outcomes(
    state: LearningState,
    scene: Scene,
    action: Action,
    ensemble,
    ctx: ArbitrationContext,
    cache: _RefitCache | None = None,
) -> list[Outcome]:
    """All possible next states for one action, with probabilities.

    Label queries branch over the concept the teacher might answer,
    weighted by the normalized posterior row; demo and feature subset
    queries are simulated as single outcomes (most probable positive
    instance / mutual-information proxy subset respectively).
    """
    if state.posteriors is None:
        raise ContractViolation("state needs posteriors before simulation")
    if cache is None:
        cache = _RefitCache(state, scene, ctx, ensemble)
    base_subset = state.active_feature_subset
    posteriors = state.posteriors

    if action.kind is ActionKind.NO_QUERY:
        succ = apply_answer(state, scene, action, NoAnswer(), ctx.concepts)
        return [Outcome(succ, 1.0)]

    if action.kind is ActionKind.LABEL_QUERY:
        idx = next(i for i, inst in enumerate(scene.instances) if inst.id == action.instance_id)
        inst = scene.instances[idx]
        from .domain import NEGATIVE, POSITIVE, TrainingExample

        # The teacher answers deterministically, so re-asking about an
        # already-labeled observation has exactly one outcome: the known
        # answer. Anything else would credit the query with impossible
        # branches.
        known = next(
            (
                ex.concept_id
                for ex in state.training_sample
                if ex.polarity == POSITIVE and ex.features == inst.features
            ),
            None,
        )
        if known is not None:
            probs = np.array(
                [1.0 if c.id == known else 0.0 for c in ctx.concepts]
            )
        else:
            row = posteriors[idx]
            probs = row / row.sum()

        outcomes = []
        for j, concept in enumerate(ctx.concepts):
            if probs[j] == 0.0:
                continue
            succ = apply_answer(state, scene, action, LabelAnswer(concept.id), ctx.concepts)
            cols = [
                cache.column(
                    c.id,
                    (
                        TrainingExample(
                            inst.features,
                            c.id,
                            POSITIVE if c.id == concept.id else NEGATIVE,
                        ),
                    ),
                    base_subset,
                )
                for c in ctx.concepts
            ]
            succ = succ.with_posteriors(np.column_stack(cols))
            outcomes.append(Outcome(succ, float(probs[j])))
        return outcomes

    if action.kind is ActionKind.DEMO_QUERY:
        from .domain import NEGATIVE, POSITIVE, TrainingExample

        col = [c.id for c in ctx.concepts].index(action.concept_id)
        # The most probable positive stands in for the teacher's sampled
        # demo. Once it is already labeled the deduped refit shows no
        # gain, which is what keeps demo queries from looking endlessly
        # informative.
        idx = int(np.argmax(posteriors[:, col]))
        inst = scene.instances[idx]
        succ = apply_answer(state, scene, action, DemoAnswer(inst, action.concept_id), ctx.concepts)
        cols = []
        for c in ctx.concepts:
            polarity = POSITIVE if c.id == action.concept_id else NEGATIVE
            cols.append(
                cache.column(c.id, (TrainingExample(inst.features, c.id, polarity),), base_subset)
            )
        succ = succ.with_posteriors(np.column_stack(cols))
        return [Outcome(succ, 1.0)]

    # FSQ: the learner cannot know the teacher's answer. The answer is
    # by definition the discriminative subset, so among the top-ranked
    # candidate subsets the one whose refit discriminates best is the
    # least-wrong stand-in; a point estimate alone undersells the query.
    num_features = len(scene.instances[0].features)
    q = min(ctx.fsq_proxy_size, num_features)
    ranked = rank_discriminative_features(
        state.training_sample, num_features, cache._scene_x
    )
    if ranked is None or q >= num_features:
        candidates = [tuple(range(num_features))]
    else:
        head = list(ranked[: q + 1])
        candidates = [tuple(sorted(head[:i] + head[i + 1 :])) for i in range(q, -1, -1)]
    best_cols, best_subset, best_acd = None, None, -1.0
    for subset in candidates:
        cols = [cache.column(c.id, (), subset) for c in ctx.concepts]
        matrix = np.column_stack(cols)
        acd = float(np.mean(matrix.max(axis=0) - matrix.min(axis=0)))
        if acd > best_acd:
            best_cols, best_subset, best_acd = cols, subset, acd
    succ = apply_answer(state, scene, action, FeatureSubsetAnswer(best_subset), ctx.concepts)
    succ = succ.with_posteriors(np.column_stack(best_cols))
    return [Outcome(succ, 1.0)]


def expected_utility(
    state: LearningState,
    scene: Scene,
    action: Action,
    weights: WeightVector,
    ensemble,
    ctx: ArbitrationContext,
    cache: _RefitCache | None = None,
) -> float:
    """EU(a|s) = sum over outcomes of P(s'|a,s) * U(s')."""
    total = 0.0
    for outcome in simulate_outcomes(state, scene, action, ensemble, ctx, cache):
        phi = feature_vector(
            outcome.state, outcome.state.posteriors, ctx.concepts, ctx.window_size
        )
        total += outcome.probability * weights.utility(phi)
    return total


def candidate_outcome_features(
    state: LearningState,
    scene: Scene,
    ensemble,
    ctx: ArbitrationContext,
) -> list[tuple[Action, np.ndarray]]:
    """Per candidate action, the outcome-averaged successor phi vector.

    EU(a|s) is the dot product of these vectors with any weight vector,
    so arbitration, softmax rollouts, and the IRL trainer can all share
    one simulation pass.
    """
    cache = _RefitCache(state, scene, ctx, ensemble)
    out = []
    for action in candidate_actions(state, scene, ctx.concepts, ctx.costs):
        mean_phi = np.zeros(len(FEATURE_NAMES))
        for outcome in simulate_outcomes(state, scene, action, ensemble, ctx, cache):
            phi = feature_vector(
                outcome.state, outcome.state.posteriors, ctx.concepts, ctx.window_size
            )
            mean_phi += outcome.probability * phi.as_array()
        out.append((action, mean_phi))
    return out


def action_utilities(
    state: LearningState,
    scene: Scene,
    ensemble,
    strategy: Strategy,
    ctx: ArbitrationContext,
) -> list[tuple[Action, float]]:
    """EU for every candidate action, in tie-break order."""
    names = strategy.weights.names
    values = strategy.weights.values
    idx = [FEATURE_NAMES_INDEX[n] for n in names]
    return [
        (a, float(values @ phi[idx]))
        for a, phi in candidate_outcome_features(state, scene, ensemble, ctx)
    ]


def dt_select(
    state: LearningState, scene: Scene, ensemble, strategy: Strategy, ctx: ArbitrationContext
) -> Action:
    """Argmax-EU action; exact ties keep the earlier candidate.

    Candidate order (NQ, FSQ, LQ by instance id, DQ by concept id) is the
    declared deterministic tie-break.
    """
    if not strategy.is_dt:
        raise ContractViolation("dt_select requires a decision-theoretic strategy")
    best_action, best_eu = None, -np.inf
    for action, eu in action_utilities(state, scene, ensemble, strategy, ctx):
        if eu > best_eu:
            best_action, best_eu = action, eu
    return best_action


def softmax_policy(
    state: LearningState,
    scene: Scene,
    ensemble,
    strategy: Strategy,
    ctx: ArbitrationContext,
    beta: float,
) -> list[tuple[Action, float]]:
    """Stochastic rollout policy: p(a) proportional to exp(beta * EU)."""
    if beta <= 0:
        raise ContractViolation("softmax temperature must be positive")
    scored = action_utilities(state, scene, ensemble, strategy, ctx)
    eus = np.array([eu for _, eu in scored])
    logits = beta * (eus - eus.max())
    weights = np.exp(logits)
    probs = weights / weights.sum()
    return [(action, float(p)) for (action, _), p in zip(scored, probs)]


# --- Policy objects consumed by the episode engine -----------------------


class USamplingPolicy:
    strategy_id = "u-sampling"

    def select_action(self, state, scene, ensemble, ctx, rng=None) -> Action:
        return u_sampling_select(state, scene, state.posteriors, ctx.costs)


class DTPolicy:
    def __init__(self, strategy: Strategy):
        self.strategy = strategy
        self.strategy_id = strategy.id

    def select_action(self, state, scene, ensemble, ctx, rng=None) -> Action:
        return dt_select(state, scene, ensemble, self.strategy, ctx)


class SoftmaxDTPolicy:
    """Samples actions from the softmax-over-EU distribution (IRL rollouts)."""

    def __init__(self, strategy: Strategy, beta: float):
        self.strategy = strategy
        self.strategy_id = strategy.id
        self.beta = beta

    def select_action(self, state, scene, ensemble, ctx, rng) -> Action:
        dist = softmax_policy(state, scene, ensemble, self.strategy, ctx, self.beta)
        probs = np.array([p for _, p in dist])
        idx = int(rng.choice(len(dist), p=probs / probs.sum()))
        return dist[idx][0]


def make_policy(strategy_id: str, weights: WeightVector | None = None):
    if strategy_id == "u-sampling":
        return USamplingPolicy()
    return DTPolicy(build_strategy(strategy_id, weights))
