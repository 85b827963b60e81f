"""Dynamic-environment simulation.

A task is a set of concepts with per-phase instance pools; phases model
object state change (cluster means move between phases). Scenes are
sampled from the active phase's pools at a fixed change period and held
constant in between; Gaussian observation noise is applied at scene
time, never stored in the pools. A simulated teacher answers label,
demo, and feature-subset queries from ground truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .domain import (
    Action,
    ActionKind,
    Concept,
    DemoAnswer,
    EpisodeConfig,
    FeatureSubsetAnswer,
    Instance,
    LabelAnswer,
    OracleAnswer,
    Scene,
)
from .errors import ConfigError, ContractViolation, DatasetFormatError, OracleError

TRAIN_SPLIT = "train"
HOLDOUT_SPLIT = "holdout"


@dataclass(frozen=True)
class TaskDataset:
    """Concepts plus per-(concept, phase) instance pools and a hold-out split."""

    concepts: tuple[Concept, ...]
    pools: dict  # (concept_id, phase) -> tuple[Instance, ...]
    holdout: dict  # same keying
    feature_dim: int
    noise_sigma: float
    num_phases: int

    def __post_init__(self):
        ids = [c.id for c in self.concepts]
        if len(set(ids)) != len(ids):
            raise ConfigError("concept ids must be unique")
        for (cid, phase), instances in self.pools.items():
            for inst in instances:
                if cid not in inst.true_labels:
                    raise ConfigError(f"pool instance {inst.id} missing label {cid}")
                if len(inst.features) != self.feature_dim:
                    raise ConfigError(f"instance {inst.id} has wrong dimensionality")

    @property
    def concept_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.concepts)

    def relevant_union(self) -> tuple[int, ...]:
        dims: set[int] = set()
        for c in self.concepts:
            if c.relevant_features:
                dims.update(c.relevant_features)
        return tuple(sorted(dims))

    def pool(self, concept_id: str, phase: int) -> tuple[Instance, ...]:
        return self.pools.get((concept_id, phase), ())

    def holdout_instances(self) -> tuple[Instance, ...]:
        out: list[Instance] = []
        for phase in range(self.num_phases):
            for c in self.concepts:
                out.extend(self.holdout.get((c.id, phase), ()))
        return tuple(out)

    def priority_label(self, instance: Instance) -> str:
        """Resolve a (possibly multi-label) instance to one concept id."""
        ranked = sorted(
            (c for c in self.concepts if c.id in instance.true_labels),
            key=lambda c: (c.priority, c.id),
        )
        if not ranked:
            raise OracleError(f"instance {instance.id} carries no known concept label")
        return ranked[0].id


def generate_synthetic_task(
    num_concepts: int,
    feature_dim: int,
    relevant_dim: int,
    phases: int,
    instances_per_phase: int,
    seed: int,
    noise_sigma: float = 0.25,
    holdout_per_phase: int | None = None,
) -> TaskDataset:
    """Desk-scale stand-in for the image tasks.

    Per concept and phase, instances are drawn from a Gaussian cluster on
    the relevant dims (unit spread, means kept >= 4 apart so the classes
    are linearly separable within a phase); means are redrawn per phase
    to model object state change. Irrelevant dims come from a shared
    wider distractor distribution, which is what makes the feature
    subset query valuable. Deterministic in ``seed``.
    """
    if relevant_dim > feature_dim:
        raise ConfigError("relevant_dim cannot exceed feature_dim")
    for name, v in [
        ("num_concepts", num_concepts),
        ("feature_dim", feature_dim),
        ("relevant_dim", relevant_dim),
        ("phases", phases),
        ("instances_per_phase", instances_per_phase),
    ]:
        if v <= 0:
            raise ConfigError(f"{name} must be positive")
    if holdout_per_phase is None:
        holdout_per_phase = max(4, instances_per_phase // 2)
    rng = seeding.derive(seed, seeding.TASKGEN)

    relevant = tuple(sorted(rng.choice(feature_dim, size=relevant_dim, replace=False).tolist()))
    concepts = tuple(
        Concept(id=f"c{i}", relevant_features=frozenset(relevant), priority=i)
        for i in range(num_concepts)
    )

    min_gap = 4.0  # cluster means >= 4 sigma apart keep classes separable

    def draw_means(other_concept_means: list[np.ndarray]) -> np.ndarray:
        # Also keep distance from other concepts' clusters in *earlier*
        # phases: the hold-out evaluation pools phases, so a phase-2
        # cluster of one class sitting on a phase-0 cluster of another
        # would make the task unlearnable by construction.
        spread = 3.0
        for _ in range(1000):
            means = rng.normal(0.0, spread, size=(num_concepts, relevant_dim))
            ok = all(
                np.linalg.norm(means[i] - means[j]) >= min_gap
                for i in range(num_concepts)
                for j in range(i + 1, num_concepts)
            ) and all(
                np.linalg.norm(means[i] - prev) >= min_gap
                for i in range(num_concepts)
                for j, prev_list in enumerate(other_concept_means)
                if j != i
                for prev in prev_list
            )
            if ok:
                return means
            spread *= 1.05
        raise ConfigError("could not place separable cluster means")

    pools: dict = {}
    holdout: dict = {}
    seen_means: list[list[np.ndarray]] = [[] for _ in range(num_concepts)]
    for phase in range(phases):
        means = draw_means(seen_means)
        for i in range(num_concepts):
            seen_means[i].append(means[i])
        for ci, concept in enumerate(concepts):
            def make(split: str, count: int) -> tuple[Instance, ...]:
                feats = rng.normal(0.0, 3.5, size=(count, feature_dim))
                feats[:, list(relevant)] = means[ci] + rng.normal(
                    0.0, 1.0, size=(count, relevant_dim)
                )
                return tuple(
                    Instance(
                        id=f"{split[0]}{phase}_{concept.id}_{k:03d}",
                        features=tuple(float(v) for v in feats[k]),
                        true_labels=frozenset({concept.id}),
                    )
                    for k in range(count)
                )

            pools[(concept.id, phase)] = make(TRAIN_SPLIT, instances_per_phase)
            holdout[(concept.id, phase)] = make(HOLDOUT_SPLIT, holdout_per_phase)

    return TaskDataset(
        concepts=concepts,
        pools=pools,
        holdout=holdout,
        feature_dim=feature_dim,
        noise_sigma=noise_sigma,
        num_phases=phases,
    )


class SceneStream:
    """Scene sequence for one episode: refresh every ``change_period`` turns.

    Between refreshes the previous scene is returned verbatim (the same
    object). The phase advances one step per refresh, wrapping
    cyclically. Observation noise is drawn fresh per refresh.
    """

    def __init__(self, dataset: TaskDataset, config: EpisodeConfig):
        self.dataset = dataset
        self.change_period = config.scene_change_period
        self.scene_size = config.scene_size
        self.seed = config.seed
        self._cache: dict[int, Scene] = {}

    def refresh_index(self, turn: int) -> int:
        return (turn - 1) // self.change_period

    def phase_for_turn(self, turn: int) -> int:
        return self.refresh_index(turn) % self.dataset.num_phases

    def scene_for_turn(self, turn: int) -> Scene:
        if turn < 1:
            raise ContractViolation("turns are 1-based")
        idx = self.refresh_index(turn)
        scene = self._cache.get(idx)
        if scene is None:
            scene = self._build(idx)
            self._cache[idx] = scene
        return scene

    def _build(self, refresh_idx: int) -> Scene:
        rng = seeding.derive(self.seed, seeding.SCENE, refresh_idx)
        phase = refresh_idx % self.dataset.num_phases
        concepts = self.dataset.concepts
        instances = []
        for slot in range(self.scene_size):
            concept = concepts[int(rng.integers(len(concepts)))]
            pool = self.dataset.pool(concept.id, phase)
            base = pool[int(rng.integers(len(pool)))]
            noisy = base.array + rng.normal(0.0, self.dataset.noise_sigma, self.dataset.feature_dim)
            instances.append(
                Instance(
                    id=f"s{refresh_idx}_{slot:02d}",
                    features=tuple(float(v) for v in noisy),
                    true_labels=base.true_labels,
                )
            )
        return Scene(turn=refresh_idx * self.change_period + 1, instances=tuple(instances))


class SimulatedTeacher:
    """Ground-truth oracle for the three query types.

    Answers are a pure function of (seed, turn, query), so replaying a
    logged action sequence reproduces the episode exactly.
    """

    def __init__(self, dataset: TaskDataset, config: EpisodeConfig):
        self.dataset = dataset
        self.seed = config.seed
        self.change_period = config.scene_change_period

    def answer(self, scene: Scene, action: Action, turn: int) -> OracleAnswer:
        if not action.is_query:
            raise ContractViolation("the oracle only answers queries")
        if action.kind is ActionKind.LABEL_QUERY:
            inst = scene.by_id(action.instance_id)
            return LabelAnswer(self.dataset.priority_label(inst))
        if action.kind is ActionKind.FEATURE_SUBSET_QUERY:
            subset = self.dataset.relevant_union()
            if not subset:
                subset = tuple(range(self.dataset.feature_dim))
            return FeatureSubsetAnswer(subset)

        # Demo query: a true positive from the scene if one exists, else
        # a fresh noisy observation from the active phase's pool.
        rng = seeding.derive(self.seed, seeding.ORACLE, turn)
        concept_id = action.concept_id
        in_scene = [inst for inst in scene.instances if concept_id in inst.true_labels]
        if in_scene:
            chosen = in_scene[int(rng.integers(len(in_scene)))]
            return DemoAnswer(chosen, concept_id)
        phase = ((turn - 1) // self.change_period) % self.dataset.num_phases
        pool = self.dataset.pool(concept_id, phase)
        if not pool:
            raise OracleError(f"no positive instance of {concept_id!r} anywhere")
        base = pool[int(rng.integers(len(pool)))]
        noisy = base.array + rng.normal(0.0, self.dataset.noise_sigma, self.dataset.feature_dim)
        demo = Instance(
            id=f"{base.id}#demo_t{turn}",
            features=tuple(float(v) for v in noisy),
            true_labels=base.true_labels,
        )
        return DemoAnswer(demo, concept_id)


# --- Task files -----------------------------------------------------------
#
# concepts.json: {"v": 1, "concepts": [{"id", "relevant_features", "priority"}]}
# meta.json:     {"v": 1, "feature_dim", "noise_sigma", "num_phases"}
# pool.csv:      instance_id, phase, concept_id, split, f_0..f_{m-1}


def save_task(dataset: TaskDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    concepts_doc = {
        "v": 1,
        "concepts": [
            {
                "id": c.id,
                "relevant_features": sorted(c.relevant_features) if c.relevant_features else None,
                "priority": c.priority,
            }
            for c in dataset.concepts
        ],
    }
    (directory / "concepts.json").write_text(json.dumps(concepts_doc, indent=2))
    meta_doc = {
        "v": 1,
        "feature_dim": dataset.feature_dim,
        "noise_sigma": dataset.noise_sigma,
        "num_phases": dataset.num_phases,
    }
    (directory / "meta.json").write_text(json.dumps(meta_doc, indent=2))
    with open(directory / "pool.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["instance_id", "phase", "concept_id", "split"]
            + [f"f_{j}" for j in range(dataset.feature_dim)]
        )
        for split, table in ((TRAIN_SPLIT, dataset.pools), (HOLDOUT_SPLIT, dataset.holdout)):
            for phase in range(dataset.num_phases):
                for c in dataset.concepts:
                    for inst in table.get((c.id, phase), ()):
                        writer.writerow(
                            [inst.id, phase, c.id, split] + [repr(v) for v in inst.features]
                        )


def load_task(directory: str | Path) -> TaskDataset:
    directory = Path(directory)
    try:
        concepts_doc = json.loads((directory / "concepts.json").read_text())
        meta_doc = json.loads((directory / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"missing task file: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed task json: {exc}") from exc

    concepts = tuple(
        Concept(
            id=c["id"],
            relevant_features=(
                frozenset(c["relevant_features"]) if c.get("relevant_features") else None
            ),
            priority=int(c.get("priority", i)),
        )
        for i, c in enumerate(concepts_doc.get("concepts", []))
    )
    if not concepts:
        raise DatasetFormatError("concepts.json declares no concepts")
    feature_dim = int(meta_doc["feature_dim"])
    num_phases = int(meta_doc["num_phases"])
    known = {c.id for c in concepts}

    pools: dict = {}
    holdout: dict = {}
    seen_ids: set[str] = set()
    with open(directory / "pool.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["instance_id", "phase", "concept_id", "split"] + [
            f"f_{j}" for j in range(feature_dim)
        ]
        if header != expected:
            raise DatasetFormatError(
                f"pool.csv header mismatch; expected {len(expected)} columns", row=1
            )
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DatasetFormatError("missing feature column", row=row_no)
            inst_id, phase_s, concept_id, split = row[:4]
            if concept_id not in known:
                raise DatasetFormatError(f"unknown concept id {concept_id!r}", row=row_no)
            if inst_id in seen_ids:
                raise DatasetFormatError(f"duplicate instance id {inst_id!r}", row=row_no)
            seen_ids.add(inst_id)
            try:
                phase = int(phase_s)
                features = tuple(float(v) for v in row[4:])
            except ValueError as exc:
                raise DatasetFormatError(str(exc), row=row_no) from exc
            if split not in (TRAIN_SPLIT, HOLDOUT_SPLIT):
                raise DatasetFormatError(f"unknown split {split!r}", row=row_no)
            inst = Instance(id=inst_id, features=features, true_labels=frozenset({concept_id}))
            table = pools if split == TRAIN_SPLIT else holdout
            table.setdefault((concept_id, phase), [])
            table[(concept_id, phase)].append(inst)

    pools = {k: tuple(v) for k, v in pools.items()}
    holdout = {k: tuple(v) for k, v in holdout.items()}
    return TaskDataset(
        concepts=concepts,
        pools=pools,
        holdout=holdout,
        feature_dim=feature_dim,
        noise_sigma=float(meta_doc.get("noise_sigma", 0.0)),
        num_phases=num_phases,
    )
