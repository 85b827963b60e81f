"""Session-oriented HTTP API for live episodes.

Two interactive modes: in *demonstrate* mode a human expert picks the
learner's action each turn (the simulated teacher answers), producing
demonstration trajectories for IRL; in *teach* mode the strategy picks
actions and the human answers its queries. *observe* mode just steps a
fully simulated episode.

Every mutation carries a turn token (optimistic concurrency) and every
applied turn is appended to the session's file on disk, so a lost
browser tab cannot lose a demonstration: the server restores sessions
from disk by deterministic replay.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .domain import (
    Action,
    ActionKind,
    DemoAnswer,
    EpisodeConfig,
    FeatureSubsetAnswer,
    LabelAnswer,
    NoAnswer,
    OracleAnswer,
    Scene,
    candidate_actions,
)
from .envsim import TaskDataset
from .episode import (
    EpisodeEngine,
    config_from_dict,
    config_to_dict,
    trajectory_to_lines,
)
from .errors import ConfigError, ContractViolation, EngineError
from .features import WeightVector
from .gpc import make_classifier_factory
from .strategies import action_utilities, make_policy

MODES = ("demonstrate", "teach", "observe")


class CreateSessionRequest(BaseModel):
    task: str
    mode: str
    config: dict
    strategy: str = "dt-task-env"
    weights: dict[str, float] | None = None
    idempotency_key: str | None = None


class ActionPayload(BaseModel):
    kind: str
    arg: str | None = None


class DemonstrateRequest(BaseModel):
    turn_token: int
    action: ActionPayload


class AnswerPayload(BaseModel):
    kind: str
    concept_id: str | None = None
    instance_id: str | None = None
    feature_subset: list[int] | None = None


class TeachRequest(BaseModel):
    turn_token: int | None = None
    answer: AnswerPayload | None = None


class ObserveRequest(BaseModel):
    turn_token: int


@dataclass
class Session:
    id: str
    mode: str
    task_ref: str
    engine: EpisodeEngine
    strategy_id: str
    path: Path
    lock: threading.Lock = field(default_factory=threading.Lock)
    pending_query: Action | None = None

    @property
    def finished(self) -> bool:
        return self.engine.finished

    @property
    def turn_token(self) -> int:
        return self.engine.state.turn


def _action_from_payload(payload: ActionPayload, session: Session) -> Action:
    try:
        kind = ActionKind(payload.kind)
    except ValueError:
        raise HTTPException(400, f"unknown action kind {payload.kind!r}")
    cost = session.engine.config.cost_of(kind)
    if kind is ActionKind.DEMO_QUERY:
        return Action(kind, concept_id=payload.arg, cost=cost)
    if kind is ActionKind.LABEL_QUERY:
        return Action(kind, instance_id=payload.arg, cost=cost)
    return Action(kind, cost=cost)


def _answer_from_payload(
    payload: AnswerPayload, action: Action, scene: Scene, dataset: TaskDataset
) -> OracleAnswer:
    try:
        kind = ActionKind(payload.kind)
    except ValueError:
        raise HTTPException(400, f"unknown answer kind {payload.kind!r}")
    if kind is not action.kind:
        raise HTTPException(400, f"answer kind {payload.kind!r} does not match pending query")
    if kind is ActionKind.LABEL_QUERY:
        if payload.concept_id not in dataset.concept_ids:
            raise HTTPException(400, f"unknown concept {payload.concept_id!r}")
        return LabelAnswer(payload.concept_id)
    if kind is ActionKind.DEMO_QUERY:
        if payload.instance_id is None:
            raise HTTPException(400, "demo answer needs an instance_id from the scene")
        try:
            inst = scene.by_id(payload.instance_id)
        except ContractViolation:
            raise HTTPException(400, f"instance {payload.instance_id!r} is not in the scene")
        return DemoAnswer(inst, action.concept_id)
    if kind is ActionKind.FEATURE_SUBSET_QUERY:
        subset = payload.feature_subset or []
        if not subset or any(i < 0 or i >= dataset.feature_dim for i in subset):
            raise HTTPException(400, "feature subset indices out of range")
        return FeatureSubsetAnswer(subset)
    return NoAnswer()


def _answer_to_doc(answer: OracleAnswer) -> dict:
    if answer.kind is ActionKind.LABEL_QUERY:
        return {"kind": "lq", "concept_id": answer.concept_id}
    if answer.kind is ActionKind.DEMO_QUERY:
        return {
            "kind": "dq",
            "concept_id": answer.concept_id,
            "instance": {
                "id": answer.instance.id,
                "features": list(answer.instance.features),
                "true_labels": sorted(answer.instance.true_labels),
            },
        }
    if answer.kind is ActionKind.FEATURE_SUBSET_QUERY:
        return {"kind": "fsq", "feature_subset": list(answer.feature_subset)}
    return {"kind": "nq"}


def _answer_from_doc(doc: dict, scene: Scene, action: Action) -> OracleAnswer:
    kind = ActionKind(doc["kind"])
    if kind is ActionKind.LABEL_QUERY:
        return LabelAnswer(doc["concept_id"])
    if kind is ActionKind.DEMO_QUERY:
        from .domain import Instance

        inst_doc = doc["instance"]
        inst = Instance(
            id=inst_doc["id"],
            features=tuple(inst_doc["features"]),
            true_labels=frozenset(inst_doc["true_labels"]),
        )
        return DemoAnswer(inst, doc["concept_id"])
    if kind is ActionKind.FEATURE_SUBSET_QUERY:
        return FeatureSubsetAnswer(doc["feature_subset"])
    return NoAnswer()


class SessionStore:
    def __init__(self, tasks: dict[str, TaskDataset], sessions_dir: str | Path, classifier: str):
        self.tasks = tasks
        self.dir = Path(sessions_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.classifier = classifier
        self.sessions: dict[str, Session] = {}
        self.idempotency: dict[str, str] = {}
        self._lock = threading.Lock()

    def create(self, req: CreateSessionRequest) -> Session:
        if req.mode not in MODES:
            raise HTTPException(400, f"mode must be one of {MODES}")
        if req.task not in self.tasks:
            raise HTTPException(404, f"unknown task {req.task!r}")
        with self._lock:
            if req.idempotency_key and req.idempotency_key in self.idempotency:
                return self.sessions[self.idempotency[req.idempotency_key]]
            try:
                config_doc = dict(req.config)
                if int(config_doc.get("budget", 0)) < 1:
                    raise ConfigError("budget must be >= 1")
                config = EpisodeConfig(
                    budget=int(config_doc["budget"]),
                    time_allocation=int(config_doc["time_allocation"]),
                    scene_change_period=int(config_doc.get("scene_change_period", 10)),
                    window_size=config_doc.get("window_size"),
                    strategy_id=req.strategy,
                    seed=int(config_doc.get("seed", 0)),
                    scene_size=int(config_doc.get("scene_size", 8)),
                )
            except (KeyError, ValueError, ConfigError) as exc:
                raise HTTPException(400, f"invalid config: {exc}")
            weights = WeightVector.from_mapping(req.weights) if req.weights else None
            policy = None
            if req.mode in ("teach", "observe"):
                policy = make_policy(req.strategy, weights)
            engine = EpisodeEngine(
                self.tasks[req.task],
                config,
                policy=policy,
                classifier_factory=make_classifier_factory(self.classifier, self.tasks[req.task]),
            )
            session = Session(
                id=uuid.uuid4().hex[:12],
                mode=req.mode,
                task_ref=req.task,
                engine=engine,
                strategy_id=req.strategy,
                path=self.dir / f"{uuid.uuid4().hex[:12]}.jsonl",
            )
            session.path = self.dir / f"{session.id}.jsonl"
            header = {
                "v": 1,
                "kind": "session",
                "session_id": session.id,
                "mode": session.mode,
                "task": session.task_ref,
                "strategy": session.strategy_id,
                "classifier": self.classifier,
                "config": config_to_dict(config),
            }
            session.path.write_text(json.dumps(header, sort_keys=True) + "\n")
            self.sessions[session.id] = session
            if req.idempotency_key:
                self.idempotency[req.idempotency_key] = session.id
            return session

    def get(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            session = self._restore(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return session

    def _restore(self, session_id: str) -> Session | None:
        path = self.dir / f"{session_id}.jsonl"
        if not path.exists():
            return None
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        config = config_from_dict(header["config"])
        weights = None
        policy = None
        if header["mode"] in ("teach", "observe"):
            policy = make_policy(header["strategy"], weights)
        engine = EpisodeEngine(
            self.tasks[header["task"]],
            config,
            policy=policy,
            classifier_factory=make_classifier_factory(
                header.get("classifier", self.classifier), self.tasks[header["task"]]
            ),
        )
        session = Session(
            id=session_id,
            mode=header["mode"],
            task_ref=header["task"],
            engine=engine,
            strategy_id=header["strategy"],
            path=path,
        )
        for line in lines[1:]:
            doc = json.loads(line)
            scene = engine.observe()
            payload = ActionPayload(kind=doc["action"]["kind"], arg=doc["action"]["arg"])
            action = _action_from_payload(payload, session)
            answer = _answer_from_doc(doc["answer"], scene, action)
            engine.apply(scene, action, answer)
        self.sessions[session_id] = session
        return session

    def persist_turn(self, session: Session, action: Action, answer: OracleAnswer, step) -> None:
        record = {
            "v": 1,
            "turn": step.turn,
            "action": {"kind": action.kind.value, "arg": action.arg},
            "answer": _answer_to_doc(answer),
            "phi": [float(x) for x in step.phi.as_array()],
            "cost": step.cost,
            "cumCost": step.cum_cost,
            "accuracy": step.accuracy,
        }
        with open(session.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _scene_doc(scene: Scene, include_labels: bool) -> dict:
    instances = []
    for inst in scene.instances:
        doc = {
            "id": inst.id,
            "features": list(inst.features),
            "summary": {
                "mean": float(sum(inst.features) / len(inst.features)),
                "min": float(min(inst.features)),
                "max": float(max(inst.features)),
            },
        }
        if include_labels:
            doc["true_labels"] = sorted(inst.true_labels)
        instances.append(doc)
    return {"turn": scene.turn, "instances": instances}


def _session_doc(session: Session, include_scene: bool = True) -> dict:
    engine = session.engine
    state = engine.state
    doc = {
        "v": 1,
        "session_id": session.id,
        "mode": session.mode,
        "task": session.task_ref,
        "strategy": session.strategy_id,
        "status": "finished" if session.finished else "active",
        "turn_token": session.turn_token,
        "turn": state.turn,
        "time_total": state.time_total,
        "budget_total": state.budget_total,
        "budget_spent": state.budget_spent,
        "fsq_answered": state.fsq_answered,
        "active_feature_subset": (
            list(state.active_feature_subset) if state.active_feature_subset else None
        ),
        "accuracy": engine._accuracy,
        "concepts": list(engine.dataset.concept_ids),
        "history": [
            {"turn": h.turn, "kind": h.action.kind.value, "summary": h.summary}
            for h in state.history
        ],
    }
    if include_scene and not session.finished:
        scene = engine.observe()
        doc["scene"] = _scene_doc(scene, include_labels=session.mode == "demonstrate")
        doc["phi"] = [float(x) for x in engine.phi(scene).as_array()]
    return doc


def _candidates_doc(session: Session) -> list[dict]:
    engine = session.engine
    scene = engine.observe()
    if session.mode == "demonstrate" and session.strategy_id != "u-sampling":
        from .strategies import build_strategy

        strategy = build_strategy(session.strategy_id)
        scored = action_utilities(engine.state, scene, engine.ensemble, strategy, engine.ctx)
        return [
            {"kind": a.kind.value, "arg": a.arg, "cost": a.cost, "eu": float(eu)}
            for a, eu in scored
        ]
    actions = candidate_actions(engine.state, scene, engine.dataset.concepts, engine.ctx.costs)
    return [{"kind": a.kind.value, "arg": a.arg, "cost": a.cost, "eu": None} for a in actions]


def _advance_teach(store: SessionStore, session: Session) -> None:
    """Run the strategy until it wants human input or the episode ends."""
    engine = session.engine
    while not engine.finished and session.pending_query is None:
        scene = engine.observe()
        action = engine.select_action(scene)
        if action.is_query:
            session.pending_query = action
            return
        step = engine.apply(scene, action, NoAnswer())
        store.persist_turn(session, action, NoAnswer(), step)


def _pending_doc(session: Session) -> dict | None:
    if session.pending_query is None:
        return None
    action = session.pending_query
    return {
        "kind": action.kind.value,
        "arg": action.arg,
        "cost": action.cost,
        "turn_token": session.turn_token,
    }


def create_app(
    tasks: dict[str, TaskDataset],
    sessions_dir: str | Path,
    classifier: str = "gp",
) -> FastAPI:
    app = FastAPI(title="enval service", version="1")
    store = SessionStore(tasks, sessions_dir, classifier)
    app.state.store = store

    @app.get("/health")
    def health():
        return {"v": 1, "status": "ok"}

    @app.get("/v1/tasks")
    def list_tasks():
        return {
            "v": 1,
            "tasks": [
                {
                    "id": ref,
                    "concepts": list(ds.concept_ids),
                    "feature_dim": ds.feature_dim,
                    "num_phases": ds.num_phases,
                }
                for ref, ds in sorted(tasks.items())
            ],
        }

    @app.post("/v1/sessions")
    def create_session(req: CreateSessionRequest):
        session = store.create(req)
        if session.mode == "teach":
            with session.lock:
                _advance_teach(store, session)
        doc = _session_doc(session)
        doc["candidates"] = _candidates_doc(session) if session.mode == "demonstrate" else None
        doc["pending_query"] = _pending_doc(session)
        return doc

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        session = store.get(session_id)
        doc = _session_doc(session)
        doc["pending_query"] = _pending_doc(session)
        return doc

    @app.get("/v1/sessions/{session_id}/candidates")
    def get_candidates(session_id: str):
        session = store.get(session_id)
        if session.finished:
            raise HTTPException(409, "session is finished")
        return {"v": 1, "turn_token": session.turn_token, "candidates": _candidates_doc(session)}

    @app.post("/v1/sessions/{session_id}/demonstrate")
    def step_demonstrate(session_id: str, req: DemonstrateRequest):
        session = store.get(session_id)
        if session.mode != "demonstrate":
            raise HTTPException(409, "session is not in demonstrate mode")
        with session.lock:
            if session.finished:
                raise HTTPException(409, "session is finished")
            if req.turn_token != session.turn_token:
                raise HTTPException(
                    409, f"turn token {req.turn_token} is stale (now {session.turn_token})"
                )
            engine = session.engine
            scene = engine.observe()
            action = _action_from_payload(req.action, session)
            legal = candidate_actions(engine.state, scene, engine.dataset.concepts, engine.ctx.costs)
            if action not in legal:
                raise HTTPException(400, f"action {action.describe()} is not currently legal")
            answer = engine.answer_for(scene, action)
            step = engine.apply(scene, action, answer)
            store.persist_turn(session, action, answer, step)
            doc = _session_doc(session)
            doc["answer"] = _answer_to_doc(answer)
            doc["phi"] = [float(x) for x in step.phi.as_array()]
            doc["candidates"] = _candidates_doc(session) if not session.finished else None
            return doc

    @app.post("/v1/sessions/{session_id}/teach")
    def step_teach(session_id: str, req: TeachRequest):
        session = store.get(session_id)
        if session.mode != "teach":
            raise HTTPException(409, "session is not in teach mode")
        with session.lock:
            if req.answer is not None:
                if session.pending_query is None:
                    raise HTTPException(409, "no query is pending")
                if req.turn_token != session.turn_token:
                    raise HTTPException(
                        409, f"turn token {req.turn_token} is stale (now {session.turn_token})"
                    )
                engine = session.engine
                scene = engine.observe()
                action = session.pending_query
                answer = _answer_from_payload(req.answer, action, scene, engine.dataset)
                step = engine.apply(scene, action, answer)
                store.persist_turn(session, action, answer, step)
                session.pending_query = None
            _advance_teach(store, session)
            doc = _session_doc(session)
            doc["pending_query"] = _pending_doc(session)
            return doc

    @app.post("/v1/sessions/{session_id}/step")
    def step_observe(session_id: str, req: ObserveRequest):
        session = store.get(session_id)
        if session.mode != "observe":
            raise HTTPException(409, "session is not in observe mode")
        with session.lock:
            if session.finished:
                raise HTTPException(409, "session is finished")
            if req.turn_token != session.turn_token:
                raise HTTPException(
                    409, f"turn token {req.turn_token} is stale (now {session.turn_token})"
                )
            engine = session.engine
            scene = engine.observe()
            action = engine.select_action(scene)
            answer = engine.answer_for(scene, action)
            step = engine.apply(scene, action, answer)
            store.persist_turn(session, action, answer, step)
            return _session_doc(session)

    @app.get("/v1/sessions/{session_id}/trajectory")
    def export_trajectory(session_id: str):
        session = store.get(session_id)
        if not session.finished:
            raise HTTPException(409, "session is still active")
        lines = trajectory_to_lines(session.engine.trajectory())
        from fastapi.responses import PlainTextResponse

        return PlainTextResponse("\n".join(lines) + "\n", media_type="application/x-ndjson")

    @app.exception_handler(EngineError)
    def engine_error_handler(request, exc: EngineError):
        from fastapi.responses import JSONResponse

        status = 400 if isinstance(exc, (ContractViolation, ConfigError)) else 500
        return JSONResponse(status_code=status, content={"v": 1, "error": str(exc)})

    return app
