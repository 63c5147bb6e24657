"""HTTP session service: live multi-round conversations over the core package.

Each session owns one conversation driven by a named policy. The client posts
feedback for the pending turn and receives the next turn, or a closing summary
once the conversation ends. Sessions are in-memory with a TTL and per-session
locks; an Idempotency-Token header makes feedback posts safely retryable.
"""
from __future__ import annotations

import json
import threading
import time
import uuid
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping

from fastapi import FastAPI, Header, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .data import Bundle, Catalog, DatasetSplit
from .env import (
    Ask,
    ContractViolation,
    ConversationState,
    Feedback,
    Recommend,
    ResultId,
    Verdict,
    step_ask,
    step_recommend,
    init_conversation,
    record_round,
)
from .evaluation import (
    BuntAllPolicy,
    BuntLearnPolicy,
    FmAllPolicy,
    FmLearnPolicy,
    FreqPolicy,
    OraclePolicy,
    RandomPolicy,
    RecommenderPolicy,
    bundle_metrics,
    choose_action,
    train_fm,
)
from .model import CheckpointError, load_checkpoint
from .simulator import SimulatedUser, respond

SESSION_POLICIES = (
    "random", "freq", "oracle", "fm-all", "fm-learn", "bunt-all", "bunt-learn",
)
DEFAULT_TTL_SECONDS = 30 * 60


# ---------------------------------------------------------------------------
# Wire models
# ---------------------------------------------------------------------------

class CreateSessionRequest(BaseModel):
    user_id: int | Literal["fresh"] = "fresh"
    policy: str = "bunt-learn"
    checkpoint: str | None = None
    target: list[int] | None = None  # enables auto feedback and final metrics
    k: int | None = Field(default=None, ge=1)  # default: checkpoint config, else 2
    max_rounds: int = Field(default=10, ge=1)


class FeedbackRequest(BaseModel):
    items: Mapping[int, str] | None = None
    attributes: Mapping[int, str] | None = None
    categories: Mapping[int, str] | None = None
    satisfied: bool = False
    auto: bool = False  # ask the built-in simulated user (needs a target)


class TurnModel(BaseModel):
    kind: Literal["RECOMMEND", "ASK"]
    round: int
    slots: list[dict]


class SessionCreated(BaseModel):
    session_id: str
    user_id: int | str
    policy: str
    first_turn: TurnModel


# ---------------------------------------------------------------------------
# Session bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class Session:
    session_id: str
    user_label: int | str
    policy_name: str
    policy: RecommenderPolicy
    state: ConversationState
    target: Bundle | None
    sim: SimulatedUser | None
    pending: Recommend | Ask | None = None
    done: bool = False
    summary: dict | None = None
    trajectory: list = field(default_factory=list)
    replays: dict[str, dict] = field(default_factory=dict)
    last_access: float = field(default_factory=time.monotonic)
    lock: threading.Lock = field(default_factory=threading.Lock)


def _turn_json(
    action: Recommend | Ask,
    round_no: int,
    catalog: Catalog,
    labels: Mapping[str, Mapping[int, str]] | None = None,
) -> dict:
    """Wire form of a pending turn; item cards carry their tags, and labels
    replace bare ids when a label table covers them."""
    names = labels or {}

    def tag(kind: str, idx: int, card: dict, key: str) -> None:
        label = names.get(kind, {}).get(idx)
        if label is not None:
            card[key] = label

    if isinstance(action, Recommend):
        slots = []
        for s, i in sorted(action.proposals.items()):
            card = {
                "slot": s,
                "item": i,
                "attrs": sorted(catalog.attributes_of[i]),
                "cats": sorted(catalog.categories_of[i]),
            }
            tag("items", i, card, "item_label")
            slots.append(card)
        return {"kind": "RECOMMEND", "round": round_no, "slots": slots}
    slots = []
    for s, (a, c) in sorted(action.questions.items()):
        card = {"slot": s, "attr": a, "cat": c}
        tag("attributes", a, card, "attr_label")
        tag("categories", c, card, "cat_label")
        slots.append(card)
    return {"kind": "ASK", "round": round_no, "slots": slots}


def _next_action(session: Session) -> Recommend | Ask | None:
    # same mode-fallback rules as the offline harness, by construction
    return choose_action(session.policy, session.state)


def _close(session: Session, reason: str) -> dict:
    state = session.state
    success = bool(state.result_log) and state.result_log[-1] == ResultId.BUNDLE_SUC
    summary = {
        "reason": reason,
        "rounds": state.round - 1,
        "accepted_bundle": sorted(state.accepted_bundle),
        "result_log": [r.value for r in state.result_log],
        "success": success,
        "metrics": (
            bundle_metrics(state.accepted_bundle, session.target).as_dict()
            if session.target is not None else None
        ),
    }
    session.done = True
    session.pending = None
    session.summary = summary
    return summary


# ---------------------------------------------------------------------------
# App factory
# ---------------------------------------------------------------------------

def create_app(
    catalog: Catalog,
    split: DatasetSplit,
    checkpoint_path: str | Path | None = None,
    ttl_seconds: float = DEFAULT_TTL_SECONDS,
    trajectory_dir: str | Path | None = None,
    labels: Mapping[str, Mapping[int, str]] | None = None,
) -> FastAPI:
    """Build the service around one catalog and split.

    ``checkpoint_path`` is the default network for the bunt-* and fm-learn
    policies; requests may name their own. With ``trajectory_dir`` set, every
    finished session is written there as one JSON file. ``labels`` optionally
    maps "items"/"attributes"/"categories" id tables to display names.
    """
    app = FastAPI(title="convbundle session service")
    # the browser console is served from its own origin during development
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    caches: dict = {"checkpoints": {}, "fm": None, "freq_ranking": None, "births": 0}

    def turn_json(action: Recommend | Ask, round_no: int) -> dict:
        return _turn_json(action, round_no, catalog, labels)

    def load_model(path: str | Path | None):
        path = Path(path) if path is not None else None
        if path is None:
            if checkpoint_path is None:
                raise HTTPException(
                    status_code=422,
                    detail="this policy needs a checkpoint and none is configured",
                )
            path = Path(checkpoint_path)
        key = str(path)
        if key not in caches["checkpoints"]:
            if not path.exists():
                raise HTTPException(status_code=404,
                                    detail=f"no checkpoint at {path}")
            try:
                model = load_checkpoint(path)
            except CheckpointError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            if model.n_items != catalog.n_items:
                raise HTTPException(
                    status_code=422,
                    detail=f"checkpoint covers {model.n_items} items, catalog has "
                           f"{catalog.n_items}",
                )
            caches["checkpoints"][key] = model
        return caches["checkpoints"][key]

    def fm_model():
        if caches["fm"] is None:
            caches["fm"] = train_fm(split, catalog, seed=0)
        return caches["fm"]

    def build_policy(name: str, checkpoint: str | None,
                     targets: Mapping[int, Bundle]) -> RecommenderPolicy:
        if name == "random":
            caches["births"] += 1
            return RandomPolicy(seed=caches["births"])
        if name == "freq":
            return FreqPolicy(split, catalog)
        if name == "oracle":
            return OraclePolicy(targets)
        if name == "fm-all":
            return FmAllPolicy(fm_model())
        if name == "fm-learn":
            return FmLearnPolicy(fm_model(), load_model(checkpoint))
        if name == "bunt-all":
            return BuntAllPolicy(load_model(checkpoint))
        if name == "bunt-learn":
            return BuntLearnPolicy(load_model(checkpoint))
        raise HTTPException(
            status_code=422,
            detail=f"unknown policy {name!r}; choose one of {', '.join(SESSION_POLICIES)}",
        )

    def fresh_history() -> list[Bundle]:
        if caches["freq_ranking"] is None:
            bundles = [b for bs in split.offline_histories.values() for b in bs]
            counts = Counter(tuple(b.sorted_items()) for b in bundles)
            best = min(counts, key=lambda t: (-counts[t], t))
            caches["freq_ranking"] = Bundle.of(best)
        return [caches["freq_ranking"]]

    def purge_expired() -> None:
        now = time.monotonic()
        with registry_lock:
            dead = [sid for sid, s in sessions.items()
                    if now - s.last_access > ttl_seconds]
            for sid in dead:
                del sessions[sid]

    def get_session(session_id: str) -> Session:
        purge_expired()
        with registry_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id!r}")
        session.last_access = time.monotonic()
        return session

    def persist(session: Session) -> None:
        if trajectory_dir is None:
            return
        out = Path(trajectory_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "session_id": session.session_id,
            "user": session.user_label,
            "policy": session.policy_name,
            "summary": session.summary,
            "rounds": [r.to_json() for r in session.trajectory],
        }
        (out / f"{session.session_id}.json").write_text(json.dumps(payload, indent=2))

    @app.get("/healthz")
    def healthz() -> dict:
        purge_expired()
        with registry_lock:
            return {"status": "ok", "sessions": len(sessions)}

    @app.post("/sessions", response_model=SessionCreated, status_code=201)
    def create_session(body: CreateSessionRequest) -> SessionCreated:
        purge_expired()
        if body.policy not in SESSION_POLICIES:
            raise HTTPException(
                status_code=422,
                detail=f"unknown policy {body.policy!r}; choose one of "
                       f"{', '.join(SESSION_POLICIES)}",
            )
        target = None
        if body.target is not None:
            bad = [i for i in body.target if not 0 <= i < catalog.n_items]
            if bad or not body.target:
                raise HTTPException(status_code=422,
                                    detail=f"target items out of range: {bad}")
            target = Bundle.of(body.target)
        if body.user_id == "fresh":
            user, history = -1, fresh_history()
        else:
            user = body.user_id
            if user not in split.offline_histories:
                raise HTTPException(status_code=404, detail=f"unknown user {user}")
            history = list(split.offline_histories[user])
        targets = dict(split.targets)
        if target is not None:
            targets[user] = target
        if body.policy == "oracle" and user not in targets:
            raise HTTPException(status_code=422,
                                detail="oracle sessions need a known or declared target")
        policy = build_policy(body.policy, body.checkpoint, targets)
        k = body.k
        if k is None:
            # network-backed sessions inherit K from the checkpoint's config
            if body.policy in ("bunt-all", "bunt-learn", "fm-learn"):
                k = load_model(body.checkpoint).hp.k
            else:
                k = 2
        state = init_conversation(
            user=user, history=history, catalog=catalog,
            k=k, max_rounds=body.max_rounds,
        )
        session = Session(
            session_id=uuid.uuid4().hex,
            user_label=body.user_id,
            policy_name=body.policy,
            policy=policy,
            state=state,
            target=target if target is not None else (
                split.targets.get(user) if body.user_id != "fresh" else None
            ),
            sim=None,
        )
        if session.target is not None:
            session.sim = SimulatedUser(session.target, catalog)
        policy.begin(state)
        action = _next_action(session)
        if action is None:
            raise HTTPException(status_code=500, detail="no feasible opening action")
        session.pending = action
        with registry_lock:
            sessions[session.session_id] = session
        return SessionCreated(
            session_id=session.session_id,
            user_id=body.user_id,
            policy=body.policy,
            first_turn=TurnModel(**turn_json(action, state.round)),
        )

    def parse_feedback(session: Session, body: FeedbackRequest) -> Feedback:
        action = session.pending
        active = set(session.state.active_slots)
        if body.auto:
            if session.sim is None:
                raise HTTPException(
                    status_code=422,
                    detail="auto feedback needs a session with a declared target",
                )
            return respond(session.state, action, session.sim)

        def verdicts(raw: Mapping[int, str] | None, kind: str) -> dict[int, Verdict]:
            if raw is None:
                raise HTTPException(status_code=422,
                                    detail=f"{kind} verdicts are required for this turn")
            try:
                parsed = {int(s): Verdict(v.upper()) for s, v in raw.items()}
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            if set(parsed) != active:
                raise HTTPException(
                    status_code=422,
                    detail=f"{kind} verdicts must cover exactly the active slots "
                           f"{sorted(active)}",
                )
            return parsed

        if isinstance(action, Recommend):
            if body.attributes is not None or body.categories is not None:
                raise HTTPException(
                    status_code=422,
                    detail="this turn proposed items; send item verdicts, not tag verdicts",
                )
            items = verdicts(body.items, "item")
            satisfied = body.satisfied
            if session.target is not None:
                accepted_now = {
                    action.proposals[s] for s, v in items.items() if v == Verdict.ACCEPT
                }
                satisfied = satisfied or set(session.target) <= (
                    set(session.state.accepted_bundle) | accepted_now
                )
            return Feedback(items=items, satisfied=satisfied)
        if body.items is not None:
            raise HTTPException(
                status_code=422,
                detail="this turn asked questions; send tag verdicts, not item verdicts",
            )
        return Feedback(
            attributes=verdicts(body.attributes, "attribute"),
            categories=verdicts(body.categories, "category"),
            satisfied=False,
        )

    @app.post("/sessions/{session_id}/feedback")
    def post_feedback(
        session_id: str,
        body: FeedbackRequest,
        idempotency_token: str = Header(alias="Idempotency-Token"),
    ) -> dict:
        session = get_session(session_id)
        with session.lock:
            if idempotency_token in session.replays:
                return session.replays[idempotency_token]
            if session.done:
                raise HTTPException(status_code=409, detail="session already finished")
            action = session.pending
            feedback = parse_feedback(session, body)
            try:
                if isinstance(action, Recommend):
                    outcome = step_recommend(session.state, action, feedback)
                else:
                    outcome = step_ask(session.state, action, feedback)
            except ContractViolation as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            rewards = (
                {"item": dict(outcome.rewards)} if isinstance(action, Recommend)
                else {"attr": dict(outcome.attr_rewards),
                      "cat": dict(outcome.cat_rewards)}
            )
            session.trajectory.append(
                record_round(session.state.round, action, feedback,
                             outcome.result, rewards)
            )
            session.state = outcome.state
            if outcome.done:
                response = {"done": True, "summary": _close(session, "finished")}
                persist(session)
            else:
                next_action = _next_action(session)
                if next_action is None:
                    response = {"done": True,
                                "summary": _close(session, "no_feasible_action")}
                    persist(session)
                else:
                    session.pending = next_action
                    response = {
                        "done": False,
                        "turn": turn_json(next_action, session.state.round),
                    }
            session.replays[idempotency_token] = response
            return response

    @app.get("/sessions/{session_id}")
    def get_session_view(session_id: str) -> dict:
        session = get_session(session_id)
        with session.lock:
            state = session.state
            return {
                "session_id": session.session_id,
                "user_id": session.user_label,
                "policy": session.policy_name,
                "round": state.round,
                "done": session.done,
                "active_slots": [
                    {
                        "slot": s,
                        "accepted_attributes": sorted(state.slots[s].accepted_attributes),
                        "accepted_categories": sorted(state.slots[s].accepted_categories),
                    }
                    for s in state.active_slots
                ],
                "accepted_bundle": sorted(state.accepted_bundle),
                "result_log": [r.value for r in state.result_log],
                "trajectory": [r.to_json() for r in session.trajectory],
                "pending_turn": (
                    turn_json(session.pending, state.round)
                    if session.pending is not None else None
                ),
                "summary": session.summary,
            }

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str) -> dict:
        purge_expired()
        with registry_lock:
            if session_id not in sessions:
                raise HTTPException(status_code=404, detail=f"no session {session_id!r}")
            del sessions[session_id]
        return {"deleted": session_id}

    return app
