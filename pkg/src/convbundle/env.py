"""Slot-based conversational recommendation environment.

A conversation keeps K active slots. Each round the system either recommends
one item per slot or asks one (attribute, category) question per slot; user
feedback shrinks candidate pools, closes slots, and grows the accepted bundle.
All transitions are pure: they return a new state and never mutate the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Mapping

from .data import Bundle, Catalog
from .metrics import bundle_metrics

MASK_ITEM = -1  # sentinel: slot has no accepted item yet

DEFAULT_MAX_ROUNDS = 10


class ContractViolation(ValueError):
    """An action or feedback breaks the environment contract."""


class ResultId(str, Enum):
    REC_SUC = "REC_SUC"
    REC_FAIL = "REC_FAIL"
    ASK_SUC = "ASK_SUC"
    ASK_FAIL = "ASK_FAIL"
    BUNDLE_SUC = "BUNDLE_SUC"


class Verdict(str, Enum):
    ACCEPT = "ACCEPT"
    REJECT = "REJECT"
    IGNORE = "IGNORE"


@dataclass(frozen=True)
class SlotContext:
    """One slot's lifetime record: accepted item (or MASK) and accepted tags."""

    slot_id: int
    accepted_item: int = MASK_ITEM
    accepted_attributes: frozenset[int] = frozenset()
    accepted_categories: frozenset[int] = frozenset()
    active: bool = True

    def __post_init__(self) -> None:
        if self.active and self.accepted_item != MASK_ITEM:
            raise ContractViolation(f"active slot {self.slot_id} has an accepted item")
        if not self.active and self.accepted_item == MASK_ITEM:
            raise ContractViolation(f"inactive slot {self.slot_id} has no accepted item")


@dataclass(frozen=True)
class Recommend:
    """One item proposal per active slot; items pairwise distinct."""

    proposals: Mapping[int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "proposals", MappingProxyType(dict(self.proposals)))


@dataclass(frozen=True)
class Ask:
    """One (attribute, category) question per active slot."""

    questions: Mapping[int, tuple[int, int]]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "questions", MappingProxyType({s: (a, c) for s, (a, c) in self.questions.items()})
        )


Action = Recommend | Ask


@dataclass(frozen=True)
class Feedback:
    """Per-slot verdicts for one round.

    ``items`` applies to Recommend actions (ACCEPT/IGNORE); ``attributes`` and
    ``categories`` apply to Ask actions. ``satisfied`` signals that this
    round's acceptances complete the user's intended bundle — the environment
    itself never sees the target, so completion arrives with the feedback.
    """

    items: Mapping[int, Verdict] = field(default_factory=dict)
    attributes: Mapping[int, Verdict] = field(default_factory=dict)
    categories: Mapping[int, Verdict] = field(default_factory=dict)
    satisfied: bool = False


@dataclass(frozen=True)
class ConversationState:
    """Full conversation state; candidate pools derive from blacklists.

    Every slot ever opened stays in ``slots``; ``active_slots`` is the ordered
    id list of the K currently open ones. Item pools are shared across slots
    (universe minus everything proposed minus items hit by rejected tags); tag
    pools additionally subtract the tags already asked in that slot.
    """

    user: int
    history: tuple[Bundle, ...]
    catalog: Catalog
    k: int
    max_rounds: int
    round: int
    slots: Mapping[int, SlotContext]
    active_slots: tuple[int, ...]
    result_log: tuple[ResultId, ...]
    proposed_items: frozenset[int]
    killed_items: frozenset[int]
    rejected_attributes: frozenset[int]
    rejected_categories: frozenset[int]
    asked_attributes: Mapping[int, frozenset[int]]
    asked_categories: Mapping[int, frozenset[int]]

    @property
    def accepted_bundle(self) -> frozenset[int]:
        return frozenset(
            s.accepted_item for s in self.slots.values() if not s.active
        )

    def item_pool(self, slot_id: int) -> frozenset[int]:
        self._check_slot(slot_id)
        return self.catalog.items - self.proposed_items - self.killed_items

    def attr_pool(self, slot_id: int) -> frozenset[int]:
        self._check_slot(slot_id)
        universe = frozenset(range(self.catalog.n_attributes))
        return universe - self.rejected_attributes - self.asked_attributes.get(slot_id, frozenset())

    def cat_pool(self, slot_id: int) -> frozenset[int]:
        self._check_slot(slot_id)
        universe = frozenset(range(self.catalog.n_categories))
        return universe - self.rejected_categories - self.asked_categories.get(slot_id, frozenset())

    def _check_slot(self, slot_id: int) -> None:
        if slot_id not in self.slots or not self.slots[slot_id].active:
            raise ContractViolation(f"slot {slot_id} is not active")

    def opened_slot_ids(self) -> list[int]:
        return sorted(self.slots)


def init_conversation(
    user: int,
    history: tuple[Bundle, ...] | list[Bundle],
    catalog: Catalog,
    k: int,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> ConversationState:
    """Open a conversation with K fresh slots and full candidate pools."""
    if k <= 0:
        raise ContractViolation(f"slot count must be positive, got {k}")
    if not history:
        raise ContractViolation("conversation needs a nonempty interaction history")
    slots = {i: SlotContext(slot_id=i) for i in range(k)}
    return ConversationState(
        user=user,
        history=tuple(history),
        catalog=catalog,
        k=k,
        max_rounds=max_rounds,
        round=1,
        slots=MappingProxyType(slots),
        active_slots=tuple(range(k)),
        result_log=(),
        proposed_items=frozenset(),
        killed_items=frozenset(),
        rejected_attributes=frozenset(),
        rejected_categories=frozenset(),
        asked_attributes=MappingProxyType({}),
        asked_categories=MappingProxyType({}),
    )


@dataclass(frozen=True)
class RecommendOutcome:
    state: ConversationState
    rewards: Mapping[int, int]  # per slot, 1 iff the proposed item was accepted
    result: ResultId
    done: bool


@dataclass(frozen=True)
class AskOutcome:
    state: ConversationState
    attr_rewards: Mapping[int, int]
    cat_rewards: Mapping[int, int]
    result: ResultId
    done: bool


def step_recommend(
    state: ConversationState, action: Recommend, feedback: Feedback
) -> RecommendOutcome:
    """Apply one recommendation round: pool removal, slot closure, refresh."""
    _validate_recommend(state, action)
    _validate_feedback_slots(state, feedback.items, "item")
    for slot_id, verdict in feedback.items.items():
        if verdict is Verdict.REJECT:
            raise ContractViolation("items take ACCEPT/IGNORE verdicts only")

    proposed = frozenset(action.proposals.values())
    slots = dict(state.slots)
    rewards: dict[int, int] = {}
    for slot_id in state.active_slots:
        item = action.proposals[slot_id]
        if feedback.items[slot_id] is Verdict.ACCEPT:
            slots[slot_id] = replace(
                slots[slot_id], accepted_item=item, active=False
            )
            rewards[slot_id] = 1
        else:
            rewards[slot_id] = 0

    any_accept = any(rewards.values())
    if feedback.satisfied:
        result = ResultId.BUNDLE_SUC
    elif any_accept:
        result = ResultId.REC_SUC
    else:
        result = ResultId.REC_FAIL

    next_round = state.round + 1
    done = feedback.satisfied or next_round > state.max_rounds
    new_state = replace(
        state,
        round=next_round,
        slots=MappingProxyType(slots),
        active_slots=tuple(s for s in state.active_slots if slots[s].active),
        result_log=state.result_log + (result,),
        proposed_items=state.proposed_items | proposed,
    )
    if not done:
        new_state = refresh_slots(new_state)
    return RecommendOutcome(state=new_state, rewards=rewards, result=result, done=done)


def step_ask(state: ConversationState, action: Ask, feedback: Feedback) -> AskOutcome:
    """Apply one question round: per-slot tag removal, rejection propagation."""
    _validate_ask(state, action)
    _validate_feedback_slots(state, feedback.attributes, "attribute")
    _validate_feedback_slots(state, feedback.categories, "category")

    slots = dict(state.slots)
    asked_attrs = {s: set(v) for s, v in state.asked_attributes.items()}
    asked_cats = {s: set(v) for s, v in state.asked_categories.items()}
    rejected_attrs = set(state.rejected_attributes)
    rejected_cats = set(state.rejected_categories)
    killed = set(state.killed_items)
    attr_rewards: dict[int, int] = {}
    cat_rewards: dict[int, int] = {}

    for slot_id in state.active_slots:
        attr, cat = action.questions[slot_id]
        asked_attrs.setdefault(slot_id, set()).add(attr)
        asked_cats.setdefault(slot_id, set()).add(cat)

        verdict = feedback.attributes[slot_id]
        attr_rewards[slot_id] = 1 if verdict is Verdict.ACCEPT else 0
        if verdict is Verdict.ACCEPT:
            slots[slot_id] = replace(
                slots[slot_id],
                accepted_attributes=slots[slot_id].accepted_attributes | {attr},
            )
        elif verdict is Verdict.REJECT:
            rejected_attrs.add(attr)
            killed |= state.catalog.items_with_attribute[attr]

        verdict = feedback.categories[slot_id]
        cat_rewards[slot_id] = 1 if verdict is Verdict.ACCEPT else 0
        if verdict is Verdict.ACCEPT:
            slots[slot_id] = replace(
                slots[slot_id],
                accepted_categories=slots[slot_id].accepted_categories | {cat},
            )
        elif verdict is Verdict.REJECT:
            rejected_cats.add(cat)
            killed |= state.catalog.items_with_category[cat]

    any_accept = any(attr_rewards.values()) or any(cat_rewards.values())
    result = ResultId.ASK_SUC if any_accept else ResultId.ASK_FAIL
    next_round = state.round + 1
    done = next_round > state.max_rounds
    new_state = replace(
        state,
        round=next_round,
        slots=MappingProxyType(slots),
        result_log=state.result_log + (result,),
        killed_items=frozenset(killed),
        rejected_attributes=frozenset(rejected_attrs),
        rejected_categories=frozenset(rejected_cats),
        asked_attributes=MappingProxyType({s: frozenset(v) for s, v in asked_attrs.items()}),
        asked_categories=MappingProxyType({s: frozenset(v) for s, v in asked_cats.items()}),
    )
    return AskOutcome(
        state=new_state,
        attr_rewards=attr_rewards,
        cat_rewards=cat_rewards,
        result=result,
        done=done,
    )


def refresh_slots(state: ConversationState) -> ConversationState:
    """Top active slots back up to K with fresh (MASK, empty-tags) slots.

    Fresh slots inherit the shared item pool and the full tag universes minus
    global blacklists, which equals the union of the surviving pools.
    """
    missing = state.k - len(state.active_slots)
    if missing <= 0:
        return state
    next_id = max(state.slots) + 1
    slots = dict(state.slots)
    fresh = []
    for i in range(missing):
        slot_id = next_id + i
        slots[slot_id] = SlotContext(slot_id=slot_id)
        fresh.append(slot_id)
    return replace(
        state,
        slots=MappingProxyType(slots),
        active_slots=state.active_slots + tuple(fresh),
    )


def high_level_reward(
    state: ConversationState, done: bool, target: Bundle, metric: str = "f1"
) -> float:
    """Terminal-only conversation-quality reward: 0 mid-conversation, else the
    chosen bundle metric of the accepted bundle against the target."""
    if not done:
        return 0.0
    report = bundle_metrics(state.accepted_bundle, target)
    if metric == "f1":
        return report.f1
    if metric == "accuracy":
        return report.accuracy
    raise ValueError(f"unknown reward metric {metric!r}")


def is_terminal(state: ConversationState, target: Bundle) -> bool:
    return state.accepted_bundle == target.items or state.round > state.max_rounds


# ---------------------------------------------------------------------------
# Trajectory records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryRound:
    """One serializable round record for dumps, logs, and replay."""

    round: int
    kind: str  # "REC" | "ASK"
    proposals: dict
    feedback: dict
    result: str
    rewards: dict

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "kind": self.kind,
            "proposals": self.proposals,
            "feedback": self.feedback,
            "result": self.result,
            "rewards": self.rewards,
        }


def record_round(
    round_no: int,
    action: Action,
    feedback: Feedback,
    result: ResultId,
    rewards: Mapping[str, Mapping[int, int]],
) -> TrajectoryRound:
    if isinstance(action, Recommend):
        kind = "REC"
        proposals = {str(s): i for s, i in sorted(action.proposals.items())}
        fb = {str(s): feedback.items[s].value for s in sorted(feedback.items)}
    else:
        kind = "ASK"
        proposals = {str(s): list(q) for s, q in sorted(action.questions.items())}
        fb = {
            str(s): [feedback.attributes[s].value, feedback.categories[s].value]
            for s in sorted(feedback.attributes)
        }
    return TrajectoryRound(
        round=round_no,
        kind=kind,
        proposals=proposals,
        feedback=fb,
        result=result.value,
        rewards={k: {str(s): r for s, r in sorted(v.items())} for k, v in rewards.items()},
    )


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

def _check_not_over(state: ConversationState) -> None:
    if state.round > state.max_rounds:
        raise ContractViolation(f"round budget of {state.max_rounds} exhausted")
    if state.result_log and state.result_log[-1] is ResultId.BUNDLE_SUC:
        raise ContractViolation("conversation already ended in bundle success")


def _validate_recommend(state: ConversationState, action: Recommend) -> None:
    _check_not_over(state)
    if set(action.proposals) != set(state.active_slots):
        raise ContractViolation(
            f"proposals cover slots {sorted(action.proposals)}, "
            f"active slots are {sorted(state.active_slots)}"
        )
    items = list(action.proposals.values())
    if len(set(items)) != len(items):
        raise ContractViolation(f"recommended items must be pairwise distinct, got {items}")
    for slot_id, item in action.proposals.items():
        if item not in state.item_pool(slot_id):
            raise ContractViolation(f"item {item} is outside slot {slot_id}'s candidate pool")


def _validate_ask(state: ConversationState, action: Ask) -> None:
    _check_not_over(state)
    if set(action.questions) != set(state.active_slots):
        raise ContractViolation(
            f"questions cover slots {sorted(action.questions)}, "
            f"active slots are {sorted(state.active_slots)}"
        )
    for slot_id, (attr, cat) in action.questions.items():
        if attr not in state.attr_pool(slot_id):
            raise ContractViolation(f"attribute {attr} is outside slot {slot_id}'s pool")
        if cat not in state.cat_pool(slot_id):
            raise ContractViolation(f"category {cat} is outside slot {slot_id}'s pool")


def _validate_feedback_slots(
    state: ConversationState, verdicts: Mapping[int, Verdict], kind: str
) -> None:
    if set(verdicts) != set(state.active_slots):
        raise ContractViolation(
            f"{kind} verdicts cover slots {sorted(verdicts)}, "
            f"active slots are {sorted(state.active_slots)}"
        )
