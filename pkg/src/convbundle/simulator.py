"""Rule-based user simulator with a fixed target bundle in mind.

Verdicts are pure functions of (state, action, target): items are accepted
exactly when they belong to the not-yet-collected target, tags are judged
against the slot's potential target items as of the start of the round.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .data import Bundle, Catalog
from .env import (
    Ask,
    ConversationState,
    Feedback,
    Recommend,
    Verdict,
)


@dataclass(frozen=True)
class SimulatedUser:
    """Deterministic user persona: a target bundle plus the shared catalog."""

    target: Bundle
    catalog: Catalog

    def __post_init__(self) -> None:
        for item in self.target.items:
            if item not in self.catalog:
                raise ValueError(f"target item {item} not in catalog")


def potential_items(
    state: ConversationState, slot_id: int, sim: SimulatedUser
) -> frozenset[int]:
    """Target items still collectible in this slot: not accepted anywhere and
    consistent with every tag the slot has accepted so far."""
    slot = state.slots[slot_id]
    accepted = state.accepted_bundle
    return frozenset(
        item
        for item in sim.target.items
        if item not in accepted
        and slot.accepted_attributes <= sim.catalog.attributes_of[item]
        and slot.accepted_categories <= sim.catalog.categories_of[item]
    )


def judge_items(
    state: ConversationState, proposals: Mapping[int, int], sim: SimulatedUser
) -> dict[int, Verdict]:
    """ACCEPT a proposal iff it is an uncollected target item.

    Slots are processed in active-slot order and acceptances within the round
    count as collected, so one target item can never be granted twice.
    """
    taken = set(state.accepted_bundle)
    verdicts: dict[int, Verdict] = {}
    for slot_id in state.active_slots:
        item = proposals[slot_id]
        if item in sim.target.items and item not in taken:
            verdicts[slot_id] = Verdict.ACCEPT
            taken.add(item)
        else:
            verdicts[slot_id] = Verdict.IGNORE
    return verdicts


def judge_tags(
    state: ConversationState,
    questions: Mapping[int, tuple[int, int]],
    sim: SimulatedUser,
) -> tuple[dict[int, Verdict], dict[int, Verdict]]:
    """Per-slot attribute and category verdicts, both against the pre-round
    potential set: ACCEPT when a potential item of that slot carries the tag,
    REJECT when no target item at all carries it, IGNORE otherwise."""
    attr_verdicts: dict[int, Verdict] = {}
    cat_verdicts: dict[int, Verdict] = {}
    for slot_id in state.active_slots:
        attr, cat = questions[slot_id]
        pool = potential_items(state, slot_id, sim)
        attr_verdicts[slot_id] = _judge_one(
            attr, pool, sim, lambda i: sim.catalog.attributes_of[i]
        )
        cat_verdicts[slot_id] = _judge_one(
            cat, pool, sim, lambda i: sim.catalog.categories_of[i]
        )
    return attr_verdicts, cat_verdicts


def _judge_one(tag, pool, sim, tags_of) -> Verdict:
    if any(tag in tags_of(item) for item in pool):
        return Verdict.ACCEPT
    if all(tag not in tags_of(item) for item in sim.target.items):
        return Verdict.REJECT
    return Verdict.IGNORE


def wants_to_stop(state: ConversationState, sim: SimulatedUser) -> bool:
    return sim.target.items <= state.accepted_bundle


def respond(state: ConversationState, action: Recommend | Ask, sim: SimulatedUser) -> Feedback:
    """Assemble the full feedback for one round, including the satisfaction
    signal the environment needs to detect bundle completion."""
    if isinstance(action, Recommend):
        verdicts = judge_items(state, action.proposals, sim)
        would_have = state.accepted_bundle | {
            action.proposals[s] for s, v in verdicts.items() if v is Verdict.ACCEPT
        }
        return Feedback(items=verdicts, satisfied=sim.target.items <= would_have)
    attr_verdicts, cat_verdicts = judge_tags(state, action.questions, sim)
    return Feedback(attributes=attr_verdicts, categories=cat_verdicts)
