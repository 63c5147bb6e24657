"""Evaluation harness: conversational rollouts of pluggable policies.

A policy exposes decide/recommend/ask; the harness plays it against the
rule-based simulated user on a partition's held-out targets and aggregates
bundle metrics per seed, plus a per-round cumulative accuracy curve.
"""
from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Mapping, Protocol, Sequence

import torch

from .data import Bundle, Catalog, DatasetSplit, Partition
from .env import (
    MASK_ITEM,
    Ask,
    ConversationState,
    Recommend,
    ResultId,
    SlotContext,
    init_conversation,
    step_ask,
    step_recommend,
)
from .metrics import MetricReport, bundle_metrics
from .model import BuntModel, PolicyOutput, select_actions
from .simulator import SimulatedUser, respond

__all__ = [
    "BuntAllPolicy",
    "BuntLearnPolicy",
    "EvaluationReport",
    "FmAllPolicy",
    "FmLearnPolicy",
    "FmModel",
    "FreqPolicy",
    "MetricReport",
    "OraclePolicy",
    "RandomPolicy",
    "RecommenderPolicy",
    "bundle_metrics",
    "choose_action",
    "evaluate_one_shot",
    "evaluate_policy",
    "one_shot_predict",
    "train_fm",
]


class RecommenderPolicy(Protocol):
    """What the harness needs from a policy: a mode choice and both actions."""

    def begin(self, state: ConversationState) -> None: ...

    def decide(self, state: ConversationState) -> str: ...

    def recommend(self, state: ConversationState) -> Recommend: ...

    def ask(self, state: ConversationState) -> Ask: ...


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

METRIC_KEYS = ("precision", "recall", "f1", "accuracy", "avg_rounds", "success_rate")


@dataclass(frozen=True)
class EvaluationReport:
    """Per-seed aggregates plus the mean cumulative-accuracy curve."""

    per_seed: tuple[dict, ...]
    curve: tuple[float, ...]

    def mean(self, key: str) -> float:
        return sum(s[key] for s in self.per_seed) / len(self.per_seed)

    def stderr(self, key: str) -> float:
        n = len(self.per_seed)
        if n < 2:
            return 0.0
        mu = self.mean(key)
        var = sum((s[key] - mu) ** 2 for s in self.per_seed) / (n - 1)
        return math.sqrt(var / n)

    def summary(self) -> dict[str, dict[str, float]]:
        return {k: {"mean": self.mean(k), "stderr": self.stderr(k)} for k in METRIC_KEYS}

    def curve_csv(self) -> str:
        lines = ["round,accuracy"]
        lines += [f"{t},{v:.6f}" for t, v in enumerate(self.curve, start=1)]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------

def _feasible(state: ConversationState) -> tuple[bool, bool]:
    active = state.active_slots
    can_rec = len(state.item_pool(active[0])) >= len(active)
    can_ask = all(state.attr_pool(s) and state.cat_pool(s) for s in active)
    return can_rec, can_ask


def choose_action(policy: RecommenderPolicy, state: ConversationState) -> Recommend | Ask | None:
    """Ask the policy for its move, overriding infeasible mode choices.

    Returns None when neither a full recommendation nor a full question round
    can be formed (drained pools). Every driver (harness, service, CLI) goes
    through here so a policy behaves identically everywhere.
    """
    can_rec, can_ask = _feasible(state)
    if not can_rec and not can_ask:
        return None
    mode = policy.decide(state)
    if mode == "RECOMMEND" and not can_rec:
        mode = "ASK"
    elif mode == "ASK" and not can_ask:
        mode = "RECOMMEND"
    if mode == "RECOMMEND":
        return policy.recommend(state)
    return policy.ask(state)


def _play(policy: RecommenderPolicy, state: ConversationState, sim: SimulatedUser,
          max_rounds: int) -> tuple[ConversationState, list[float], int]:
    policy.begin(state)
    curve: list[float] = []
    done = False
    while not done:
        action = choose_action(policy, state)
        if action is None:
            break
        feedback = respond(state, action, sim)
        if isinstance(action, Recommend):
            outcome = step_recommend(state, action, feedback)
        else:
            outcome = step_ask(state, action, feedback)
        state, done = outcome.state, outcome.done
        curve.append(bundle_metrics(state.accepted_bundle, sim.target).accuracy)
    rounds = len(curve)
    last = curve[-1] if curve else bundle_metrics(state.accepted_bundle, sim.target).accuracy
    curve += [last] * (max_rounds - len(curve))
    return state, curve, rounds


def evaluate_policy(
    policy_factory: Callable[[int], RecommenderPolicy] | RecommenderPolicy,
    split: DatasetSplit,
    catalog: Catalog,
    partition: Partition = Partition.TEST,
    seeds: Sequence[int] = (0, 1, 2),
    k: int = 2,
    max_rounds: int = 10,
) -> EvaluationReport:
    """Play every user of a partition once per seed; aggregate bundle metrics.

    ``policy_factory`` is called with each seed (a plain policy object is
    reused as-is). Infeasible mode choices fall back to the other mode; a
    conversation with no feasible action ends where it stands.
    """
    users = split.users(partition)
    if not users:
        raise ValueError(f"partition {partition} has no users")
    per_seed = []
    curves = []
    for seed in seeds:
        policy = policy_factory(seed) if callable(policy_factory) else policy_factory
        totals = {key: 0.0 for key in METRIC_KEYS}
        seed_curve = [0.0] * max_rounds
        for user in users:
            state = init_conversation(
                user=user, history=list(split.offline_histories[user]),
                catalog=catalog, k=k, max_rounds=max_rounds,
            )
            sim = SimulatedUser(split.targets[user], catalog)
            final, curve, rounds = _play(policy, state, sim, max_rounds)
            report = bundle_metrics(final.accepted_bundle, sim.target)
            totals["precision"] += report.precision
            totals["recall"] += report.recall
            totals["f1"] += report.f1
            totals["accuracy"] += report.accuracy
            totals["avg_rounds"] += rounds
            totals["success_rate"] += float(
                bool(final.result_log) and final.result_log[-1] == ResultId.BUNDLE_SUC
            )
            for t in range(max_rounds):
                seed_curve[t] += curve[t]
        per_seed.append({key: value / len(users) for key, value in totals.items()})
        curves.append([v / len(users) for v in seed_curve])
    mean_curve = tuple(
        sum(c[t] for c in curves) / len(curves) for t in range(max_rounds)
    )
    return EvaluationReport(per_seed=tuple(per_seed), curve=mean_curve)


# ---------------------------------------------------------------------------
# Simple policies
# ---------------------------------------------------------------------------

class RandomPolicy:
    """Uniform valid actions; asks with probability ``ask_prob``."""

    def __init__(self, seed: int = 0, ask_prob: float = 0.5):
        self.rng = random.Random(seed)
        self.ask_prob = ask_prob

    def begin(self, state: ConversationState) -> None:
        pass

    def decide(self, state: ConversationState) -> str:
        return "ASK" if self.rng.random() < self.ask_prob else "RECOMMEND"

    def recommend(self, state: ConversationState) -> Recommend:
        chosen: dict[int, int] = {}
        used: set[int] = set()
        for sid in state.active_slots:
            pick = self.rng.choice(sorted(state.item_pool(sid) - used))
            chosen[sid] = pick
            used.add(pick)
        return Recommend(chosen)

    def ask(self, state: ConversationState) -> Ask:
        return Ask({
            sid: (
                self.rng.choice(sorted(state.attr_pool(sid))),
                self.rng.choice(sorted(state.cat_pool(sid))),
            )
            for sid in state.active_slots
        })


class OraclePolicy:
    """Knows every target; proposes unaccepted target items, padding with the
    lowest-id pool items once the target is exhausted. Upper-bounds accuracy."""

    def __init__(self, targets: Mapping[int, Bundle]):
        self.targets = targets
        self.target: frozenset[int] = frozenset()

    def begin(self, state: ConversationState) -> None:
        self.target = frozenset(self.targets[state.user])

    def decide(self, state: ConversationState) -> str:
        return "RECOMMEND"

    def recommend(self, state: ConversationState) -> Recommend:
        chosen: dict[int, int] = {}
        used: set[int] = set()
        missing = sorted(self.target - state.accepted_bundle)
        for sid in state.active_slots:
            pool = state.item_pool(sid) - used
            want = [i for i in missing if i in pool and i not in used]
            pick = want[0] if want else min(pool)
            chosen[sid] = pick
            used.add(pick)
        return Recommend(chosen)

    def ask(self, state: ConversationState) -> Ask:
        return _lowest_id_ask(state)


class FreqPolicy:
    """Non-personalized frequency baseline: the most frequent offline bundle's
    items first (lexicographic tie-break), then everything else by frequency."""

    def __init__(self, split: DatasetSplit, catalog: Catalog):
        bundles = [b for bs in split.offline_histories.values() for b in bs]
        counts = Counter(tuple(b.sorted_items()) for b in bundles)
        best = min(counts, key=lambda t: (-counts[t], t)) if counts else ()
        item_counts = Counter(i for b in bundles for i in b)
        rest = sorted(
            (i for i in range(catalog.n_items) if i not in best),
            key=lambda i: (-item_counts[i], i),
        )
        self.ranked = list(best) + rest

    def begin(self, state: ConversationState) -> None:
        pass

    def decide(self, state: ConversationState) -> str:
        return "RECOMMEND"

    def recommend(self, state: ConversationState) -> Recommend:
        chosen: dict[int, int] = {}
        used: set[int] = set()
        for sid in state.active_slots:
            pool = state.item_pool(sid)
            pick = next(i for i in self.ranked if i in pool and i not in used)
            chosen[sid] = pick
            used.add(pick)
        return Recommend(chosen)

    def ask(self, state: ConversationState) -> Ask:
        return _lowest_id_ask(state)


def _lowest_id_ask(state: ConversationState) -> Ask:
    return Ask({
        sid: (min(state.attr_pool(sid)), min(state.cat_pool(sid)))
        for sid in state.active_slots
    })


# ---------------------------------------------------------------------------
# Neural policies
# ---------------------------------------------------------------------------

class BuntLearnPolicy:
    """Full learned behavior: the manage gate chooses the mode, both action
    kinds come from the head distributions, greedily."""

    def __init__(self, model: BuntModel):
        self.model = model
        self._key = None
        self._policy: PolicyOutput | None = None

    def begin(self, state: ConversationState) -> None:
        self._key, self._policy = None, None

    def _heads(self, state: ConversationState) -> PolicyOutput:
        key = (state.user, state.round, state.active_slots, len(state.result_log))
        if key != self._key:
            with torch.no_grad():
                encoded = self.model.encode_state(state)
                self._policy = self.model.policies(encoded, state.active_slots)
            self._key = key
        return self._policy

    def decide(self, state: ConversationState) -> str:
        p = float(self._heads(state).p_manage)
        return "RECOMMEND" if p >= 0.5 else "ASK"

    def recommend(self, state: ConversationState) -> Recommend:
        return select_actions(self._heads(state), state.active_slots, "RECOMMEND")

    def ask(self, state: ConversationState) -> Ask:
        return select_actions(self._heads(state), state.active_slots, "ASK")


class BuntAllPolicy(BuntLearnPolicy):
    """Same parameters, manage overridden: always recommend."""

    def decide(self, state: ConversationState) -> str:
        return "RECOMMEND"


def one_shot_predict(
    model: BuntModel, history: Sequence[Bundle], catalog: Catalog, size: int
) -> frozenset[int]:
    """Fill ``size`` slots without feedback, most confident (slot, item) first."""
    if size < 1:
        raise ValueError("bundle size must be positive")
    slots: dict[int, SlotContext] = {i: SlotContext(slot_id=i) for i in range(size)}
    pool = set(range(catalog.n_items))
    unfilled = set(range(size))
    chosen: dict[int, int] = {}
    with torch.no_grad():
        while unfilled:
            active = tuple(sorted(unfilled))
            state = ConversationState(
                user=0, history=tuple(history), catalog=catalog,
                k=size, max_rounds=1, round=1,
                slots=MappingProxyType(dict(slots)), active_slots=active,
                result_log=(), proposed_items=frozenset(),
                killed_items=frozenset(), rejected_attributes=frozenset(),
                rejected_categories=frozenset(),
                asked_attributes=MappingProxyType({}),
                asked_categories=MappingProxyType({}),
            )
            encoded = model.encode_state(state)
            best: tuple[float, int, int] | None = None
            for sid in active:
                probs = torch.softmax(
                    model.masked_item_logits(encoded.row(sid), frozenset(pool)), dim=-1
                )
                conf, item = float(probs.max()), int(probs.argmax())
                if best is None or conf > best[0]:
                    best = (conf, sid, item)
            _, sid, item = best
            chosen[sid] = item
            slots[sid] = SlotContext(slot_id=sid, accepted_item=item, active=False)
            pool.discard(item)
            unfilled.discard(sid)
    return frozenset(chosen.values())


def evaluate_one_shot(
    model: BuntModel,
    split: DatasetSplit,
    catalog: Catalog,
    partition: Partition = Partition.TEST,
    seeds: Sequence[int] = (0, 1, 2),
    max_rounds: int = 10,
) -> EvaluationReport:
    """Single-pass bundle completion with an oracle size and zero feedback."""
    users = split.users(partition)
    if not users:
        raise ValueError(f"partition {partition} has no users")
    per_user = []
    for user in users:
        target = split.targets[user]
        predicted = one_shot_predict(
            model, split.offline_histories[user], catalog, len(target)
        )
        report = bundle_metrics(predicted, target)
        per_user.append((report, float(predicted == frozenset(target))))
    entry = {
        "precision": sum(r.precision for r, _ in per_user) / len(per_user),
        "recall": sum(r.recall for r, _ in per_user) / len(per_user),
        "f1": sum(r.f1 for r, _ in per_user) / len(per_user),
        "accuracy": sum(r.accuracy for r, _ in per_user) / len(per_user),
        "avg_rounds": 1.0,
        "success_rate": sum(s for _, s in per_user) / len(per_user),
    }
    curve = tuple([entry["accuracy"]] * max_rounds)
    return EvaluationReport(per_seed=tuple([dict(entry) for _ in seeds]), curve=curve)


# ---------------------------------------------------------------------------
# Factorization-machine baseline
# ---------------------------------------------------------------------------

class FmModel(torch.nn.Module):
    """Second-order scorer: item bias + user-item + item-tag + user-tag factors."""

    def __init__(self, n_users: int, n_items: int, n_attrs: int, n_cats: int, dim: int = 16):
        super().__init__()
        self.n_users, self.n_items = n_users, n_items
        self.user = torch.nn.Embedding(n_users, dim)
        self.item = torch.nn.Embedding(n_items, dim)
        self.attr = torch.nn.Embedding(max(n_attrs, 1), dim)
        self.cat = torch.nn.Embedding(max(n_cats, 1), dim)
        self.item_bias = torch.nn.Embedding(n_items, 1)
        for table in (self.user, self.item, self.attr, self.cat):
            torch.nn.init.normal_(table.weight, std=0.1)
        torch.nn.init.zeros_(self.item_bias.weight)

    def score(
        self,
        user: int,
        items: torch.Tensor,
        attrs: frozenset[int] = frozenset(),
        cats: frozenset[int] = frozenset(),
    ) -> torch.Tensor:
        v_u = self.user.weight[user]
        v_i = self.item(items)
        s = self.item_bias(items).squeeze(-1) + (v_i * v_u).sum(-1)
        for a in sorted(attrs):
            v_g = self.attr.weight[a]
            s = s + (v_i * v_g).sum(-1) + (v_u * v_g).sum()
        for c in sorted(cats):
            v_g = self.cat.weight[c]
            s = s + (v_i * v_g).sum(-1) + (v_u * v_g).sum()
        return s


def train_fm(
    split: DatasetSplit,
    catalog: Catalog,
    dim: int = 16,
    epochs: int = 30,
    lr: float = 0.05,
    negatives: int = 4,
    seed: int = 0,
) -> FmModel:
    """Pairwise-ranking training on offline bundles: each bundle item must
    outscore sampled non-bundle items under the item's own tags as context."""
    n_users = max(split.users()) + 1
    torch.manual_seed(seed)
    model = FmModel(n_users, catalog.n_items, catalog.n_attributes,
                    catalog.n_categories, dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    rng = random.Random(seed)
    pairs = [
        (user, item, frozenset(bundle))
        for user, bundles in sorted(split.offline_histories.items())
        for bundle in bundles
        for item in bundle.sorted_items()
    ]
    if not pairs:
        raise ValueError("no offline bundles to train on")
    universe = list(range(catalog.n_items))
    for _ in range(epochs):
        rng.shuffle(pairs)
        loss = torch.zeros(())
        for user, item, bundle in pairs:
            negs = []
            while len(negs) < negatives:
                j = rng.choice(universe)
                if j not in bundle:
                    negs.append(j)
            attrs = catalog.attributes_of[item]
            cats = catalog.categories_of[item]
            scores = model.score(
                user, torch.tensor([item] + negs), attrs, cats
            )
            loss = loss - torch.log(torch.sigmoid(scores[0] - scores[1:])).sum()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return model


class FmAllPolicy:
    """Always recommends; per slot, the best-scoring pool item given that
    slot's accepted tags."""

    def __init__(self, fm: FmModel):
        self.fm = fm

    def begin(self, state: ConversationState) -> None:
        pass

    def decide(self, state: ConversationState) -> str:
        return "RECOMMEND"

    def recommend(self, state: ConversationState) -> Recommend:
        chosen: dict[int, int] = {}
        used: set[int] = set()
        with torch.no_grad():
            for sid in state.active_slots:
                ctx = state.slots[sid]
                pool = sorted(state.item_pool(sid) - used)
                scores = self.fm.score(
                    state.user % self.fm.n_users, torch.tensor(pool),
                    ctx.accepted_attributes, ctx.accepted_categories,
                )
                pick = pool[int(scores.argmax())]
                chosen[sid] = pick
                used.add(pick)
        return Recommend(chosen)

    def ask(self, state: ConversationState) -> Ask:
        return _lowest_id_ask(state)


class FmLearnPolicy(FmAllPolicy):
    """FM item selection, with the mode decision and questions delegated to a
    trained manage/ask network."""

    def __init__(self, fm: FmModel, bunt: BuntModel):
        super().__init__(fm)
        self._delegate = BuntLearnPolicy(bunt)

    def begin(self, state: ConversationState) -> None:
        self._delegate.begin(state)

    def decide(self, state: ConversationState) -> str:
        return self._delegate.decide(state)

    def ask(self, state: ConversationState) -> Ask:
        return self._delegate.ask(state)
